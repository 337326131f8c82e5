#include <catch2/catch_amalgamated.hpp>

#include "egspo/tasks.hpp"

using namespace egspo;

TEST_CASE("12 + 34 builds the documented scratchpad") {
  TaskInstance inst = make_instance(12, 34);
  CHECK(inst.truth == 46);
  CHECK(inst.prompt == TokenSeq{tok::kBos, 1, 2, tok::kPlus, 3, 4, tok::kEq});
  // col0: 2+4 -> 6 carry 0; col1: 1+3 -> 4 carry 0; answer 4 6
  CHECK(inst.expert_response ==
        TokenSeq{6, tok::kCarry, 0, 4, tok::kCarry, 0, tok::kAnswer, 4, 6, tok::kEos});
  CHECK(verify(inst, inst.expert_response).value == 1);
  CHECK(decode_text(inst.prompt) == "<s>12+34=");
}

TEST_CASE("carry chains propagate through the scratchpad") {
  TaskInstance inst = make_instance(99, 99);
  CHECK(inst.truth == 198);
  CHECK(inst.expert_response ==
        TokenSeq{8, tok::kCarry, 1, 9, tok::kCarry, 1, tok::kAnswer, 1, 9, 8, tok::kEos});
  CHECK(verify(inst, inst.expert_response).value == 1);

  TaskInstance zero = make_instance(0, 0);
  CHECK(zero.expert_response ==
        TokenSeq{0, tok::kCarry, 0, tok::kAnswer, 0, tok::kEos});
  CHECK(verify(zero, zero.expert_response).value == 1);
}

TEST_CASE("generator is deterministic and within bounds") {
  auto a = generate_instances(404, 1000, 2, 2);
  auto b = generate_instances(404, 1000, 2, 2);
  REQUIRE(a.size() == 1000);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].expert_response == b[i].expert_response);
    CHECK(a[i].truth == b[i].truth);
  }

  const PolicyConfig ref_cfg;  // context 48
  for (const auto& inst : a) {
    CHECK(inst.truth >= 0);
    CHECK(inst.truth <= 198);
    CHECK(verify(inst, inst.expert_response).value == 1);
    CHECK(inst.prompt.size() + inst.expert_response.size() <=
          static_cast<size_t>(ref_cfg.context_len));
    CHECK(inst.prompt.front() == tok::kBos);
    CHECK(inst.expert_response.back() == tok::kEos);
  }

  auto c = generate_instances(405, 50, 2, 2);
  bool any_diff = false;
  for (size_t i = 0; i < c.size(); ++i) {
    if (c[i].prompt != a[i].prompt) any_diff = true;
  }
  CHECK(any_diff);

  CHECK_THROWS_AS(generate_instances(1, 0, 2, 2), InvalidInput);
  CHECK_THROWS_AS(generate_instances(1, 5, 0, 2), InvalidInput);
  CHECK_THROWS_AS(generate_instances(1, 5, 2, 4), InvalidInput);
}

TEST_CASE("verifier rejects malformed and wrong responses") {
  TaskInstance inst = make_instance(17, 25);  // truth 42
  TokenSeq good{2, tok::kCarry, 1, 4, tok::kCarry, 0, tok::kAnswer, 4, 2, tok::kEos};
  CHECK(verify(inst, good).value == 1);

  SECTION("missing EOS") {
    TokenSeq r = good;
    r.pop_back();
    CHECK(verify(inst, r).value == -1);
  }
  SECTION("wrong final digit") {
    TokenSeq r = good;
    r[8] = 3;
    CHECK(verify(inst, r).value == -1);
  }
  SECTION("flipping any answer digit breaks it") {
    for (size_t pos : {7u, 8u}) {
      for (TokenId d = 0; d <= 9; ++d) {
        if (d == good[pos]) continue;
        TokenSeq r = good;
        r[pos] = d;
        CHECK(verify(inst, r).value == -1);
      }
    }
  }
  SECTION("no answer marker") {
    CHECK(verify(inst, {4, 2, tok::kEos}).value == -1);
  }
  SECTION("two answer markers") {
    TokenSeq r{tok::kAnswer, tok::kAnswer, 4, 2, tok::kEos};
    CHECK(verify(inst, r).value == -1);
  }
  SECTION("empty digits after marker") {
    CHECK(verify(inst, {tok::kAnswer, tok::kEos}).value == -1);
  }
  SECTION("non-digit inside the answer") {
    CHECK(verify(inst, {tok::kAnswer, 4, tok::kPlus, 2, tok::kEos}).value == -1);
  }
  SECTION("empty response") {
    CHECK(verify(inst, {}).value == -1);
  }
  SECTION("leading zeros still equal the truth") {
    CHECK(verify(inst, {tok::kAnswer, 0, 4, 2, tok::kEos}).value == 1);
  }
  SECTION("tokens after EOS are ignored") {
    TokenSeq r = good;
    r.push_back(9);
    r.push_back(9);
    CHECK(verify(inst, r).value == 1);
  }
}

TEST_CASE("expert pool split") {
  auto instances = generate_instances(7, 100, 2, 2);
  PoolSplit s = split_expert_pool(instances, 0.2);
  CHECK(s.expert.size() == 20);
  CHECK(s.rollout.size() == 80);
  for (const auto& e : s.expert) CHECK_FALSE(e.expert_response.empty());
  for (const auto& r : s.rollout) {
    CHECK(r.expert_response.empty());
    CHECK_FALSE(r.prompt.empty());
  }
  // truth survives stripping so the verifier can score rollouts
  CHECK(s.rollout[0].truth == instances[20].truth);

  auto ten = generate_instances(8, 10, 1, 2);
  PoolSplit half = split_expert_pool(ten, 0.5);
  CHECK(half.expert.size() == 5);
  CHECK(half.rollout.size() == 5);

  PoolSplit again = split_expert_pool(instances, 0.2);
  for (size_t i = 0; i < again.expert.size(); ++i) {
    CHECK(again.expert[i].prompt == s.expert[i].prompt);
  }

  CHECK_THROWS_AS(split_expert_pool(instances, 0.0), ConfigError);
  CHECK_THROWS_AS(split_expert_pool(instances, 1.0), ConfigError);
  CHECK_THROWS_AS(split_expert_pool(instances, -0.3), ConfigError);

  // tiny pools still leave at least one instance on each side
  auto two = generate_instances(9, 2, 1, 1);
  PoolSplit tiny = split_expert_pool(two, 0.01);
  CHECK(tiny.expert.size() == 1);
  CHECK(tiny.rollout.size() == 1);
}
