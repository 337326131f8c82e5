#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "egspo/sft.hpp"

using namespace egspo;

namespace {

PolicyConfig task_policy_config() {
  PolicyConfig cfg;
  cfg.vocab = task_vocab();
  return cfg;
}

}  // namespace

TEST_CASE("sft loss is the flat mean of response-token NLL") {
  Policy pol = Policy::init(task_policy_config(), 12);
  auto instances = generate_instances(50, 6, 2, 2);
  SftBatch batch = SftBatch::from_instances(instances);

  double total = 0.0;
  size_t count = 0;
  for (const SftItem& item : batch.items) {
    SeqEval ev = pol.seq_eval(item.tokens, item.first_response);
    // mask starts exactly at the response: one term per expert token
    CHECK(ev.logprobs.size() == item.tokens.size() - item.first_response);
    for (double lp : ev.logprobs) total -= lp;
    count += ev.logprobs.size();
  }
  CHECK(sft_loss(pol, batch) == Catch::Approx(total / count).margin(1e-15));

  Tape tape(pol.params());
  Ref loss = sft_loss_tape(tape, pol, batch);
  CHECK(tape.value(loss) == Catch::Approx(sft_loss(pol, batch)).margin(1e-15));
}

TEST_CASE("freshly initialized policy sits near the uniform loss") {
  Policy pol = Policy::init(task_policy_config(), 7);
  auto instances = generate_instances(51, 32, 2, 2);
  const double loss = sft_loss(pol, SftBatch::from_instances(instances));
  CHECK(loss == Catch::Approx(std::log(17.0)).margin(0.15));
}

TEST_CASE("a policy certain of every expert token has near-zero loss") {
  Policy pol = Policy::init(task_policy_config(), 8);
  pol.params()[pol.layout().b_out + 3] = 60.0;
  TaskInstance inst;
  inst.prompt = {tok::kBos, 1, tok::kPlus, 2, tok::kEq};
  inst.expert_response = {3, 3, 3, 3};
  inst.truth = 3;
  const double loss = sft_loss(pol, SftBatch::from_instances({inst}));
  CHECK(loss < 1e-9);
}

TEST_CASE("batch construction rejects stripped instances and empty masks") {
  auto instances = generate_instances(52, 10, 2, 2);
  PoolSplit split = split_expert_pool(instances, 0.5);
  CHECK_THROWS_AS(SftBatch::from_instances(split.rollout), InvalidInput);

  Policy pol = Policy::init(task_policy_config(), 1);
  CHECK_THROWS_AS(sft_loss(pol, SftBatch{}), InvalidInput);
  Tape tape(pol.params());
  CHECK_THROWS_AS(sft_loss_tape(tape, pol, SftBatch{}), InvalidInput);
}

TEST_CASE("sft gradient matches finite differences") {
  PolicyConfig cfg;
  cfg.vocab = task_vocab();
  cfg.d_model = 8;
  cfg.context_len = 20;
  Policy pol = Policy::init(cfg, 19);
  auto instances = generate_instances(53, 2, 1, 1);
  SftBatch batch = SftBatch::from_instances(instances);

  Tape tape(pol.params());
  Ref loss = sft_loss_tape(tape, pol, batch);
  std::vector<double> grad(pol.param_count(), 0.0);
  tape.backward(loss, grad);

  const double h = 1e-5;
  double max_rel = 0.0;
  std::vector<double>& p = pol.params();
  for (size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = sft_loss(pol, batch);
    p[i] = keep - h;
    const double dn = sft_loss(pol, batch);
    p[i] = keep;
    const double fd = (up - dn) / (2 * h);
    const double rel =
        std::abs(grad[i] - fd) / std::max({std::abs(grad[i]), std::abs(fd), 1e-6});
    max_rel = std::max(max_rel, rel);
  }
  CHECK(max_rel < 1e-4);
}

TEST_CASE("zero epochs leave parameters untouched") {
  Policy pol = Policy::init(task_policy_config(), 3);
  const std::vector<double> before = pol.params();
  AdamState opt = AdamState::init(pol.param_count());
  Stage1Config cfg;
  cfg.epochs = 0;
  auto experts = generate_instances(54, 8, 2, 2);
  auto holdout = generate_instances(55, 8, 2, 2);
  auto records = run_stage1(pol, opt, experts, holdout, cfg, 1, 40);
  CHECK(records.empty());
  CHECK(pol.params() == before);
}

TEST_CASE("stage 1 descends and is seed-deterministic") {
  auto experts = generate_instances(56, 24, 2, 2);
  auto holdout = generate_instances(57, 16, 2, 2);
  Stage1Config cfg;
  cfg.epochs = 4;
  cfg.batch = 8;

  auto run = [&](uint64_t seed) {
    Policy pol = Policy::init(task_policy_config(), 100);
    AdamState opt = AdamState::init(pol.param_count());
    auto recs = run_stage1(pol, opt, experts, holdout, cfg, seed, 40);
    return std::make_pair(pol.params(), recs);
  };

  auto [params_a, recs_a] = run(5);
  auto [params_b, recs_b] = run(5);
  CHECK(params_a == params_b);
  REQUIRE(recs_a.size() == 4);
  for (size_t i = 0; i < recs_a.size(); ++i) {
    CHECK(recs_a[i].loss == recs_b[i].loss);
    CHECK(recs_a[i].holdout_acc == recs_b[i].holdout_acc);
    CHECK(recs_a[i].epoch == static_cast<int>(i));
  }
  CHECK(recs_a.back().loss < recs_a.front().loss);

  Policy probe = Policy::init(task_policy_config(), 100);
  const double init_loss = sft_loss(probe, SftBatch::from_instances(experts));
  probe.params() = params_a;
  CHECK(sft_loss(probe, SftBatch::from_instances(experts)) < init_loss);

  AdamState empty_opt = AdamState::init(probe.param_count());
  CHECK_THROWS_AS(run_stage1(probe, empty_opt, {}, holdout, cfg, 1, 40), InvalidInput);
}

TEST_CASE("divergence rolls back to the last finite state") {
  Policy pol = Policy::init(task_policy_config(), 4);
  AdamState opt = AdamState::init(pol.param_count());
  Stage1Config cfg;
  cfg.epochs = 5;
  cfg.batch = 4;
  cfg.lr = 1e308;  // drives parameters to overflow within a step or two
  auto experts = generate_instances(58, 4, 1, 1);
  auto holdout = generate_instances(59, 4, 1, 1);

  CHECK_THROWS_AS(run_stage1(pol, opt, experts, holdout, cfg, 2, 40), TrainingAbort);
  CHECK(all_finite(pol.params()));
  CHECK(all_finite(opt.m));
  CHECK(all_finite(opt.v));
}
