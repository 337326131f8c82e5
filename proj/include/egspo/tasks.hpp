#pragma once

/**
 * Synthetic verifiable-reward task: multi-digit addition with a column
 * scratchpad.
 *
 * Prompt:   BOS a_digits '+' b_digits '='            (digits most-significant first)
 * Response: per column, least-significant first, the tokens
 *           digit(sum mod 10) 'C' digit(carry);
 *           then 'A', the answer digits most-significant first, EOS.
 *
 * The column tokens become near-deterministic after SFT while answer-onset
 * and carry tokens keep higher entropy, so the routing gate has real
 * structure to find. Rewards are outcome-only: +1 for a well-formed answer
 * equal to the true sum, -1 for anything else.
 */

#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace egspo {

// ============================================================================
// Token table (ids fixed across the whole artifact)
// ============================================================================

namespace tok {
constexpr TokenId kPlus = 10;
constexpr TokenId kEq = 11;
constexpr TokenId kCarry = 12;   // 'C'
constexpr TokenId kAnswer = 13;  // 'A'
constexpr TokenId kBos = 14;
constexpr TokenId kEos = 15;
constexpr TokenId kPad = 16;
}  // namespace tok

inline Vocab task_vocab() { return Vocab{17, tok::kBos, tok::kEos, tok::kPad}; }

inline bool is_digit_token(TokenId t) { return t >= 0 && t <= 9; }

/// Human-readable form of a token sequence, for dataset export and logs.
inline std::string decode_text(const TokenSeq& tokens) {
  std::string out;
  for (TokenId t : tokens) {
    if (is_digit_token(t)) {
      out.push_back(static_cast<char>('0' + t));
    } else if (t == tok::kPlus) {
      out.push_back('+');
    } else if (t == tok::kEq) {
      out.push_back('=');
    } else if (t == tok::kCarry) {
      out.push_back('C');
    } else if (t == tok::kAnswer) {
      out.push_back('A');
    } else if (t == tok::kBos) {
      out += "<s>";
    } else if (t == tok::kEos) {
      out += "</s>";
    } else if (t == tok::kPad) {
      out += "<pad>";
    } else {
      out += "<?>";
    }
  }
  return out;
}

// ============================================================================
// Instances
// ============================================================================

struct TaskInstance {
  TokenSeq prompt;
  TokenSeq expert_response;  // empty in rollout-only pools
  int64_t truth = 0;
};

struct Reward {
  int32_t value = -1;  // +1 or -1, nothing else
};

namespace detail {

inline std::vector<int32_t> digits_msf(int64_t n) {
  std::vector<int32_t> ds;
  if (n == 0) return {0};
  while (n > 0) {
    ds.push_back(static_cast<int32_t>(n % 10));
    n /= 10;
  }
  return {ds.rbegin(), ds.rend()};
}

}  // namespace detail

/// Builds the full instance for a + b with the column scratchpad.
inline TaskInstance make_instance(int64_t a, int64_t b) {
  if (a < 0 || b < 0) throw InvalidInput("operands must be nonnegative");
  TaskInstance inst;
  inst.truth = a + b;

  const auto da = detail::digits_msf(a);
  const auto db = detail::digits_msf(b);
  inst.prompt.push_back(tok::kBos);
  for (int32_t d : da) inst.prompt.push_back(d);
  inst.prompt.push_back(tok::kPlus);
  for (int32_t d : db) inst.prompt.push_back(d);
  inst.prompt.push_back(tok::kEq);

  const size_t cols = std::max(da.size(), db.size());
  int32_t carry = 0;
  for (size_t c = 0; c < cols; ++c) {
    const int32_t xa = c < da.size() ? da[da.size() - 1 - c] : 0;
    const int32_t xb = c < db.size() ? db[db.size() - 1 - c] : 0;
    const int32_t s = xa + xb + carry;
    inst.expert_response.push_back(s % 10);
    inst.expert_response.push_back(tok::kCarry);
    inst.expert_response.push_back(s / 10);
    carry = s / 10;
  }
  inst.expert_response.push_back(tok::kAnswer);
  for (int32_t d : detail::digits_msf(inst.truth)) inst.expert_response.push_back(d);
  inst.expert_response.push_back(tok::kEos);
  return inst;
}

/**
 * Deterministic instance stream. Each operand independently draws a digit
 * count in [min_digits, max_digits] and then a uniform value with at most
 * that many digits, so a 2-digit range covers 0..99 per operand.
 */
inline std::vector<TaskInstance> generate_instances(uint64_t seed, size_t count,
                                                    int min_digits, int max_digits) {
  if (count < 1) throw InvalidInput("count must be >= 1");
  if (min_digits < 1 || max_digits > 3 || min_digits > max_digits) {
    throw InvalidInput("digit range must lie within [1, 3]");
  }
  Rng rng = derive_stream(seed, "task-gen");
  auto draw_operand = [&]() {
    const int k = min_digits + static_cast<int>(rng.below(
                                   static_cast<uint64_t>(max_digits - min_digits + 1)));
    int64_t limit = 1;
    for (int i = 0; i < k; ++i) limit *= 10;
    return static_cast<int64_t>(rng.below(static_cast<uint64_t>(limit)));
  };
  std::vector<TaskInstance> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const int64_t a = draw_operand();
    const int64_t b = draw_operand();
    out.push_back(make_instance(a, b));
  }
  return out;
}

// ============================================================================
// Verifier
// ============================================================================

/**
 * +1 iff the response (up to its first EOS) contains exactly one 'A' marker
 * followed by one or more digit tokens terminated by that EOS, and the
 * digits' integer value equals the truth. Everything else scores -1;
 * malformed output is a reward, never an error.
 */
inline Reward verify(const TaskInstance& inst, const TokenSeq& response) {
  size_t end = response.size();
  bool saw_eos = false;
  for (size_t i = 0; i < response.size(); ++i) {
    if (response[i] == tok::kEos) {
      end = i;
      saw_eos = true;
      break;
    }
  }
  if (!saw_eos) return Reward{-1};

  size_t marker = end;
  int markers = 0;
  for (size_t i = 0; i < end; ++i) {
    if (response[i] == tok::kAnswer) {
      marker = i;
      ++markers;
    }
  }
  if (markers != 1 || marker + 1 >= end) return Reward{-1};

  int64_t value = 0;
  for (size_t i = marker + 1; i < end; ++i) {
    if (!is_digit_token(response[i])) return Reward{-1};
    value = value * 10 + response[i];
  }
  return Reward{value == inst.truth ? 1 : -1};
}

// ============================================================================
// Expert/rollout split
// ============================================================================

struct PoolSplit {
  std::vector<TaskInstance> expert;    // demonstrations kept
  std::vector<TaskInstance> rollout;   // prompts + truth only
};

/**
 * First round(fraction * n) instances (clamped to [1, n-1]) keep their
 * demonstrations; the rest have them stripped so rollout prompts can never
 * feed a supervised loss.
 */
inline PoolSplit split_expert_pool(const std::vector<TaskInstance>& instances,
                                   double expert_fraction) {
  if (!(expert_fraction > 0.0) || !(expert_fraction < 1.0)) {
    throw ConfigError("expert_fraction must lie in (0, 1)");
  }
  if (instances.size() < 2) throw InvalidInput("need at least 2 instances to split");
  size_t n_expert = static_cast<size_t>(
      std::llround(expert_fraction * static_cast<double>(instances.size())));
  n_expert = std::max<size_t>(1, std::min(n_expert, instances.size() - 1));

  PoolSplit split;
  for (size_t i = 0; i < instances.size(); ++i) {
    if (i < n_expert) {
      split.expert.push_back(instances[i]);
    } else {
      TaskInstance stripped = instances[i];
      stripped.expert_response.clear();
      split.rollout.push_back(stripped);
    }
  }
  return split;
}

}  // namespace egspo
