#pragma once

/**
 * Training diagnostics that make the gating behaviour observable:
 *
 *  - direction audit: over low-entropy tokens with negative advantage,
 *    what fraction of per-token gradients push the sampled token's
 *    probability down (the update direction the reward asks for),
 *  - entropy report: distribution summary plus realized HIGH fraction,
 *  - overhead probe: wall-clock cost of the gated loss relative to
 *    plain clipped-ratio loss on the same batch.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "gate.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "rollout.hpp"

namespace egspo {

using ordered_json = nlohmann::ordered_json;

// ============================================================================
// Direction audit
// ============================================================================

struct DirectionAudit {
  int64_t n_low_tokens_neg_adv = 0;
  int64_t n_correct_direction = 0;

  /// Empty denominator yields no fraction rather than 0/0.
  std::optional<double> fraction() const {
    if (n_low_tokens_neg_adv == 0) return std::nullopt;
    return static_cast<double>(n_correct_direction) /
           static_cast<double>(n_low_tokens_neg_adv);
  }
};

/**
 * Folds one trajectory into the audit. A token counts as "correct
 * direction" when d loss / d logit >= 0 for the sampled token, i.e. a
 * descent step does not raise the probability of a token whose group
 * advantage is negative. Clipped-to-zero gradients count as correct.
 */
inline void accumulate_direction(DirectionAudit& audit, const Trajectory& traj,
                                 const GateDecision& decision,
                                 const std::vector<double>& new_logprobs,
                                 const GateConfig& cfg) {
  const size_t n = traj.len();
  if (decision.high.size() != n || new_logprobs.size() != n) {
    throw InvalidInput("direction audit: per-token shape mismatch");
  }
  if (!(traj.advantage < 0.0)) return;
  for (size_t t = 0; t < n; ++t) {
    if (decision.high[t]) continue;
    const double ratio = std::exp(new_logprobs[t] - traj.old_logprob[t]);
    const double p_old = std::exp(traj.old_logprob[t]);
    const double g = token_loss_dlp(false, ratio, traj.advantage, p_old, cfg);
    ++audit.n_low_tokens_neg_adv;
    if (g >= 0.0) ++audit.n_correct_direction;
  }
}

/**
 * Offline audit of a rollout set at the snapshot itself (new = old policy,
 * all ratios exactly 1). Routing is recomputed from the stored entropies;
 * seed only matters for RANDOM_SELECTION.
 */
inline DirectionAudit audit_direction(const std::vector<RolloutGroup>& groups,
                                      const GateConfig& cfg, uint64_t seed) {
  DirectionAudit audit;
  uint64_t index = 0;
  for (const RolloutGroup& group : groups) {
    for (const Trajectory& traj : group.trajectories) {
      Rng rng = derive_stream(seed, "audit-route", index++);
      const GateDecision d = route_tokens(traj.entropy, traj.old_logprob, cfg, rng);
      accumulate_direction(audit, traj, d, traj.old_logprob, cfg);
    }
  }
  return audit;
}

// ============================================================================
// Entropy report
// ============================================================================

struct EntropyReport {
  int64_t n_tokens = 0;
  int64_t n_high = 0;
  int64_t n_low = 0;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double q10 = 0.0;
  double q50 = 0.0;
  double q90 = 0.0;
  double frac_high = 0.0;  // fraction at or above its sequence's threshold
  double mean_entropy_high = 0.0;
  double mean_entropy_low = 0.0;  // 0 when no token landed in the low branch
};

/// Linear interpolation between closest ranks of an ascending-sorted vector.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InvalidInput("quantile of empty set");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidInput("quantile must lie in [0, 1]");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

/**
 * Summarizes token entropies across trajectories and the realized split
 * under per-sequence top-k routing. For entropy-ranked variants the mean
 * HIGH entropy is at least the mean LOW entropy by construction; random
 * routing carries no such guarantee.
 */
inline EntropyReport entropy_report(const std::vector<Trajectory>& trajs,
                                    const GateConfig& cfg, uint64_t seed) {
  if (trajs.empty()) throw InvalidInput("entropy report needs at least one trajectory");
  EntropyReport rep;
  std::vector<double> all;
  double sum_high = 0.0, sum_low = 0.0;
  uint64_t index = 0;
  for (const Trajectory& traj : trajs) {
    Rng rng = derive_stream(seed, "audit-route", index++);
    const GateDecision d = route_tokens(traj.entropy, traj.old_logprob, cfg, rng);
    for (size_t t = 0; t < traj.len(); ++t) {
      all.push_back(traj.entropy[t]);
      if (d.high[t]) {
        ++rep.n_high;
        sum_high += traj.entropy[t];
      } else {
        ++rep.n_low;
        sum_low += traj.entropy[t];
      }
    }
  }
  rep.n_tokens = static_cast<int64_t>(all.size());
  std::sort(all.begin(), all.end());
  rep.min = all.front();
  rep.max = all.back();
  rep.mean = kern::sum(all.data(), static_cast<uint32_t>(all.size())) /
             static_cast<double>(all.size());
  rep.q10 = quantile_sorted(all, 0.10);
  rep.q50 = quantile_sorted(all, 0.50);
  rep.q90 = quantile_sorted(all, 0.90);
  rep.frac_high = static_cast<double>(rep.n_high) / static_cast<double>(rep.n_tokens);
  rep.mean_entropy_high =
      rep.n_high > 0 ? sum_high / static_cast<double>(rep.n_high) : 0.0;
  rep.mean_entropy_low =
      rep.n_low > 0 ? sum_low / static_cast<double>(rep.n_low) : 0.0;
  return rep;
}

// ============================================================================
// Overhead probe
// ============================================================================

struct OverheadReport {
  double gated_ms = 0.0;    // median over reps
  double uniform_ms = 0.0;  // median over reps
  double overhead_fraction = 0.0;
  int reps = 0;
  bool timer_warning = false;  // baseline under 1 ms per batch
};

namespace detail {

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// All tokens on the plain branch: no routing, no attenuation weights.
inline GateDecision uniform_decision(size_t n) {
  GateDecision d;
  d.high.assign(n, 1);
  d.threshold = 0.0;
  d.phi_weight.assign(n, 1.0);
  return d;
}

}  // namespace detail

/**
 * Times loss construction plus backward for the configured gate against a
 * plain clipped-ratio baseline on the identical batch. One untimed warm-up
 * pass per path, then the median over reps; routing cost is charged to the
 * gated path. overhead_fraction = gated / uniform - 1.
 */
inline OverheadReport measure_overhead(const Policy& pol,
                                       const std::vector<Trajectory>& batch,
                                       const GateConfig& cfg, int reps = 7,
                                       uint64_t seed = 0) {
  if (reps < 5) throw InvalidInput("overhead probe needs at least 5 reps");
  if (batch.empty()) throw InvalidInput("overhead probe needs a non-empty batch");
  cfg.validate();

  GateConfig uniform_cfg = cfg;
  uniform_cfg.variant = GateVariant::UNIFORM_PPO;

  std::vector<double> grad(pol.layout().total, 0.0);
  Tape tape(pol.params());
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  auto run_pass = [&](bool gated) {
    std::fill(grad.begin(), grad.end(), 0.0);
    uint64_t index = 0;
    for (const Trajectory& traj : batch) {
      GateDecision d;
      if (gated) {
        Rng rng = derive_stream(seed, "audit-route", index++);
        d = route_tokens(traj.entropy, traj.old_logprob, cfg, rng);
      } else {
        d = detail::uniform_decision(traj.len());
      }
      TokenSeq tokens = traj.prompt;
      tokens.insert(tokens.end(), traj.response.begin(), traj.response.end());
      tape.reset(pol.params());
      const std::vector<Ref> lp_refs =
          pol.seq_logprobs_tape(tape, tokens, traj.prompt.size());
      const Ref loss = entropy_gated_loss_tape(tape, traj, d, lp_refs,
                                               gated ? cfg : uniform_cfg);
      tape.backward(loss, grad, inv_batch);
    }
  };

  using clock = std::chrono::steady_clock;
  auto time_pass = [&](bool gated) {
    const auto t0 = clock::now();
    run_pass(gated);
    const auto t1 = clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };

  run_pass(false);  // warm caches and allocator pools
  run_pass(true);

  std::vector<double> gated_ms, uniform_ms;
  for (int r = 0; r < reps; ++r) {
    uniform_ms.push_back(time_pass(false));
    gated_ms.push_back(time_pass(true));
  }

  OverheadReport rep;
  rep.reps = reps;
  rep.gated_ms = detail::median_of(gated_ms);
  rep.uniform_ms = detail::median_of(uniform_ms);
  rep.overhead_fraction = rep.gated_ms / rep.uniform_ms - 1.0;
  rep.timer_warning = rep.uniform_ms < 1.0;
  return rep;
}

// ============================================================================
// Combined report
// ============================================================================

inline ordered_json audit_report_json(GateVariant variant,
                                      const DirectionAudit& direction,
                                      const EntropyReport& entropy,
                                      const OverheadReport* overhead = nullptr) {
  ordered_json j;
  j["variant"] = variant_name(variant);
  j["n_tokens"] = entropy.n_tokens;
  j["n_low_tokens_neg_adv"] = direction.n_low_tokens_neg_adv;
  j["n_correct_direction"] = direction.n_correct_direction;
  if (auto f = direction.fraction()) {
    j["fraction_correct_direction"] = *f;
  } else {
    j["fraction_correct_direction"] = nullptr;
  }
  if (overhead != nullptr) {
    j["overhead_fraction"] = overhead->overhead_fraction;
    j["overhead_gated_ms"] = overhead->gated_ms;
    j["overhead_uniform_ms"] = overhead->uniform_ms;
    j["overhead_timer_warning"] = overhead->timer_warning;
  } else {
    j["overhead_fraction"] = nullptr;
  }
  j["entropy_summary"] = {{"min", entropy.min},
                          {"q10", entropy.q10},
                          {"q50", entropy.q50},
                          {"q90", entropy.q90},
                          {"max", entropy.max},
                          {"mean", entropy.mean},
                          {"frac_high", entropy.frac_high},
                          {"mean_entropy_high", entropy.mean_entropy_high},
                          {"mean_entropy_low", entropy.mean_entropy_low}};
  return j;
}

}  // namespace egspo
