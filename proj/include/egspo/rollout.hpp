#pragma once

/**
 * Rollout generation and group-relative advantage normalization.
 *
 * Each prompt gets a group of G sampled responses. Per generated token we
 * record the sampling-time log-prob and distribution entropy from the frozen
 * policy; those numbers are bitwise-identical to what the gradient tape later
 * computes for the same parameters, so freshly-snapshot importance ratios are
 * exactly 1. Rewards are verified outcomes; advantages are the group-centered,
 * population-std-scaled rewards shared by every token of a trajectory.
 */

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "tasks.hpp"

namespace egspo {

struct Trajectory {
  TokenSeq prompt;
  TokenSeq response;                // ends at EOS or the length cap
  std::vector<double> old_logprob;  // one per response token
  std::vector<double> entropy;      // one per response token, nats
  Reward reward{-1};
  double advantage = 0.0;           // same value at every token

  size_t len() const { return response.size(); }
};

struct RolloutGroup {
  size_t prompt_id = 0;
  std::vector<Trajectory> trajectories;
};

// ============================================================================
// Generation
// ============================================================================

/// Longest response the context window allows for this prompt.
inline size_t response_cap(const PolicyConfig& cfg, const TokenSeq& prompt,
                           size_t max_len) {
  if (prompt.size() >= static_cast<size_t>(cfg.context_len)) {
    throw InvalidInput("prompt fills the whole context window");
  }
  return std::min(max_len, static_cast<size_t>(cfg.context_len) - prompt.size());
}

/// One sampled response; rng should be a per-trajectory derived stream.
inline Trajectory sample_trajectory(const Policy& pol, const TokenSeq& prompt,
                                    double temperature, size_t max_len, Rng& rng) {
  Trajectory traj;
  traj.prompt = prompt;
  const size_t cap = response_cap(pol.config(), prompt, max_len);
  TokenSeq ctx = prompt;
  for (size_t t = 0; t < cap; ++t) {
    const TokenDist dist = pol.forward_dist(ctx);
    const TokenId y = sample_next(dist, temperature, rng);
    traj.response.push_back(y);
    traj.old_logprob.push_back(dist.log_prob(y));
    traj.entropy.push_back(token_entropy(dist));
    ctx.push_back(y);
    if (y == pol.config().vocab.eos) break;
  }
  return traj;
}

/**
 * G independent samples for one prompt. Each trajectory draws from its own
 * stream derived from (seed, round, prompt_id, g), so results do not depend
 * on scheduling order.
 */
inline RolloutGroup generate_group(const Policy& pol, const TokenSeq& prompt,
                                   size_t prompt_id, int g_count, double temperature,
                                   size_t max_len, uint64_t seed, uint64_t round = 0) {
  if (g_count < 2) throw InvalidInput("group size must be >= 2");
  if (max_len < 1) throw InvalidInput("max_len must be >= 1");
  RolloutGroup group;
  group.prompt_id = prompt_id;
  group.trajectories.reserve(static_cast<size_t>(g_count));
  for (int g = 0; g < g_count; ++g) {
    Rng rng = derive_stream(seed, "rollout", round, static_cast<uint64_t>(prompt_id),
                            static_cast<uint64_t>(g));
    group.trajectories.push_back(
        sample_trajectory(pol, prompt, temperature, max_len, rng));
  }
  return group;
}

// ============================================================================
// GRPO advantages
// ============================================================================

/// A_i = (r_i - mean) / (population std + eps).
inline std::vector<double> group_advantage(const std::vector<Reward>& rewards,
                                           double eps) {
  if (rewards.size() < 2) throw InvalidInput("advantage needs a group of >= 2");
  if (eps < 0.0) throw InvalidInput("eps must be nonnegative");
  const double n = static_cast<double>(rewards.size());
  double mu = 0.0;
  for (const Reward& r : rewards) mu += r.value;
  mu /= n;
  double var = 0.0;
  for (const Reward& r : rewards) {
    const double d = r.value - mu;
    var += d * d;
  }
  const double sigma = std::sqrt(var / n);
  std::vector<double> adv(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i) {
    adv[i] = (rewards[i].value - mu) / (sigma + eps);
  }
  return adv;
}

/// Scores every trajectory with the verifier and fills in advantages.
inline void score_group(RolloutGroup& group, const TaskInstance& inst, double adv_eps) {
  std::vector<Reward> rewards;
  rewards.reserve(group.trajectories.size());
  for (Trajectory& traj : group.trajectories) {
    traj.reward = verify(inst, traj.response);
    rewards.push_back(traj.reward);
  }
  const std::vector<double> adv = group_advantage(rewards, adv_eps);
  for (size_t i = 0; i < adv.size(); ++i) group.trajectories[i].advantage = adv[i];
}

// ============================================================================
// Greedy probes
// ============================================================================

inline TokenSeq greedy_response(const Policy& pol, const TokenSeq& prompt,
                                size_t max_len) {
  TokenSeq ctx = prompt;
  TokenSeq response;
  const size_t cap = response_cap(pol.config(), prompt, max_len);
  for (size_t t = 0; t < cap; ++t) {
    const TokenId y = greedy_token(pol.forward_dist(ctx));
    response.push_back(y);
    ctx.push_back(y);
    if (y == pol.config().vocab.eos) break;
  }
  return response;
}

/// Exact-match accuracy of greedy decoding over a held-out set.
inline double exact_match_accuracy(const Policy& pol,
                                   const std::vector<TaskInstance>& instances,
                                   size_t max_len) {
  if (instances.empty()) throw InvalidInput("empty evaluation set");
  size_t hits = 0;
  for (const TaskInstance& inst : instances) {
    if (verify(inst, greedy_response(pol, inst.prompt, max_len)).value == 1) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(instances.size());
}

}  // namespace egspo
