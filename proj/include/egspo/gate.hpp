#pragma once

/**
 * Entropy-gated token loss.
 *
 * Per trajectory, the top ceil(rho * T) response tokens by sampling-time
 * entropy take the full clipped PPO loss; the rest take the same loss scaled
 * by phi(p) = p(1-p), where p is the frozen policy's probability of the
 * sampled token and the weight is a stop-gradient constant. Both branches
 * keep the advantage, so a negative-advantage token can never have its
 * probability pushed up, only less-strongly down (or frozen by the clip).
 *
 * Variants:
 *   FULL_EGSPO        entropy routing, phi-attenuated low branch
 *   UNIFORM_PPO       no gate, plain PPO on every token
 *   NO_ADV_LOW_BRANCH low branch drops the advantage for phi * (-log-prob),
 *                     the ablation that re-reinforces confident mistakes
 *   RANDOM_SELECTION  routing by uniform random positions instead of entropy
 */

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"
#include "rollout.hpp"
#include "tape.hpp"

namespace egspo {

// ============================================================================
// Configuration
// ============================================================================

enum class GateVariant { FULL_EGSPO, UNIFORM_PPO, NO_ADV_LOW_BRANCH, RANDOM_SELECTION };

inline const char* variant_name(GateVariant v) {
  switch (v) {
    case GateVariant::FULL_EGSPO: return "FULL_EGSPO";
    case GateVariant::UNIFORM_PPO: return "UNIFORM_PPO";
    case GateVariant::NO_ADV_LOW_BRANCH: return "NO_ADV_LOW_BRANCH";
    case GateVariant::RANDOM_SELECTION: return "RANDOM_SELECTION";
  }
  throw ConfigError("unknown gate variant");
}

inline GateVariant variant_from_name(const std::string& s) {
  if (s == "FULL_EGSPO") return GateVariant::FULL_EGSPO;
  if (s == "UNIFORM_PPO") return GateVariant::UNIFORM_PPO;
  if (s == "NO_ADV_LOW_BRANCH") return GateVariant::NO_ADV_LOW_BRANCH;
  if (s == "RANDOM_SELECTION") return GateVariant::RANDOM_SELECTION;
  throw ConfigError("unknown gate variant: " + s);
}

struct GateConfig {
  double rho = 0.10;
  double clip_eps = 0.2;
  GateVariant variant = GateVariant::FULL_EGSPO;
  // Open interpretation hook: weight low tokens by the live policy's p
  // instead of the snapshot's. Either way the weight is a stop-gradient.
  bool phi_from_live_policy = false;

  void validate() const {
    if (!(rho > 0.0) || !(rho < 1.0)) throw ConfigError("rho must lie in (0, 1)");
    if (!(clip_eps > 0.0) || !(clip_eps < 1.0)) {
      throw ConfigError("clip_eps must lie in (0, 1)");
    }
  }
};

// ============================================================================
// phi and PPO scalar forms
// ============================================================================

/// p(1-p): zero at certainty, maximum 0.25 at p = 0.5.
inline double phi(double p) {
  if (!(p >= 0.0) || !(p <= 1.0)) throw InvalidInput("phi argument outside [0, 1]");
  return p * (1.0 - p);
}

/// -min(ratio * A, clip(ratio, 1-eps, 1+eps) * A)
inline double ppo_token_loss(double ratio, double advantage, double clip_eps) {
  if (!std::isfinite(ratio) || !(ratio > 0.0)) {
    throw InvalidInput("importance ratio must be finite and positive");
  }
  const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
  return -std::min(ratio * advantage, clipped * advantage);
}

// ============================================================================
// Routing
// ============================================================================

struct GateDecision {
  std::vector<uint8_t> high;       // 1 = full-PPO branch
  double threshold = 0.0;          // smallest HIGH entropy
  std::vector<double> phi_weight;  // 1 for HIGH, phi(p_old) for LOW

  size_t n_high() const {
    return static_cast<size_t>(std::count(high.begin(), high.end(), uint8_t{1}));
  }
};

/// ceil(rho * T), at least 1 for any rho > 0, never more than T.
inline size_t high_count(double rho, size_t n_tokens) {
  const size_t k = static_cast<size_t>(
      std::ceil(rho * static_cast<double>(n_tokens)));
  return std::max<size_t>(1, std::min(k, n_tokens));
}

/**
 * Routes one trajectory's tokens. Entropy variants take the top-k entropies
 * (ties broken toward earlier positions); RANDOM_SELECTION takes the first k
 * of a seeded permutation, which keeps the HIGH set nested as rho grows. The
 * rng is consumed only by RANDOM_SELECTION.
 */
inline GateDecision route_tokens(const std::vector<double>& entropies,
                                 const std::vector<double>& old_logprobs,
                                 const GateConfig& cfg, Rng& rng) {
  cfg.validate();
  const size_t n = entropies.size();
  if (n == 0) throw InvalidInput("cannot route an empty token sequence");
  if (old_logprobs.size() != n) throw InvalidInput("entropy/logprob length mismatch");

  const size_t k = high_count(cfg.rho, n);
  GateDecision d;
  d.high.assign(n, 0);

  if (cfg.variant == GateVariant::RANDOM_SELECTION) {
    const std::vector<size_t> perm = rng.permutation(n);
    for (size_t i = 0; i < k; ++i) d.high[perm[i]] = 1;
  } else {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      if (entropies[a] != entropies[b]) return entropies[a] > entropies[b];
      return a < b;
    });
    for (size_t i = 0; i < k; ++i) d.high[order[i]] = 1;
  }

  d.threshold = std::numeric_limits<double>::infinity();
  for (size_t t = 0; t < n; ++t) {
    if (d.high[t]) d.threshold = std::min(d.threshold, entropies[t]);
  }
  d.phi_weight.resize(n);
  for (size_t t = 0; t < n; ++t) {
    d.phi_weight[t] = d.high[t] ? 1.0 : phi(std::exp(old_logprobs[t]));
  }
  return d;
}

// ============================================================================
// Token loss
// ============================================================================

/**
 * Loss of one token given its branch. new_logprob participates only in the
 * NO_ADV_LOW_BRANCH low branch; everywhere else the ratio carries it.
 */
inline double token_loss(bool high, double ratio, double advantage, double p_old,
                         double new_logprob, const GateConfig& cfg) {
  if (!(p_old > 0.0) || !(p_old < 1.0)) throw InvalidInput("p_old must lie in (0, 1)");
  switch (cfg.variant) {
    case GateVariant::UNIFORM_PPO:
      return ppo_token_loss(ratio, advantage, cfg.clip_eps);
    case GateVariant::FULL_EGSPO:
    case GateVariant::RANDOM_SELECTION: {
      const double base = ppo_token_loss(ratio, advantage, cfg.clip_eps);
      return high ? base : phi(p_old) * base;
    }
    case GateVariant::NO_ADV_LOW_BRANCH: {
      if (high) return ppo_token_loss(ratio, advantage, cfg.clip_eps);
      return phi(p_old) * (-new_logprob);
    }
  }
  throw ConfigError("unknown gate variant");
}

/**
 * d token_loss / d new_logprob in closed form, mirroring the tape exactly:
 * clip boundaries count as the pass-through side. Multiply by (1 - p_new)
 * for the derivative with respect to the sampled token's logit.
 */
inline double token_loss_dlp(bool high, double ratio, double advantage,
                             double p_old, const GateConfig& cfg) {
  const double eps = cfg.clip_eps;
  double g;
  if (advantage >= 0.0) {
    g = ratio <= 1.0 + eps ? -advantage * ratio : 0.0;
  } else {
    g = ratio >= 1.0 - eps ? -advantage * ratio : 0.0;
  }
  switch (cfg.variant) {
    case GateVariant::UNIFORM_PPO:
      return g;
    case GateVariant::FULL_EGSPO:
    case GateVariant::RANDOM_SELECTION:
      return high ? g : phi(p_old) * g;
    case GateVariant::NO_ADV_LOW_BRANCH:
      return high ? g : -phi(p_old);
  }
  throw ConfigError("unknown gate variant");
}

// ============================================================================
// Trajectory loss
// ============================================================================

namespace detail {

inline void check_gated_shapes(const Trajectory& traj, const GateDecision& d,
                               size_t n_new_lp) {
  const size_t n = traj.len();
  if (n == 0) throw InvalidInput("empty trajectory");
  if (d.high.size() != n || d.phi_weight.size() != n || n_new_lp != n) {
    throw InvalidInput("decision/logprob length mismatch with trajectory");
  }
}

}  // namespace detail

/// Flat mean of token losses over all response tokens (both branches pooled).
inline double entropy_gated_loss(const Trajectory& traj, const GateDecision& d,
                                 const std::vector<double>& new_logprobs,
                                 const GateConfig& cfg) {
  detail::check_gated_shapes(traj, d, new_logprobs.size());
  double total = 0.0;
  for (size_t t = 0; t < traj.len(); ++t) {
    const double ratio = std::exp(new_logprobs[t] - traj.old_logprob[t]);
    const double p_old = std::exp(traj.old_logprob[t]);
    const double weight_p =
        cfg.phi_from_live_policy ? std::exp(new_logprobs[t]) : p_old;
    const bool high = d.high[t] != 0;
    double l;
    if (cfg.variant == GateVariant::FULL_EGSPO ||
        cfg.variant == GateVariant::RANDOM_SELECTION) {
      const double base = ppo_token_loss(ratio, traj.advantage, cfg.clip_eps);
      l = high ? base : phi(weight_p) * base;
    } else if (cfg.variant == GateVariant::NO_ADV_LOW_BRANCH && !high) {
      l = phi(weight_p) * (-new_logprobs[t]);
    } else {
      l = ppo_token_loss(ratio, traj.advantage, cfg.clip_eps);
    }
    if (!std::isfinite(l)) throw TrainingAbort("non-finite token loss");
    total += l;
  }
  return total / static_cast<double>(traj.len());
}

/**
 * Tape twin of entropy_gated_loss; new_lp_refs must hold the live policy's
 * log-probs of the response tokens. phi weights and old log-probs enter as
 * constants, so no gradient flows through them.
 */
inline Ref entropy_gated_loss_tape(Tape& tape, const Trajectory& traj,
                                   const GateDecision& d,
                                   const std::vector<Ref>& new_lp_refs,
                                   const GateConfig& cfg) {
  detail::check_gated_shapes(traj, d, new_lp_refs.size());
  const size_t n = traj.len();
  std::vector<Ref> terms(n);
  std::vector<double> term_vals(n);
  for (size_t t = 0; t < n; ++t) {
    const double old_lp = traj.old_logprob[t];
    const double new_lp = tape.value(new_lp_refs[t]);
    const double weight_p = std::exp(cfg.phi_from_live_policy ? new_lp : old_lp);
    const bool high = d.high[t] != 0;

    Ref loss_t;
    if (cfg.variant == GateVariant::NO_ADV_LOW_BRANCH && !high) {
      loss_t = tape.scale(tape.neg(new_lp_refs[t]), phi(weight_p));
    } else {
      Ref ratio = tape.exp(tape.shift(new_lp_refs[t], -old_lp));
      Ref lhs = tape.scale(ratio, traj.advantage);
      Ref rhs = tape.scale(tape.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps),
                           traj.advantage);
      Ref ppo = tape.neg(tape.min2(lhs, rhs));
      const bool attenuate = !high && (cfg.variant == GateVariant::FULL_EGSPO ||
                                       cfg.variant == GateVariant::RANDOM_SELECTION);
      loss_t = attenuate ? tape.scale(ppo, phi(weight_p)) : ppo;
    }
    if (!std::isfinite(tape.value(loss_t))) throw TrainingAbort("non-finite token loss");
    terms[t] = loss_t;
    term_vals[t] = tape.value(loss_t);
  }
  Ref total = tape.sum(terms.data(), term_vals.data(), static_cast<uint32_t>(n));
  return tape.scale(total, 1.0 / static_cast<double>(n));
}

}  // namespace egspo
