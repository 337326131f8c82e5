#pragma once

/**
 * Three-stage pipeline orchestration.
 *
 * Stage 1 fits the policy to expert demonstrations. Each subsequent round
 * alternates Stage 2 (sample G responses per prompt at temperature 1 and
 * score them against the verifier) with Stage 3 (joint update: expert-batch
 * cross-entropy plus the entropy-gated clipped-ratio loss over the round's
 * trajectories, several inner epochs against one frozen snapshot).
 *
 * Snapshot discipline: per-token old log-probs, entropies, routing and phi
 * weights are all fixed when the round's rollouts are generated and stay
 * constant across inner epochs; only the live log-probs move.
 *
 * The canonical run log (runlog.jsonl) is a pure function of (config, seed):
 * wall-clock numbers go to a timings.jsonl sidecar so two identical runs
 * produce byte-identical canonical logs.
 */

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <vector>

#include "audit.hpp"
#include "common.hpp"
#include "config.hpp"
#include "gate.hpp"
#include "persistence.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "rollout.hpp"
#include "sft.hpp"
#include "tasks.hpp"

namespace egspo {

// ============================================================================
// Dataset assembly
// ============================================================================

struct TrainData {
  PoolSplit pools;                    // expert demonstrations vs rollout prompts
  std::vector<TaskInstance> holdout;  // fixed probe set, disjoint where possible
};

/**
 * Holdout instances come from their own derived stream and avoid operand
 * pairs present in the training pool. When the digit range is too small to
 * supply enough unseen pairs, the remainder is filled with overlapping
 * instances rather than failing.
 */
inline std::vector<TaskInstance> make_holdout(const DataConfig& d,
                                              const std::vector<TaskInstance>& train) {
  std::set<TokenSeq> seen;
  for (const TaskInstance& inst : train) seen.insert(inst.prompt);

  const size_t want = static_cast<size_t>(d.holdout);
  const auto fresh = generate_instances(derive_seed(d.dataset_seed, "holdout"),
                                        static_cast<int>(want * 4),
                                        d.min_digits, d.max_digits);
  std::vector<TaskInstance> holdout;
  for (const TaskInstance& inst : fresh) {
    if (holdout.size() == want) break;
    if (seen.insert(inst.prompt).second) holdout.push_back(inst);
  }
  for (size_t i = 0; holdout.size() < want; ++i) holdout.push_back(fresh[i % fresh.size()]);
  return holdout;
}

inline TrainData make_train_data(const DataConfig& d, double expert_fraction) {
  const auto train = generate_instances(d.dataset_seed, d.n_instances,
                                        d.min_digits, d.max_digits);
  TrainData td;
  td.holdout = make_holdout(d, train);
  td.pools = split_expert_pool(train, expert_fraction);
  return td;
}

// ============================================================================
// Loss-term taxonomy
// ============================================================================

/**
 * One entry per loss family that contributed to a step, tagged with the data
 * context it was evaluated on. Built inside the loss assembly itself, so the
 * run log is evidence of which losses touched which data.
 */
struct LossTerm {
  std::string name;
  std::string context;  // "expert_demonstration" or "rollout"
  int64_t n = 0;        // sequences for sample-level terms, tokens otherwise
  bool carries_advantage = false;
};

inline ordered_json loss_terms_json(const std::vector<LossTerm>& terms) {
  ordered_json arr = ordered_json::array();
  for (const LossTerm& t : terms) {
    arr.push_back({{"name", t.name},
                   {"context", t.context},
                   {"n", t.n},
                   {"carries_advantage", t.carries_advantage}});
  }
  return arr;
}

// ============================================================================
// Stage-3 joint update
// ============================================================================

/// Identification stamped onto every canonical log record.
struct RecordMeta {
  int64_t step = 0;
  std::string config_hash;
  uint64_t seed = 0;
};

struct StepStage3Result {
  ordered_json record;   // deterministic; no wall-clock content
  double total_loss = 0.0;  // last inner epoch
};

namespace detail {

/// Loss view of a trajectory, optionally dropping the terminal EOS position.
inline Trajectory loss_view(const Trajectory& t, bool include_eos, TokenId eos) {
  Trajectory v = t;
  if (!include_eos && v.response.size() > 1 && v.response.back() == eos) {
    v.response.pop_back();
    v.old_logprob.pop_back();
    v.entropy.pop_back();
  }
  return v;
}

inline ordered_json opt_fraction(int64_t num, int64_t den) {
  if (den == 0) return nullptr;
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace detail

/**
 * One joint update: total loss = flat-mean cross-entropy over the expert
 * batch plus mean over trajectories of the gated loss, optimized for
 * inner_epochs Adam steps against the frozen rollout snapshot. On a
 * non-finite loss or diverged update the parameters and optimizer roll back
 * to the last finite state before the abort propagates.
 */
inline StepStage3Result step_stage3(Policy& pol, AdamState& opt,
                                    const std::vector<TaskInstance>& expert_batch,
                                    const std::vector<RolloutGroup>& groups,
                                    const TrainConfig& cfg, int64_t round,
                                    const RecordMeta& meta) {
  cfg.validate();
  if (cfg.stage3.kl_coeff != 0.0) {
    throw ConfigError("kl_coeff is a reserved hook; only 0 is supported");
  }
  if (groups.empty()) throw InvalidInput("stage 3 needs at least one rollout group");

  // Frozen per-round state: loss views, routing decisions, phi weights.
  std::vector<Trajectory> views;
  for (const RolloutGroup& g : groups) {
    for (const Trajectory& t : g.trajectories) {
      if (!std::isfinite(t.advantage)) {
        throw InvalidInput("rollout group is missing scored advantages");
      }
      views.push_back(detail::loss_view(t, cfg.stage2.include_eos_token,
                                        pol.config().vocab.eos));
    }
  }
  const size_t n_traj = views.size();
  std::vector<GateDecision> decisions(n_traj);
  for (size_t i = 0; i < n_traj; ++i) {
    Rng rng = derive_stream(cfg.seed, "route", static_cast<uint64_t>(round), i);
    decisions[i] = route_tokens(views[i].entropy, views[i].old_logprob, cfg.gate, rng);
  }

  // Routing statistics and the snapshot-time direction audit (ratios all 1).
  int64_t n_tokens = 0, n_high = 0;
  double sum_h_high = 0.0, sum_h_low = 0.0, sum_phi_low = 0.0, sum_reward = 0.0;
  DirectionAudit direction;
  for (size_t i = 0; i < n_traj; ++i) {
    const Trajectory& v = views[i];
    const GateDecision& d = decisions[i];
    n_tokens += static_cast<int64_t>(v.len());
    for (size_t t = 0; t < v.len(); ++t) {
      if (d.high[t]) {
        ++n_high;
        sum_h_high += v.entropy[t];
      } else {
        sum_h_low += v.entropy[t];
        sum_phi_low += d.phi_weight[t];
      }
    }
    accumulate_direction(direction, v, d, v.old_logprob, cfg.gate);
    sum_reward += v.reward.value;
  }
  const int64_t n_low = n_tokens - n_high;

  SftBatch sft_batch;
  if (!expert_batch.empty()) sft_batch = SftBatch::from_instances(expert_batch);
  const size_t sft_tokens = sft_batch.masked_tokens();

  std::vector<LossTerm> terms;
  if (!expert_batch.empty()) {
    terms.push_back({"sft_cross_entropy", "expert_demonstration",
                     static_cast<int64_t>(expert_batch.size()), false});
  }
  switch (cfg.gate.variant) {
    case GateVariant::UNIFORM_PPO:
      terms.push_back({"ppo_clip", "rollout", n_tokens, true});
      break;
    case GateVariant::FULL_EGSPO:
    case GateVariant::RANDOM_SELECTION:
      terms.push_back({"ppo_clip", "rollout", n_high, true});
      if (n_low > 0) terms.push_back({"ppo_clip_phi_attenuated", "rollout", n_low, true});
      break;
    case GateVariant::NO_ADV_LOW_BRANCH:
      terms.push_back({"ppo_clip", "rollout", n_high, true});
      if (n_low > 0) terms.push_back({"phi_likelihood", "rollout", n_low, false});
      break;
  }

  // Inner epochs: one optimizer update each against the same snapshot.
  const std::vector<double> last_params = pol.params();
  const AdamState last_opt = opt;
  std::vector<double> grad(pol.param_count(), 0.0);
  Tape tape(pol.params());
  ordered_json inner = ordered_json::array();
  double total_loss = 0.0;

  auto rollback = [&]() {
    pol.params() = last_params;
    opt = last_opt;
  };

  for (int epoch = 0; epoch < cfg.stage3.inner_epochs; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);

    double sft_value = 0.0;
    if (sft_tokens > 0) {
      const double inv_tokens = 1.0 / static_cast<double>(sft_tokens);
      double nll_sum = 0.0;
      for (const SftItem& item : sft_batch.items) {
        tape.reset(pol.params());
        auto [nll, n] = sft_item_nll_tape(tape, pol, item);
        (void)n;
        nll_sum += tape.value(nll);
        tape.backward(nll, grad, inv_tokens);
      }
      sft_value = nll_sum * inv_tokens;
    }

    double gated_sum = 0.0;
    const double inv_traj = 1.0 / static_cast<double>(n_traj);
    for (size_t i = 0; i < n_traj; ++i) {
      const Trajectory& v = views[i];
      TokenSeq tokens = v.prompt;
      tokens.insert(tokens.end(), v.response.begin(), v.response.end());
      tape.reset(pol.params());
      const std::vector<Ref> lp_refs =
          pol.seq_logprobs_tape(tape, tokens, v.prompt.size());
      const Ref loss = entropy_gated_loss_tape(tape, v, decisions[i], lp_refs, cfg.gate);
      gated_sum += tape.value(loss);
      tape.backward(loss, grad, inv_traj);
    }
    const double gated_value = gated_sum * inv_traj;

    total_loss = sft_value + gated_value;
    if (!std::isfinite(total_loss)) {
      rollback();
      throw TrainingAbort("stage 3 loss diverged");
    }
    inner.push_back({{"sft_loss", sft_tokens > 0 ? ordered_json(sft_value) : nullptr},
                     {"gated_loss", gated_value},
                     {"total_loss", total_loss}});
    try {
      adam_update(pol.params(), opt, grad, cfg.stage3.lr);
    } catch (const std::exception&) {
      rollback();
      throw TrainingAbort("stage 3 update diverged");
    }
  }

  ordered_json rec;
  rec["step"] = meta.step;
  rec["config_hash"] = meta.config_hash;
  rec["seed"] = meta.seed;
  rec["stage"] = 3;
  rec["round"] = round;
  rec["variant"] = variant_name(cfg.gate.variant);
  rec["rho"] = cfg.gate.rho;
  rec["n_expert"] = expert_batch.size();
  rec["n_rollout_traj"] = n_traj;
  rec["n_rollout_tokens"] = n_tokens;
  rec["n_high"] = n_high;
  rec["frac_high"] =
      static_cast<double>(n_high) / static_cast<double>(n_tokens);
  rec["mean_entropy_high"] =
      n_high > 0 ? ordered_json(sum_h_high / static_cast<double>(n_high)) : nullptr;
  rec["mean_entropy_low"] =
      n_low > 0 ? ordered_json(sum_h_low / static_cast<double>(n_low)) : nullptr;
  rec["mean_phi_low"] =
      n_low > 0 ? ordered_json(sum_phi_low / static_cast<double>(n_low)) : nullptr;
  rec["mean_reward"] = sum_reward / static_cast<double>(n_traj);
  rec["direction"] = {
      {"n_low_neg_adv", direction.n_low_tokens_neg_adv},
      {"n_correct", direction.n_correct_direction},
      {"fraction", detail::opt_fraction(direction.n_correct_direction,
                                        direction.n_low_tokens_neg_adv)}};
  rec["inner"] = inner;
  rec["loss_terms"] = loss_terms_json(terms);

  StepStage3Result out;
  out.record = std::move(rec);
  out.total_loss = total_loss;
  return out;
}

// ============================================================================
// Run directory layout
// ============================================================================

struct TrainPaths {
  std::filesystem::path dir;
  std::filesystem::path config;      // config.json (resolved, with defaults)
  std::filesystem::path runlog;      // canonical runlog.jsonl
  std::filesystem::path timings;     // timings.jsonl sidecar
  std::filesystem::path rollouts;    // rollouts.jsonl trajectory dump
  std::filesystem::path checkpoint;  // checkpoint.bin, overwritten per round
  std::filesystem::path summary;     // summary.json

  static TrainPaths in(const std::filesystem::path& dir) {
    TrainPaths p;
    p.dir = dir;
    p.config = dir / "config.json";
    p.runlog = dir / "runlog.jsonl";
    p.timings = dir / "timings.jsonl";
    p.rollouts = dir / "rollouts.jsonl";
    p.checkpoint = dir / "checkpoint.bin";
    p.summary = dir / "summary.json";
    return p;
  }
};

// ============================================================================
// Trainer
// ============================================================================

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::filesystem::path out_dir)
      : cfg_(std::move(cfg)),
        paths_(TrainPaths::in(out_dir)),
        pol_(Policy::init(cfg_.policy, derive_seed(cfg_.seed, "policy-init"))),
        opt_(AdamState::init(pol_.param_count())),
        data_(make_train_data(cfg_.data, cfg_.stage3.expert_fraction)),
        hash_hex_(hash_hex(config_hash(cfg_))) {
    cfg_.validate();
    if (cfg_.stage3.kl_coeff != 0.0) {
      throw ConfigError("kl_coeff is a reserved hook; only 0 is supported");
    }
    if (static_cast<size_t>(cfg_.stage3.prompts_per_round) > data_.pools.rollout.size()) {
      throw ConfigError("prompts_per_round exceeds the rollout prompt pool");
    }
  }

  /**
   * Fresh full run: Stage 1, then every round. Returns final holdout
   * accuracy. stop_after_rounds (when >= 0) halts once that many rounds are
   * complete, leaving a valid checkpoint to resume from; the summary is only
   * written by runs that reach the configured round count.
   */
  double run(int64_t stop_after_rounds = -1) {
    std::filesystem::create_directories(paths_.dir);
    for (const auto& p : {paths_.runlog, paths_.timings, paths_.rollouts}) {
      std::ofstream(p, std::ios::trunc);
    }
    write_config(paths_.config, cfg_);
    run_stage1_block();
    return run_rounds(0, stop_after_rounds);
  }

  /// Continues a checkpointed run in the same directory, appending to its logs.
  double resume() {
    const Checkpoint ck = load_checkpoint(paths_.checkpoint);
    if (hash_hex(ck.config_hash) != hash_hex_) {
      throw ConfigError("checkpoint belongs to a different configuration");
    }
    pol_.params() = ck.params;
    opt_ = ck.opt;
    step_ = ck.step_counter;
    return run_rounds(ck.rounds_done, -1);
  }

  const Policy& policy() const { return pol_; }
  const TrainData& data() const { return data_; }
  const TrainPaths& paths() const { return paths_; }
  int64_t steps() const { return step_; }

 private:
  using clock = std::chrono::steady_clock;

  static double ms_since(clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  }

  RecordMeta meta() const { return {step_, hash_hex_, cfg_.seed}; }

  void write_checkpoint(int32_t stage, int64_t rounds_done) {
    Checkpoint ck;
    ck.policy_cfg = cfg_.policy;
    ck.params = pol_.params();
    ck.opt = opt_;
    ck.master_seed = cfg_.seed;
    ck.config_hash = config_hash(cfg_);
    ck.stage = stage;
    ck.rounds_done = rounds_done;
    ck.step_counter = step_;
    save_checkpoint(paths_.checkpoint, ck);
  }

  void run_stage1_block() {
    const auto records = run_stage1(pol_, opt_, data_.pools.expert, data_.holdout,
                                    cfg_.stage1, cfg_.seed,
                                    static_cast<size_t>(cfg_.stage2.max_len));
    for (const Stage1Record& r : records) {
      ordered_json rec;
      rec["step"] = step_;
      rec["config_hash"] = hash_hex_;
      rec["seed"] = cfg_.seed;
      rec["stage"] = 1;
      rec["epoch"] = r.epoch;
      rec["loss"] = r.loss;
      rec["holdout_acc"] = r.holdout_acc;
      append_jsonl(paths_.runlog, rec);
      append_jsonl(paths_.timings,
                   ordered_json{{"step", step_}, {"stage", 1}, {"wall_ms", r.wall_ms}});
      ++step_;
    }
    write_checkpoint(1, 0);
  }

  double run_rounds(int64_t first_round, int64_t stop_after) {
    const int64_t limit =
        stop_after < 0 ? cfg_.stage3.rounds
                       : std::min<int64_t>(cfg_.stage3.rounds, stop_after);
    double final_acc = -1.0;
    for (int64_t round = first_round; round < limit; ++round) {
      // Stage 2: sample and score one group per selected prompt.
      const auto t_roll = clock::now();
      Rng prompt_rng = derive_stream(cfg_.seed, "prompts", static_cast<uint64_t>(round));
      const std::vector<size_t> perm = prompt_rng.permutation(data_.pools.rollout.size());
      std::vector<RolloutGroup> groups;
      size_t n_rollout_traj = 0;
      for (int i = 0; i < cfg_.stage3.prompts_per_round; ++i) {
        const size_t pid = perm[static_cast<size_t>(i)];
        const TaskInstance& inst = data_.pools.rollout[pid];
        RolloutGroup g = generate_group(pol_, inst.prompt, pid, cfg_.stage2.group_size,
                                        cfg_.stage2.temperature,
                                        static_cast<size_t>(cfg_.stage2.max_len),
                                        cfg_.seed, static_cast<uint64_t>(round));
        score_group(g, inst, cfg_.adv_eps);
        n_rollout_traj += g.trajectories.size();
        groups.push_back(std::move(g));
      }
      const double rollout_ms = ms_since(t_roll);
      for (const RolloutGroup& g : groups) {
        for (const Trajectory& t : g.trajectories) {
          ordered_json rec = trajectory_record(g.prompt_id, t);
          rec["round"] = round;
          append_jsonl(paths_.rollouts, rec);
        }
      }

      // Expert batch sized so expert/(expert + rollout) matches the mixing
      // fraction to within rounding, capped by the demonstration pool.
      const double f = cfg_.stage3.expert_fraction;
      size_t n_expert = static_cast<size_t>(
          std::llround(f / (1.0 - f) * static_cast<double>(n_rollout_traj)));
      n_expert = std::min(n_expert, data_.pools.expert.size());
      Rng expert_rng =
          derive_stream(cfg_.seed, "expert-batch", static_cast<uint64_t>(round));
      const std::vector<size_t> eperm = expert_rng.permutation(data_.pools.expert.size());
      std::vector<TaskInstance> expert_batch;
      for (size_t i = 0; i < n_expert; ++i) {
        expert_batch.push_back(data_.pools.expert[eperm[i]]);
      }

      // Stage 3 joint update.
      const auto t_upd = clock::now();
      StepStage3Result step = step_stage3(pol_, opt_, expert_batch, groups, cfg_,
                                          round, meta());
      const double update_ms = ms_since(t_upd);

      const auto t_probe = clock::now();
      final_acc = exact_match_accuracy(pol_, data_.holdout,
                                       static_cast<size_t>(cfg_.stage2.max_len));
      const double probe_ms = ms_since(t_probe);

      step.record["holdout_acc"] = final_acc;
      append_jsonl(paths_.runlog, step.record);
      append_jsonl(paths_.timings, ordered_json{{"step", step_},
                                                {"stage", 3},
                                                {"rollout_ms", rollout_ms},
                                                {"update_ms", update_ms},
                                                {"probe_ms", probe_ms}});
      ++step_;
      write_checkpoint(3, round + 1);
    }
    if (limit < cfg_.stage3.rounds) return final_acc;  // interrupted on purpose
    if (final_acc < 0.0) {
      final_acc = exact_match_accuracy(pol_, data_.holdout,
                                       static_cast<size_t>(cfg_.stage2.max_len));
    }
    write_summary(final_acc);
    return final_acc;
  }

  void write_summary(double final_acc) {
    ordered_json s;
    s["config_hash"] = hash_hex_;
    s["seed"] = cfg_.seed;
    s["variant"] = variant_name(cfg_.gate.variant);
    s["rho"] = cfg_.gate.rho;
    s["rounds"] = cfg_.stage3.rounds;
    s["steps"] = step_;
    s["final_holdout_acc"] = final_acc;
    std::ofstream out(paths_.summary, std::ios::trunc);
    if (!out) throw IoError("cannot write summary: " + paths_.summary.string());
    out << s.dump(2) << '\n';
  }

  TrainConfig cfg_;
  TrainPaths paths_;
  Policy pol_;
  AdamState opt_;
  TrainData data_;
  std::string hash_hex_;
  int64_t step_ = 0;
};

}  // namespace egspo
