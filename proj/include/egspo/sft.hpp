#pragma once

/**
 * Stage 1: supervised warm-up on expert demonstrations.
 *
 * Loss is teacher-forced cross-entropy restricted to response positions; the
 * prompt never contributes a term. Batches are one flat mean over every
 * masked token they contain.
 */

#include <chrono>
#include <cmath>
#include <vector>

#include "common.hpp"
#include "config.hpp"
#include "policy.hpp"
#include "rollout.hpp"
#include "rng.hpp"
#include "tape.hpp"
#include "tasks.hpp"

namespace egspo {

// ============================================================================
// Batches
// ============================================================================

struct SftItem {
  TokenSeq tokens;         // prompt followed by expert response
  size_t first_response;   // mask start: loss covers [first_response, len)
};

struct SftBatch {
  std::vector<SftItem> items;

  /// Demonstrations only; an instance with a stripped response is rejected.
  static SftBatch from_instances(const std::vector<TaskInstance>& instances) {
    SftBatch batch;
    for (const TaskInstance& inst : instances) {
      if (inst.expert_response.empty()) {
        throw InvalidInput("instance without expert demonstration in SFT batch");
      }
      SftItem item;
      item.tokens = inst.prompt;
      item.tokens.insert(item.tokens.end(), inst.expert_response.begin(),
                         inst.expert_response.end());
      item.first_response = inst.prompt.size();
      batch.items.push_back(std::move(item));
    }
    return batch;
  }

  size_t masked_tokens() const {
    size_t n = 0;
    for (const SftItem& it : items) n += it.tokens.size() - it.first_response;
    return n;
  }
};

// ============================================================================
// Loss
// ============================================================================

/// Sum of -log pi over one item's response positions, plus the term count.
inline std::pair<Ref, size_t> sft_item_nll_tape(Tape& tape, const Policy& pol,
                                                const SftItem& item) {
  std::vector<Ref> lps = pol.seq_logprobs_tape(tape, item.tokens, item.first_response);
  std::vector<double> vals(lps.size());
  for (size_t i = 0; i < lps.size(); ++i) vals[i] = tape.value(lps[i]);
  Ref total = tape.sum(lps.data(), vals.data(), static_cast<uint32_t>(lps.size()));
  return {tape.neg(total), lps.size()};
}

/// Flat mean of -log pi over all masked positions of the batch (no gradient).
inline double sft_loss(const Policy& pol, const SftBatch& batch) {
  if (batch.items.empty() || batch.masked_tokens() == 0) {
    throw InvalidInput("SFT batch has an empty loss mask");
  }
  double total = 0.0;
  size_t count = 0;
  for (const SftItem& item : batch.items) {
    const SeqEval ev = pol.seq_eval(item.tokens, item.first_response);
    for (double lp : ev.logprobs) total -= lp;
    count += ev.logprobs.size();
  }
  return total / static_cast<double>(count);
}

/// Tape twin of sft_loss on a single tape (used by gradient checks).
inline Ref sft_loss_tape(Tape& tape, const Policy& pol, const SftBatch& batch) {
  if (batch.items.empty() || batch.masked_tokens() == 0) {
    throw InvalidInput("SFT batch has an empty loss mask");
  }
  std::vector<Ref> sums;
  std::vector<double> vals;
  size_t count = 0;
  for (const SftItem& item : batch.items) {
    auto [nll, n] = sft_item_nll_tape(tape, pol, item);
    sums.push_back(nll);
    vals.push_back(tape.value(nll));
    count += n;
  }
  Ref total = tape.sum(sums.data(), vals.data(), static_cast<uint32_t>(sums.size()));
  return tape.scale(total, 1.0 / static_cast<double>(count));
}

// ============================================================================
// Stage-1 training loop
// ============================================================================

struct Stage1Record {
  int epoch = 0;
  double loss = 0.0;         // mean training loss across the epoch's batches
  double holdout_acc = 0.0;  // greedy exact-match on the held-out set
  double wall_ms = 0.0;
};

/**
 * Shuffled minibatch SFT with Adam. Per epoch, records the mean batch loss
 * and a greedy exact-match probe. On divergence the parameters and optimizer
 * roll back to the last finite state before the abort propagates, so callers
 * can checkpoint what remains.
 */
inline std::vector<Stage1Record> run_stage1(Policy& pol, AdamState& opt,
                                            const std::vector<TaskInstance>& experts,
                                            const std::vector<TaskInstance>& holdout,
                                            const Stage1Config& cfg, uint64_t seed,
                                            size_t probe_max_len) {
  if (experts.empty()) throw InvalidInput("stage 1 needs a non-empty expert set");
  const SftBatch all = SftBatch::from_instances(experts);

  std::vector<Stage1Record> records;
  Tape tape(pol.params());
  std::vector<double> grad(pol.param_count(), 0.0);
  std::vector<double> last_params = pol.params();
  AdamState last_opt = opt;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = derive_stream(seed, "stage1-shuffle", static_cast<uint64_t>(epoch));
    const std::vector<size_t> order = shuffle_rng.permutation(all.items.size());

    double epoch_loss = 0.0;
    size_t n_batches = 0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
      const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch));
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_nll = 0.0;
      size_t batch_tokens = 0;
      for (size_t i = at; i < end; ++i) batch_tokens += all.items[order[i]].tokens.size() -
                                                        all.items[order[i]].first_response;
      for (size_t i = at; i < end; ++i) {
        tape.reset(pol.params());
        auto [nll, n] = sft_item_nll_tape(tape, pol, all.items[order[i]]);
        batch_nll += tape.value(nll);
        (void)n;
        tape.backward(nll, grad, 1.0 / static_cast<double>(batch_tokens));
      }
      const double batch_loss = batch_nll / static_cast<double>(batch_tokens);
      if (!std::isfinite(batch_loss)) {
        pol.params() = last_params;
        opt = last_opt;
        throw TrainingAbort("stage 1 loss diverged");
      }
      try {
        adam_update(pol.params(), opt, grad, cfg.lr);
      } catch (const TrainingAbort&) {
        pol.params() = last_params;
        opt = last_opt;
        throw;
      }
      last_params = pol.params();
      last_opt = opt;
      epoch_loss += batch_loss;
      ++n_batches;
    }

    Stage1Record rec;
    rec.epoch = epoch;
    rec.loss = epoch_loss / static_cast<double>(n_batches);
    rec.holdout_acc = exact_match_accuracy(pol, holdout, probe_max_len);
    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    records.push_back(rec);
  }
  return records;
}

}  // namespace egspo
