#pragma once

/**
 * Tiny differentiable autoregressive policy.
 *
 * Architecture: token + position embeddings followed by a stack of one or two
 * pre-norm single-head causal self-attention blocks, each with a tanh MLP,
 * then an RMS-normalized output and a linear head. 64-bit floats throughout;
 * parameters live in one flat vector addressed through a block layout so
 * finite-difference checks can walk every index.
 *
 * The same forward template runs in two modes: recording onto a Tape for
 * gradients, or plain doubles for sampling and evaluation. Both modes execute
 * the identical arithmetic through kern::* so log-probs recorded at sampling
 * time are bitwise-equal to the tape's values for the same parameters, which
 * keeps freshly-snapshot importance ratios at exactly 1.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace egspo {

// ============================================================================
// Vocabulary and configuration
// ============================================================================

struct Vocab {
  int32_t size = 17;
  TokenId bos = 14;
  TokenId eos = 15;
  TokenId pad = 16;

  void validate() const {
    if (size < 4) throw ConfigError("vocab size must be at least 4");
    for (TokenId t : {bos, eos, pad}) {
      if (t < 0 || t >= size) throw ConfigError("special token id out of range");
    }
    if (bos == eos || bos == pad || eos == pad) {
      throw ConfigError("BOS, EOS, PAD must be distinct");
    }
  }
};

struct PolicyConfig {
  Vocab vocab{};
  int32_t d_model = 32;
  int32_t n_blocks = 2;
  int32_t context_len = 48;
  double norm_eps = 1e-8;

  void validate() const {
    vocab.validate();
    if (d_model < 4) throw ConfigError("d_model too small");
    if (n_blocks < 1 || n_blocks > 2) throw ConfigError("n_blocks must be 1 or 2");
    if (context_len < 2) throw ConfigError("context_len too small");
    if (!(norm_eps > 0.0)) throw ConfigError("norm_eps must be positive");
  }
};

/**
 * Flat offsets of each parameter block; row-major weight matrices. Attention
 * and MLP weights repeat per block: wq..w2 address the first block, and block
 * b lives at the same offsets shifted by b * block_stride.
 */
struct ParamLayout {
  uint32_t tok_emb = 0;  // V x d
  uint32_t pos_emb = 0;  // context x d
  uint32_t wq = 0, wk = 0, wv = 0, wo = 0;  // d x d each, per block
  uint32_t w1 = 0;       // 2d x d, per block
  uint32_t w2 = 0;       // d x 2d, per block
  uint32_t w_out = 0;    // V x d
  uint32_t b_out = 0;    // V
  uint32_t block_stride = 0;
  uint32_t total = 0;

  static ParamLayout make(const PolicyConfig& cfg) {
    const uint32_t d = static_cast<uint32_t>(cfg.d_model);
    const uint32_t v = static_cast<uint32_t>(cfg.vocab.size);
    const uint32_t ctx = static_cast<uint32_t>(cfg.context_len);
    const uint32_t n_blocks = static_cast<uint32_t>(cfg.n_blocks);
    ParamLayout L;
    uint32_t at = 0;
    auto block = [&at](uint32_t n) { uint32_t o = at; at += n; return o; };
    L.tok_emb = block(v * d);
    L.pos_emb = block(ctx * d);
    L.wq = block(d * d);
    L.wk = block(d * d);
    L.wv = block(d * d);
    L.wo = block(d * d);
    L.w1 = block(2 * d * d);
    L.w2 = block(d * 2 * d);
    L.block_stride = at - L.wq;
    at += (n_blocks - 1) * L.block_stride;
    L.w_out = block(v * d);
    L.b_out = block(v);
    L.total = at;
    return L;
  }
};

// ============================================================================
// Distributions
// ============================================================================

struct TokenDist {
  std::vector<double> logits;
  std::vector<double> probs;
  double lse = 0.0;  // logsumexp(logits); log_prob(v) = logits[v] - lse

  double log_prob(TokenId v) const { return logits[static_cast<size_t>(v)] - lse; }
};

/// H = -sum p log p in nats, with 0 * log 0 := 0.
inline double token_entropy(const TokenDist& dist) {
  double h = 0.0;
  for (double p : dist.probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Draws from softmax(logits / temperature); T=1 uses probs as stored.
inline TokenId sample_next(const TokenDist& dist, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw InvalidInput("temperature must be positive");
  const size_t n = dist.probs.size();
  const double u = rng.uniform01();
  double cum = 0.0;
  if (temperature == 1.0) {
    for (size_t v = 0; v < n; ++v) {
      cum += dist.probs[v];
      if (u < cum) return static_cast<TokenId>(v);
    }
    return static_cast<TokenId>(n - 1);
  }
  std::vector<double> scaled(n);
  for (size_t v = 0; v < n; ++v) scaled[v] = dist.logits[v] / temperature;
  const double lse = kern::logsumexp(scaled.data(), n);
  for (size_t v = 0; v < n; ++v) {
    cum += std::exp(scaled[v] - lse);
    if (u < cum) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(n - 1);
}

/// Argmax token; ties resolve to the lowest id.
inline TokenId greedy_token(const TokenDist& dist) {
  size_t best = 0;
  for (size_t v = 1; v < dist.probs.size(); ++v) {
    if (dist.probs[v] > dist.probs[best]) best = v;
  }
  return static_cast<TokenId>(best);
}

// ============================================================================
// Forward recorders
// ============================================================================

namespace detail {

/// Gradient mode: handles are tape refs.
struct TapeRec {
  Tape& t;
  using H = Ref;
  double val(H h) const { return t.value(h); }
  H param(uint32_t i) const { return Tape::param(i); }
  H add(H a, H b) { return t.add(a, b); }
  H sub(H a, H b) { return t.sub(a, b); }
  H div(H a, H b) { return t.div(a, b); }
  H scale(H a, double c) { return t.scale(a, c); }
  H shift(H a, double c) { return t.shift(a, c); }
  H exp(H a) { return t.exp(a); }
  H tanh(H a) { return t.tanh(a); }
  H sqrt(H a) { return t.sqrt(a); }
  H affine_params(uint32_t w, const H* xr, const double* xv, uint32_t n, int64_t b) {
    return t.affine_params(w, xr, xv, n, b);
  }
  H dot_nodes(const H* ar, const double* av, const H* br, const double* bv,
              uint32_t n, size_t bs) {
    return t.dot_nodes(ar, av, br, bv, n, bs);
  }
  H logsumexp(const H* r, const double* v, uint32_t n) { return t.logsumexp(r, v, n); }
};

/// Value mode: handles are the doubles themselves; same arithmetic order.
struct ValRec {
  const std::vector<double>& p;
  using H = double;
  double val(H h) const { return h; }
  H param(uint32_t i) const { return p[i]; }
  H add(H a, H b) { return a + b; }
  H sub(H a, H b) { return a - b; }
  H div(H a, H b) { return a / b; }
  H scale(H a, double c) { return a * c; }
  H shift(H a, double c) { return a + c; }
  H exp(H a) { return std::exp(a); }
  H tanh(H a) { return std::tanh(a); }
  H sqrt(H a) { return std::sqrt(a); }
  H affine_params(uint32_t w, const H*, const double* xv, uint32_t n, int64_t b) {
    double v = kern::dot(p.data() + w, xv, n);
    if (b >= 0) v += p[static_cast<size_t>(b)];
    return v;
  }
  H dot_nodes(const H*, const double* av, const H*, const double* bv,
              uint32_t n, size_t bs) {
    return kern::dot(av, bv, n, 1, bs);
  }
  H logsumexp(const H*, const double* v, uint32_t n) { return kern::logsumexp(v, n); }
};

}  // namespace detail

// ============================================================================
// Policy
// ============================================================================

struct SeqEval {
  std::vector<double> logprobs;   // log pi(tokens[i] | tokens[<i])
  std::vector<double> entropies;  // entropy of the distribution that produced each
};

class Policy {
 public:
  explicit Policy(PolicyConfig cfg) : cfg_(cfg), layout_(ParamLayout::make(cfg)) {
    cfg.validate();
    params_.assign(layout_.total, 0.0);
  }

  /// Uniform(-0.05, 0.05) weights, zero output bias.
  static Policy init(const PolicyConfig& cfg, uint64_t seed) {
    Policy pol(cfg);
    Rng rng = derive_stream(seed, "policy-init");
    for (auto& w : pol.params_) w = rng.uniform(-0.05, 0.05);
    for (uint32_t i = 0; i < static_cast<uint32_t>(cfg.vocab.size); ++i) {
      pol.params_[pol.layout_.b_out + i] = 0.0;
    }
    return pol;
  }

  const PolicyConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  size_t param_count() const { return params_.size(); }

  /// Next-token distribution after the full context (no gradient).
  TokenDist forward_dist(const TokenSeq& context) const {
    validate_seq(context);
    if (context[0] != cfg_.vocab.bos) throw InvalidInput("context must begin with BOS");
    detail::ValRec rec{params_};
    TokenDist dist;
    const size_t last = context.size() - 1;
    run_forward(rec, context, last, last,
                [&](size_t, const double*, const double* lv, double, double lse) {
                  const size_t v = static_cast<size_t>(cfg_.vocab.size);
                  dist.logits.assign(lv, lv + v);
                  dist.lse = lse;
                  dist.probs.resize(v);
                  for (size_t i = 0; i < v; ++i) dist.probs[i] = std::exp(lv[i] - lse);
                });
    return dist;
  }

  /**
   * Log-prob and entropy of each realized token from first_target onward,
   * without gradients. logprobs[k] describes tokens[first_target + k].
   */
  SeqEval seq_eval(const TokenSeq& tokens, size_t first_target) const {
    validate_targets(tokens, first_target);
    detail::ValRec rec{params_};
    SeqEval out;
    std::vector<double> probs(static_cast<size_t>(cfg_.vocab.size));
    run_forward(rec, tokens, first_target - 1, tokens.size() - 2,
                [&](size_t pos, const double*, const double* lv, double, double lse) {
                  const TokenId target = tokens[pos + 1];
                  out.logprobs.push_back(lv[static_cast<size_t>(target)] - lse);
                  TokenDist d;
                  d.logits.assign(lv, lv + probs.size());
                  d.lse = lse;
                  d.probs.resize(probs.size());
                  for (size_t i = 0; i < probs.size(); ++i) {
                    d.probs[i] = std::exp(lv[i] - lse);
                  }
                  out.entropies.push_back(token_entropy(d));
                });
    return out;
  }

  /**
   * Tape-mode twin of seq_eval: returns one log-prob ref per realized token
   * from first_target onward, with values bitwise-equal to seq_eval's.
   */
  std::vector<Ref> seq_logprobs_tape(Tape& tape, const TokenSeq& tokens,
                                     size_t first_target) const {
    validate_targets(tokens, first_target);
    detail::TapeRec rec{tape};
    std::vector<Ref> lps;
    run_forward(rec, tokens, first_target - 1, tokens.size() - 2,
                [&](size_t pos, const Ref* lr, const double*, Ref lse, double) {
                  const TokenId target = tokens[pos + 1];
                  lps.push_back(tape.sub(lr[static_cast<size_t>(target)], lse));
                });
    return lps;
  }

 private:
  void validate_seq(const TokenSeq& tokens) const {
    if (tokens.empty()) throw InvalidInput("empty token sequence");
    if (tokens.size() > static_cast<size_t>(cfg_.context_len)) {
      throw InvalidInput("sequence length " + std::to_string(tokens.size()) +
                         " exceeds context length " + std::to_string(cfg_.context_len));
    }
    for (TokenId t : tokens) {
      if (t < 0 || t >= cfg_.vocab.size) {
        throw InvalidInput("token id out of range: " + std::to_string(t));
      }
    }
  }

  void validate_targets(const TokenSeq& tokens, size_t first_target) const {
    validate_seq(tokens);
    if (first_target < 1 || first_target >= tokens.size()) {
      throw InvalidInput("first_target must lie in [1, len)");
    }
  }

  /**
   * Runs the forward pass, invoking emit(pos, logit_handles, logit_values,
   * lse_handle, lse_value) for every position in [emit_begin, emit_end].
   * Positions outside that range run every block except the last block's
   * query/attention/MLP path: they contribute only attention keys/values,
   * which is all later positions ever read from them.
   */
  template <class Rec, class EmitFn>
  void run_forward(Rec& rec, const TokenSeq& tokens, size_t emit_begin,
                   size_t emit_end, EmitFn&& emit) const {
    using H = typename Rec::H;
    const uint32_t d = static_cast<uint32_t>(cfg_.d_model);
    const uint32_t dff = 2 * d;
    const uint32_t v = static_cast<uint32_t>(cfg_.vocab.size);
    const uint32_t nb = static_cast<uint32_t>(cfg_.n_blocks);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    const ParamLayout& L = layout_;

    // Per-block, position-major key/value stacks.
    std::vector<std::vector<H>> ks(nb), vs(nb);
    std::vector<std::vector<double>> ksv(nb), vsv(nb);
    for (uint32_t b = 0; b < nb; ++b) {
      ks[b].reserve(tokens.size() * d);
      vs[b].reserve(tokens.size() * d);
      ksv[b].reserve(tokens.size() * d);
      vsv[b].reserve(tokens.size() * d);
    }

    std::vector<H> x(d), n1(d), q(d), ctx(d), attn(d), n2(d), u(dff), mlp(d),
        f(d), logits(v);
    std::vector<double> xv(d), n1v(d), qv(d), ctxv(d), attnv(d), n2v(d),
        uv(dff), mlpv(d), fv(d), logitsv(v);
    std::vector<H> sc, aw;
    std::vector<double> scv, awv;

    auto rmsnorm = [&](const std::vector<H>& in, const std::vector<double>& inv,
                       std::vector<H>& out, std::vector<double>& outv) {
      H ss = rec.dot_nodes(in.data(), inv.data(), in.data(), inv.data(), d, 1);
      H r = rec.sqrt(rec.shift(rec.scale(ss, 1.0 / d), cfg_.norm_eps));
      for (uint32_t i = 0; i < d; ++i) {
        out[i] = rec.div(in[i], r);
        outv[i] = rec.val(out[i]);
      }
    };

    auto affine_rows = [&](uint32_t w_off, uint32_t rows, const std::vector<H>& in,
                           const std::vector<double>& inv, int64_t bias_off,
                           auto& out, auto& outv) {
      const uint32_t in_n = static_cast<uint32_t>(in.size());
      for (uint32_t r = 0; r < rows; ++r) {
        out[r] = rec.affine_params(w_off + r * in_n, in.data(), inv.data(), in_n,
                                   bias_off < 0 ? -1 : bias_off + r);
        outv[r] = rec.val(out[r]);
      }
    };

    const size_t stop = std::min(emit_end, tokens.size() - 1);
    for (size_t pos = 0; pos <= stop; ++pos) {
      const uint32_t tok = static_cast<uint32_t>(tokens[pos]);
      for (uint32_t i = 0; i < d; ++i) {
        x[i] = rec.add(rec.param(L.tok_emb + tok * d + i),
                       rec.param(L.pos_emb + static_cast<uint32_t>(pos) * d + i));
        xv[i] = rec.val(x[i]);
      }

      const bool emitting = pos >= emit_begin;
      for (uint32_t b = 0; b < nb; ++b) {
        const uint32_t boff = b * L.block_stride;
        rmsnorm(x, xv, n1, n1v);

        const size_t kv_at = ks[b].size();
        ks[b].resize(kv_at + d);
        vs[b].resize(kv_at + d);
        ksv[b].resize(kv_at + d);
        vsv[b].resize(kv_at + d);
        for (uint32_t i = 0; i < d; ++i) {
          ks[b][kv_at + i] =
              rec.affine_params(L.wk + boff + i * d, n1.data(), n1v.data(), d, -1);
          ksv[b][kv_at + i] = rec.val(ks[b][kv_at + i]);
          vs[b][kv_at + i] =
              rec.affine_params(L.wv + boff + i * d, n1.data(), n1v.data(), d, -1);
          vsv[b][kv_at + i] = rec.val(vs[b][kv_at + i]);
        }
        if (b + 1 == nb && !emitting) break;

        affine_rows(L.wq + boff, d, n1, n1v, -1, q, qv);
        const uint32_t span = static_cast<uint32_t>(pos) + 1;
        sc.resize(span);
        scv.resize(span);
        aw.resize(span);
        awv.resize(span);
        for (uint32_t j = 0; j < span; ++j) {
          H s = rec.dot_nodes(q.data(), qv.data(), ks[b].data() + j * d,
                              ksv[b].data() + j * d, d, 1);
          sc[j] = rec.scale(s, inv_sqrt_d);
          scv[j] = rec.val(sc[j]);
        }
        H lse_s = rec.logsumexp(sc.data(), scv.data(), span);
        for (uint32_t j = 0; j < span; ++j) {
          aw[j] = rec.exp(rec.sub(sc[j], lse_s));
          awv[j] = rec.val(aw[j]);
        }
        for (uint32_t i = 0; i < d; ++i) {
          ctx[i] = rec.dot_nodes(aw.data(), awv.data(), vs[b].data() + i,
                                 vsv[b].data() + i, span, d);
          ctxv[i] = rec.val(ctx[i]);
        }
        affine_rows(L.wo + boff, d, ctx, ctxv, -1, attn, attnv);
        for (uint32_t i = 0; i < d; ++i) {
          x[i] = rec.add(x[i], attn[i]);
          xv[i] = rec.val(x[i]);
        }
        rmsnorm(x, xv, n2, n2v);
        for (uint32_t r = 0; r < dff; ++r) {
          u[r] = rec.tanh(
              rec.affine_params(L.w1 + boff + r * d, n2.data(), n2v.data(), d, -1));
          uv[r] = rec.val(u[r]);
        }
        affine_rows(L.w2 + boff, d, u, uv, -1, mlp, mlpv);
        for (uint32_t i = 0; i < d; ++i) {
          x[i] = rec.add(x[i], mlp[i]);
          xv[i] = rec.val(x[i]);
        }
      }
      if (!emitting) continue;

      rmsnorm(x, xv, f, fv);
      affine_rows(L.w_out, v, f, fv, static_cast<int64_t>(L.b_out), logits, logitsv);
      H lse = rec.logsumexp(logits.data(), logitsv.data(), v);
      emit(pos, logits.data(), logitsv.data(), lse, rec.val(lse));
    }
  }

  PolicyConfig cfg_;
  ParamLayout layout_;
  std::vector<double> params_;
};

// ============================================================================
// Optimizers
// ============================================================================

inline void require_finite_gradient(const std::vector<double>& grad) {
  const int64_t bad = first_non_finite(grad);
  if (bad >= 0) {
    throw InvalidInput("non-finite gradient entry at index " + std::to_string(bad));
  }
}

inline void require_finite_params(const std::vector<double>& params) {
  const int64_t bad = first_non_finite(params);
  if (bad >= 0) {
    throw TrainingAbort("non-finite parameter at index " + std::to_string(bad));
  }
}

inline void sgd_update(std::vector<double>& params, const std::vector<double>& grad,
                       double lr) {
  if (grad.size() != params.size()) throw InvalidInput("gradient length mismatch");
  require_finite_gradient(grad);
  for (size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
  require_finite_params(params);
}

struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState init(size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }
};

inline void adam_update(std::vector<double>& params, AdamState& st,
                        const std::vector<double>& grad, double lr) {
  if (grad.size() != params.size() || st.m.size() != params.size()) {
    throw InvalidInput("gradient/state length mismatch");
  }
  require_finite_gradient(grad);
  st.step += 1;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grad[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
  }
  require_finite_params(params);
}

}  // namespace egspo
