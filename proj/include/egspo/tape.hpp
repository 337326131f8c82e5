#pragma once

/**
 * Reverse-mode autodiff on an arena tape.
 *
 * Every scalar produced during a forward computation is a node holding its
 * value and a list of (parent, local partial) pairs. Creation order is a
 * topological order, so backward() is a single reverse sweep. Trainable
 * parameters are not nodes: a Ref with the high bit set indexes the external
 * flat parameter vector, and backward() accumulates their gradients straight
 * into a caller-owned buffer.
 *
 * Fused ops (dot products, logsumexp, sums) record one node with n parents
 * instead of 2n scalar nodes; their values are computed by the kern::*
 * routines, which the no-grad sampling path shares so that both paths
 * produce bitwise-identical doubles.
 *
 * Gradient exactness is pinned by finite-difference oracles in the tests.
 */

#include <cmath>
#include <cstdint>
#include <vector>

#include "common.hpp"

namespace egspo {

// ============================================================================
// Shared value kernels (used by tape ops and the no-grad forward path)
// ============================================================================

namespace kern {

inline double dot(const double* a, const double* b, size_t n,
                  size_t stride_a = 1, size_t stride_b = 1) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i * stride_a] * b[i * stride_b];
  return acc;
}

inline double sum(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

/// max(x) + log(sum(exp(x - max))); requires n >= 1 and finite inputs.
inline double logsumexp(const double* x, size_t n, size_t stride = 1) {
  double m = x[0];
  for (size_t i = 1; i < n; ++i) {
    if (x[i * stride] > m) m = x[i * stride];
  }
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - m);
  return m + std::log(s);
}

}  // namespace kern

// ============================================================================
// Tape
// ============================================================================

/// Node index or parameter reference; the high bit marks a parameter.
using Ref = uint32_t;

constexpr Ref kParamBit = 0x80000000u;

inline bool is_param(Ref r) { return (r & kParamBit) != 0; }
inline uint32_t ref_index(Ref r) { return r & ~kParamBit; }

class Tape {
 public:
  explicit Tape(const std::vector<double>& params) : params_(&params) {}

  /// Drops all nodes (capacity retained) and rebinds the parameter vector.
  void reset(const std::vector<double>& params) {
    params_ = &params;
    nodes_.clear();
    arg_ref_.clear();
    arg_partial_.clear();
  }

  void reset() {
    nodes_.clear();
    arg_ref_.clear();
    arg_partial_.clear();
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<double>& params() const { return *params_; }

  static Ref param(uint32_t index) { return kParamBit | index; }

  double value(Ref r) const {
    return is_param(r) ? (*params_)[ref_index(r)] : nodes_[ref_index(r)].value;
  }

  // --- scalar ops -----------------------------------------------------------

  /// Constant node; gradient flowing into it is discarded.
  Ref leaf(double v) { return push_(v, 0); }

  Ref add(Ref a, Ref b) {
    Ref r = push_(value(a) + value(b), 2);
    set_arg_(r, 0, a, 1.0);
    set_arg_(r, 1, b, 1.0);
    return r;
  }

  Ref sub(Ref a, Ref b) {
    Ref r = push_(value(a) - value(b), 2);
    set_arg_(r, 0, a, 1.0);
    set_arg_(r, 1, b, -1.0);
    return r;
  }

  Ref mul(Ref a, Ref b) {
    const double va = value(a), vb = value(b);
    Ref r = push_(va * vb, 2);
    set_arg_(r, 0, a, vb);
    set_arg_(r, 1, b, va);
    return r;
  }

  Ref div(Ref a, Ref b) {
    const double va = value(a), vb = value(b);
    Ref r = push_(va / vb, 2);
    set_arg_(r, 0, a, 1.0 / vb);
    set_arg_(r, 1, b, -va / (vb * vb));
    return r;
  }

  Ref neg(Ref a) { return unary_(-value(a), a, -1.0); }

  /// c * x
  Ref scale(Ref a, double c) { return unary_(value(a) * c, a, c); }

  /// x + c
  Ref shift(Ref a, double c) { return unary_(value(a) + c, a, 1.0); }

  Ref exp(Ref a) {
    const double v = std::exp(value(a));
    return unary_(v, a, v);
  }

  Ref log(Ref a) {
    const double va = value(a);
    return unary_(std::log(va), a, 1.0 / va);
  }

  Ref tanh(Ref a) {
    const double v = std::tanh(value(a));
    return unary_(v, a, 1.0 - v * v);
  }

  Ref sqrt(Ref a) {
    const double v = std::sqrt(value(a));
    return unary_(v, a, 0.5 / v);
  }

  /// min(a, b); ties route the gradient to a.
  Ref min2(Ref a, Ref b) {
    const double va = value(a), vb = value(b);
    Ref r = push_(va <= vb ? va : vb, 1);
    set_arg_(r, 0, va <= vb ? a : b, 1.0);
    return r;
  }

  /// clamp(x, lo, hi); boundary points keep derivative 1.
  Ref clamp(Ref a, double lo, double hi) {
    const double va = value(a);
    const double v = va < lo ? lo : (va > hi ? hi : va);
    return unary_(v, a, (va >= lo && va <= hi) ? 1.0 : 0.0);
  }

  // --- fused ops --------------------------------------------------------------

  /// sum_i params[w_offset+i] * x_i, plus params[bias_index] when bias >= 0.
  Ref affine_params(uint32_t w_offset, const Ref* x_refs, const double* x_vals,
                    uint32_t n, int64_t bias_index = -1) {
    const double* w = params_->data() + w_offset;
    double v = kern::dot(w, x_vals, n);
    if (bias_index >= 0) v += (*params_)[static_cast<size_t>(bias_index)];
    Ref r = push_(v, bias_index >= 0 ? 2 * n + 1 : 2 * n);
    for (uint32_t i = 0; i < n; ++i) {
      set_arg_(r, i, param(w_offset + i), x_vals[i]);
      set_arg_(r, n + i, x_refs[i], w[i]);
    }
    if (bias_index >= 0) {
      set_arg_(r, 2 * n, param(static_cast<uint32_t>(bias_index)), 1.0);
    }
    return r;
  }

  /// sum_i a_i * b_{i*stride_b} over two node vectors.
  Ref dot_nodes(const Ref* a_refs, const double* a_vals,
                const Ref* b_refs, const double* b_vals,
                uint32_t n, size_t b_stride = 1) {
    const double v = kern::dot(a_vals, b_vals, n, 1, b_stride);
    Ref r = push_(v, 2 * n);
    for (uint32_t i = 0; i < n; ++i) {
      set_arg_(r, i, a_refs[i], b_vals[i * b_stride]);
      set_arg_(r, n + i, b_refs[i * b_stride], a_vals[i]);
    }
    return r;
  }

  Ref sum(const Ref* refs, const double* vals, uint32_t n) {
    Ref r = push_(kern::sum(vals, n), n);
    for (uint32_t i = 0; i < n; ++i) set_arg_(r, i, refs[i], 1.0);
    return r;
  }

  /// Stabilized logsumexp; local partials are the softmax weights.
  Ref logsumexp(const Ref* refs, const double* vals, uint32_t n) {
    const double v = kern::logsumexp(vals, n);
    Ref r = push_(v, n);
    for (uint32_t i = 0; i < n; ++i) set_arg_(r, i, refs[i], std::exp(vals[i] - v));
    return r;
  }

  // --- backward ---------------------------------------------------------------

  /**
   * Accumulates d(seed * loss)/d(param) into param_grads (not zeroed here).
   * Node adjoints are scratch state per call; one backward per recorded
   * forward. Throws StateError when nothing has been recorded.
   */
  void backward(Ref loss, std::vector<double>& param_grads, double seed = 1.0) {
    if (nodes_.empty()) throw StateError("Tape::backward called before any forward");
    if (is_param(loss) || ref_index(loss) >= nodes_.size()) {
      throw StateError("Tape::backward: loss is not a recorded node");
    }
    for (auto& n : nodes_) n.grad = 0.0;
    nodes_[ref_index(loss)].grad = seed;
    for (size_t i = nodes_.size(); i-- > 0;) {
      const Node& n = nodes_[i];
      const double g = n.grad;
      if (g == 0.0) continue;
      const uint32_t end = n.arg_begin + n.arg_count;
      for (uint32_t a = n.arg_begin; a < end; ++a) {
        const Ref pr = arg_ref_[a];
        const double contrib = arg_partial_[a] * g;
        if (is_param(pr)) {
          param_grads[ref_index(pr)] += contrib;
        } else {
          nodes_[ref_index(pr)].grad += contrib;
        }
      }
    }
  }

 private:
  struct Node {
    double value;
    double grad;
    uint32_t arg_begin;
    uint32_t arg_count;
  };

  Ref push_(double v, uint32_t arg_count) {
    const uint32_t begin = static_cast<uint32_t>(arg_ref_.size());
    arg_ref_.resize(arg_ref_.size() + arg_count);
    arg_partial_.resize(arg_partial_.size() + arg_count);
    nodes_.push_back(Node{v, 0.0, begin, arg_count});
    return static_cast<Ref>(nodes_.size() - 1);
  }

  void set_arg_(Ref node, uint32_t slot, Ref parent, double partial) {
    const uint32_t at = nodes_[ref_index(node)].arg_begin + slot;
    arg_ref_[at] = parent;
    arg_partial_[at] = partial;
  }

  Ref unary_(double v, Ref a, double partial) {
    Ref r = push_(v, 1);
    set_arg_(r, 0, a, partial);
    return r;
  }

  const std::vector<double>* params_;
  std::vector<Node> nodes_;
  std::vector<Ref> arg_ref_;
  std::vector<double> arg_partial_;
};

}  // namespace egspo
