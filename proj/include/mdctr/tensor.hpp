#pragma once

/// Dense-tensor engine with reverse-mode automatic differentiation.
///
/// A Tape is a Wengert list: every operation appends one Node holding the
/// output values, the parent indices, a forward closure (recompute values
/// from parents) and a backward closure (scatter the output gradient to the
/// parents). Node creation order is a topological order, so backward() is a
/// single reverse sweep and replay() is a single forward sweep. Replaying a
/// tape after perturbing a parameter reproduces the program bit-identically,
/// which is what the finite-difference auditor relies on.
///
/// Tensors are cheap handles (tape pointer + node index). A tape and its
/// tensors belong to one worker at a time; parallel batch evaluation uses
/// independent tapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mdctr/errors.hpp"
#include "mdctr/rng.hpp"

namespace mdctr {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

/// A named, trainable parameter. Lives outside any tape; each forward pass
/// binds it to a leaf node. Gradients accumulate in `grad` after backward().
template <class S>
struct Param {
  std::string name;
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;

  Param() = default;
  Param(std::string n, Shape sh)
      : name(std::move(n)), shape(std::move(sh)), value(numel(shape), S(0)), grad(numel(shape), S(0)) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }

  void init_normal(Rng& rng, double stddev, double mean = 0.0) {
    for (auto& v : value) v = static_cast<S>(rng.normal(mean, stddev));
  }
  void init_xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
    init_normal(rng, sd);
  }
  void fill(S v) { std::fill(value.begin(), value.end(), v); }
};

template <class S>
class Tape;

template <class S>
struct Tensor {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape& shape() const;
  const std::vector<S>& value() const;
  const std::vector<S>& grad() const;
  std::size_t size() const { return numel(shape()); }
  S item() const;
};

template <class S>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // sized lazily by backward()
    bool requires_grad = false;
    std::vector<int> parents;
    std::function<void()> forward;   // null for constants
    std::function<void()> backward;  // null for leaves
    Param<S>* source = nullptr;      // leaf bound to a parameter
  };

  std::vector<Node> nodes;

  /// Parameters bound while this is false enter as plain constants: frozen
  /// modules and evaluation passes record no gradient work at all.
  bool bind_requires_grad = true;

  int size() const { return static_cast<int>(nodes.size()); }

  /// Bind a parameter as a differentiable leaf. One leaf per parameter per
  /// tape: repeated binds return the same node so gradient contributions
  /// from multiple uses accumulate in one place.
  Tensor<S> param(Param<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {this, it->second};
    int id = new_node(p.shape, {}, bind_requires_grad);
    nodes[id].source = &p;
    nodes[id].value = p.value;
    nodes[id].forward = [this, id]() {
      Node& n = nodes[id];
      n.value = n.source->value;
    };
    param_nodes_.emplace(&p, id);
    return {this, id};
  }

  /// Non-differentiable leaf (inputs, masks, labels).
  Tensor<S> constant(Shape shape, std::vector<S> values) {
    if (numel(shape) != values.size())
      throw ValidationError("constant: shape " + shape_str(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
    int id = new_node(std::move(shape), {}, false);
    nodes[id].value = std::move(values);
    return {this, id};
  }

  Tensor<S> constant_scalar(S v) { return constant({1}, {v}); }

  /// Recompute every node from the leaves in recorded order. Leaves bound to
  /// parameters refresh from the parameter's current values.
  void replay() {
    for (auto& n : nodes)
      if (n.forward) n.forward();
  }

  int new_node(Shape shape, std::vector<int> parents, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    n.value.assign(numel(n.shape), S(0));
    n.parents = std::move(parents);
    n.requires_grad = requires_grad;
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }

  const std::unordered_map<Param<S>*, int>& param_nodes() const { return param_nodes_; }

 private:
  std::unordered_map<Param<S>*, int> param_nodes_;
};

template <class S>
const Shape& Tensor<S>::shape() const {
  return tape->nodes[id].shape;
}
template <class S>
const std::vector<S>& Tensor<S>::value() const {
  return tape->nodes[id].value;
}
template <class S>
const std::vector<S>& Tensor<S>::grad() const {
  return tape->nodes[id].grad;
}
template <class S>
S Tensor<S>::item() const {
  if (size() != 1) throw ValidationError("item(): tensor is not scalar, shape " + shape_str(shape()));
  return value()[0];
}

// ---------------------------------------------------------------------------
// matmul kernels (row-major). ikj ordering keeps the inner loop contiguous.
// Each output row depends only on the matching input row, so per-row results
// do not change when other rows are added or removed from the batch.
// ---------------------------------------------------------------------------

template <class S>
void mm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  std::fill(c, c + m * n, S(0));
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    S* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      S aip = ai[p];
      const S* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += a (m x k) * b^T, b stored (n x k)
template <class S>
void mm_nt_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    S* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const S* bj = b + j * k;
      S acc = S(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c += a (m x k) * b (k x n)
template <class S>
void mm_nn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    S* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      S aip = ai[p];
      const S* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c += a^T * b where a is stored (m x k) and b is (m x n); result (k x n)
template <class S>
void mm_tn_acc(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const S* ai = a + i * k;
    const S* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      S aip = ai[p];
      S* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

namespace detail {

template <class S>
inline void check_same_tape(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.tape != b.tape) throw ValidationError("operands belong to different tapes");
}

// b broadcastable over a when b.shape is a suffix of a.shape
inline bool is_suffix(const Shape& outer, const Shape& suffix) {
  if (suffix.size() > outer.size()) return false;
  for (std::size_t i = 0; i < suffix.size(); ++i)
    if (outer[outer.size() - suffix.size() + i] != suffix[i]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

/// a + b. Shapes must match, or b's shape must be a trailing suffix of a's
/// (vector over matrix, positional table over batch).
template <class S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Shape sa = t.nodes[a.id].shape;
  const Shape sb = t.nodes[b.id].shape;
  bool same = (sa == sb);
  if (!same && !detail::is_suffix(sa, sb))
    throw ValidationError("add: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  bool rg = t.nodes[a.id].requires_grad || t.nodes[b.id].requires_grad;
  int id = t.new_node(sa, {a.id, b.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, bid = b.id]() {
    auto& out = tp->nodes[id].value;
    const auto& av = tp->nodes[aid].value;
    const auto& bv = tp->nodes[bid].value;
    std::size_t nb = bv.size();
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % nb];
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, bid = b.id]() {
      const auto& g = tp->nodes[id].grad;
      if (tp->nodes[aid].requires_grad) {
        auto& ga = tp->nodes[aid].grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (tp->nodes[bid].requires_grad) {
        auto& gb = tp->nodes[bid].grad;
        std::size_t nb = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
      }
    };
  }
  return {&t, id};
}

/// elementwise a * b, same shapes only
template <class S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  if (t.nodes[a.id].shape != t.nodes[b.id].shape)
    throw ValidationError("mul: incompatible shapes " + shape_str(t.nodes[a.id].shape) + " and " +
                          shape_str(t.nodes[b.id].shape));
  bool rg = t.nodes[a.id].requires_grad || t.nodes[b.id].requires_grad;
  int id = t.new_node(t.nodes[a.id].shape, {a.id, b.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, bid = b.id]() {
    auto& out = tp->nodes[id].value;
    const auto& av = tp->nodes[aid].value;
    const auto& bv = tp->nodes[bid].value;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, bid = b.id]() {
      const auto& g = tp->nodes[id].grad;
      if (tp->nodes[aid].requires_grad) {
        auto& ga = tp->nodes[aid].grad;
        const auto& bv = tp->nodes[bid].value;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (tp->nodes[bid].requires_grad) {
        auto& gb = tp->nodes[bid].grad;
        const auto& av = tp->nodes[aid].value;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    };
  }
  return {&t, id};
}

/// a * c for a compile-time constant scalar
template <class S>
Tensor<S> scale(Tensor<S> a, double c) {
  Tape<S>& t = *a.tape;
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node(t.nodes[a.id].shape, {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, c]() {
    auto& out = tp->nodes[id].value;
    const auto& av = tp->nodes[aid].value;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = static_cast<S>(av[i] * c);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, c]() {
      const auto& g = tp->nodes[id].grad;
      auto& ga = tp->nodes[aid].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += static_cast<S>(g[i] * c);
    };
  }
  return {&t, id};
}

namespace detail {

template <class S, class F, class DF>
Tensor<S> unary(Tensor<S> a, F f, DF df_from_out_in) {
  Tape<S>& t = *a.tape;
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node(t.nodes[a.id].shape, {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, f]() {
    auto& out = tp->nodes[id].value;
    const auto& av = tp->nodes[aid].value;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, df_from_out_in]() {
      const auto& g = tp->nodes[id].grad;
      const auto& ov = tp->nodes[id].value;
      const auto& av = tp->nodes[aid].value;
      auto& ga = tp->nodes[aid].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df_from_out_in(ov[i], av[i]);
    };
  }
  return {&t, id};
}

}  // namespace detail

template <class S>
Tensor<S> tanh(Tensor<S> a) {
  return detail::unary(
      a, [](S x) { return static_cast<S>(std::tanh(static_cast<double>(x))); },
      [](S y, S) { return S(1) - y * y; });
}

template <class S>
Tensor<S> sigmoid(Tensor<S> a) {
  return detail::unary(
      a, [](S x) { return static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); },
      [](S y, S) { return y * (S(1) - y); });
}

template <class S>
Tensor<S> relu(Tensor<S> a) {
  return detail::unary(
      a, [](S x) { return x > S(0) ? x : S(0); }, [](S, S x) { return x > S(0) ? S(1) : S(0); });
}

/// exact gelu: x * Phi(x)
template <class S>
Tensor<S> gelu(Tensor<S> a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return detail::unary(
      a,
      [=](S x) {
        double xd = static_cast<double>(x);
        return static_cast<S>(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
      },
      [=](S, S x) {
        double xd = static_cast<double>(x);
        double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        double dens = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return static_cast<S>(phi + xd * dens);
      });
}

// ---------------------------------------------------------------------------
// matmul / batched matmul
// ---------------------------------------------------------------------------

/// 2-D matrix product (m x k) . (k x n) with tape rules dA = dC.B^T, dB = A^T.dC
template <class S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Shape& sa = t.nodes[a.id].shape;
  const Shape& sb = t.nodes[b.id].shape;
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ValidationError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  std::size_t m = sa[0], k = sa[1], n = sb[1];
  bool rg = t.nodes[a.id].requires_grad || t.nodes[b.id].requires_grad;
  int id = t.new_node({m, n}, {a.id, b.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, bid = b.id, m, k, n]() {
    mm_nn(tp->nodes[aid].value.data(), tp->nodes[bid].value.data(), tp->nodes[id].value.data(), m, k, n);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, bid = b.id, m, k, n]() {
      const S* g = tp->nodes[id].grad.data();
      if (tp->nodes[aid].requires_grad)
        mm_nt_acc(g, tp->nodes[bid].value.data(), tp->nodes[aid].grad.data(), m, n, k);
      if (tp->nodes[bid].requires_grad)
        mm_tn_acc(tp->nodes[aid].value.data(), g, tp->nodes[bid].grad.data(), m, k, n);
    };
  }
  return {&t, id};
}

/// batched product over leading axis: (B x m x k) . (B x k x n), or
/// (B x m x k) . (B x n x k) with transpose_b
template <class S>
Tensor<S> bmm(Tensor<S> a, Tensor<S> b, bool transpose_b = false) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Shape& sa = t.nodes[a.id].shape;
  const Shape& sb = t.nodes[b.id].shape;
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    throw ValidationError("bmm: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  std::size_t B = sa[0], m = sa[1], k = sa[2];
  std::size_t n = transpose_b ? sb[1] : sb[2];
  std::size_t bk = transpose_b ? sb[2] : sb[1];
  if (bk != k)
    throw ValidationError("bmm: inner extents differ, " + shape_str(sa) + " and " + shape_str(sb));
  bool rg = t.nodes[a.id].requires_grad || t.nodes[b.id].requires_grad;
  int id = t.new_node({B, m, n}, {a.id, b.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, bid = b.id, B, m, k, n, transpose_b]() {
    const S* av = tp->nodes[aid].value.data();
    const S* bv = tp->nodes[bid].value.data();
    S* out = tp->nodes[id].value.data();
    for (std::size_t q = 0; q < B; ++q) {
      const S* aq = av + q * m * k;
      const S* bq = bv + q * k * n;
      S* oq = out + q * m * n;
      if (!transpose_b) {
        mm_nn(aq, bq, oq, m, k, n);
      } else {
        std::fill(oq, oq + m * n, S(0));
        mm_nt_acc(aq, bq, oq, m, k, n);
      }
    }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, bid = b.id, B, m, k, n, transpose_b]() {
      const S* g = tp->nodes[id].grad.data();
      const S* av = tp->nodes[aid].value.data();
      const S* bv = tp->nodes[bid].value.data();
      bool need_a = tp->nodes[aid].requires_grad;
      bool need_b = tp->nodes[bid].requires_grad;
      for (std::size_t q = 0; q < B; ++q) {
        const S* gq = g + q * m * n;
        const S* aq = av + q * m * k;
        const S* bq = bv + q * k * n;
        if (!transpose_b) {
          // c = a.b : da += g.b^T, db += a^T.g
          if (need_a) mm_nt_acc(gq, bq, tp->nodes[aid].grad.data() + q * m * k, m, n, k);
          if (need_b) mm_tn_acc(aq, gq, tp->nodes[bid].grad.data() + q * k * n, m, k, n);
        } else {
          // c = a.b^T : da += g.b, db += g^T.a
          if (need_a) mm_nn_acc(gq, bq, tp->nodes[aid].grad.data() + q * m * k, m, n, k);
          if (need_b) mm_tn_acc(gq, aq, tp->nodes[bid].grad.data() + q * n * k, m, n, k);
        }
      }
    };
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// softmax / layer norm
// ---------------------------------------------------------------------------

/// softmax along `axis`, max-subtracted for stability
template <class S>
Tensor<S> softmax(Tensor<S> a, std::size_t axis) {
  Tape<S>& t = *a.tape;
  const Shape& sa = t.nodes[a.id].shape;
  if (axis >= sa.size())
    throw ValidationError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(sa));
  std::size_t outer = 1, inner = 1, len = sa[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node(sa, {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, outer, inner, len]() {
    const auto& av = tp->nodes[aid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        std::size_t base = o * len * inner + in;
        S mx = av[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, av[base + j * inner]);
        double sum = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          double e = std::exp(static_cast<double>(av[base + j * inner] - mx));
          out[base + j * inner] = static_cast<S>(e);
          sum += e;
        }
        S inv = static_cast<S>(1.0 / sum);
        for (std::size_t j = 0; j < len; ++j) out[base + j * inner] *= inv;
      }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, outer, inner, len]() {
      const auto& ov = tp->nodes[id].value;
      const auto& g = tp->nodes[id].grad;
      auto& ga = tp->nodes[aid].grad;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          std::size_t base = o * len * inner + in;
          S dot = S(0);
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * ov[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            std::size_t ix = base + j * inner;
            ga[ix] += ov[ix] * (g[ix] - dot);
          }
        }
    };
  }
  return {&t, id};
}

/// normalize over the last axis (population variance), then scale/shift
template <class S>
Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, double eps = 1e-5) {
  detail::check_same_tape(x, gain);
  detail::check_same_tape(x, bias);
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  std::size_t d = sx.back();
  if (t.nodes[gain.id].shape != Shape{d} || t.nodes[bias.id].shape != Shape{d})
    throw ValidationError("layer_norm: gain/bias must match last axis " + std::to_string(d));
  std::size_t rows = numel(sx) / d;
  bool rg = t.nodes[x.id].requires_grad || t.nodes[gain.id].requires_grad || t.nodes[bias.id].requires_grad;
  int id = t.new_node(sx, {x.id, gain.id, bias.id}, rg);
  auto fwd = [tp = &t, id, xid = x.id, gid = gain.id, bid = bias.id, rows, d, eps]() {
    const auto& xv = tp->nodes[xid].value;
    const auto& gv = tp->nodes[gid].value;
    const auto& bv = tp->nodes[bid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t r = 0; r < rows; ++r) {
      const S* xr = xv.data() + r * d;
      S* yr = out.data() + r * d;
      double mean = 0.0;
      for (std::size_t j = 0; j < d; ++j) mean += xr[j];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double c = xr[j] - mean;
        var += c * c;
      }
      var /= static_cast<double>(d);
      double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j)
        yr[j] = static_cast<S>((xr[j] - mean) * inv) * gv[j] + bv[j];
    }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, gid = gain.id, bid = bias.id, rows, d, eps]() {
      const auto& xv = tp->nodes[xid].value;
      const auto& gv = tp->nodes[gid].value;
      const auto& g = tp->nodes[id].grad;
      bool need_x = tp->nodes[xid].requires_grad;
      bool need_g = tp->nodes[gid].requires_grad;
      bool need_b = tp->nodes[bid].requires_grad;
      for (std::size_t r = 0; r < rows; ++r) {
        const S* xr = xv.data() + r * d;
        const S* gr = g.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double c = xr[j] - mean;
          var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        if (need_g || need_b) {
          auto& gg = tp->nodes[gid].grad;
          auto& gb = tp->nodes[bid].grad;
          for (std::size_t j = 0; j < d; ++j) {
            S xhat = static_cast<S>((xr[j] - mean) * inv);
            if (need_g) gg[j] += gr[j] * xhat;
            if (need_b) gb[j] += gr[j];
          }
        }
        if (need_x) {
          // dxhat_j = g_j * gain_j ; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            double xhat = (xr[j] - mean) * inv;
            double dxh = static_cast<double>(gr[j]) * gv[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xhat;
          }
          double dn = static_cast<double>(d);
          auto& gx = tp->nodes[xid].grad;
          S* gxr = gx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            double xhat = (xr[j] - mean) * inv;
            double dxh = static_cast<double>(gr[j]) * gv[j];
            gxr[j] += static_cast<S>(inv * (dxh - sum_dxh / dn - xhat * sum_dxh_xh / dn));
          }
        }
      }
    };
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// lookup / shuffle ops
// ---------------------------------------------------------------------------

/// gather rows of an embedding table: (V x d, ids[n]) -> (n x d)
template <class S>
Tensor<S> embedding(Tensor<S> table, std::vector<std::int32_t> ids) {
  Tape<S>& t = *table.tape;
  const Shape& st = t.nodes[table.id].shape;
  if (st.size() != 2) throw ValidationError("embedding: table must be 2-D, got " + shape_str(st));
  std::size_t V = st[0], d = st[1];
  for (auto i : ids)
    if (i < 0 || static_cast<std::size_t>(i) >= V)
      throw ValidationError("embedding: id " + std::to_string(i) + " out of range for table of " +
                            std::to_string(V) + " rows");
  std::size_t n = ids.size();
  bool rg = t.nodes[table.id].requires_grad;
  int id = t.new_node({n, d}, {table.id}, rg);
  auto fwd = [tp = &t, id, tid = table.id, ids, d]() {
    const auto& tv = tp->nodes[tid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, tid = table.id, ids, d]() {
      const auto& g = tp->nodes[id].grad;
      auto& gt = tp->nodes[tid].grad;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        S* dst = gt.data() + static_cast<std::size_t>(ids[r]) * d;
        const S* src = g.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return {&t, id};
}

/// view with a new shape (same element count); gradient passes through
template <class S>
Tensor<S> reshape(Tensor<S> a, Shape shape) {
  Tape<S>& t = *a.tape;
  if (numel(shape) != numel(t.nodes[a.id].shape))
    throw ValidationError("reshape: " + shape_str(t.nodes[a.id].shape) + " to " + shape_str(shape) +
                          " changes element count");
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node(std::move(shape), {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id]() { tp->nodes[id].value = tp->nodes[aid].value; };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id]() {
      const auto& g = tp->nodes[id].grad;
      auto& ga = tp->nodes[aid].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  }
  return {&t, id};
}

/// (b x s x d) -> (b*H x s x d/H): split feature axis into heads
template <class S>
Tensor<S> split_heads(Tensor<S> x, std::size_t heads) {
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  if (sx.size() != 3 || sx[2] % heads != 0)
    throw ValidationError("split_heads: need 3-D with feature axis divisible by " + std::to_string(heads));
  std::size_t b = sx[0], s = sx[1], d = sx[2], hd = d / heads;
  bool rg = t.nodes[x.id].requires_grad;
  int id = t.new_node({b * heads, s, hd}, {x.id}, rg);
  auto map_fwd = [b, s, d, hd, heads](const S* in, S* out) {
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t si = 0; si < s; ++si)
          std::copy_n(in + (bi * s + si) * d + h * hd, hd, out + ((bi * heads + h) * s + si) * hd);
  };
  auto fwd = [tp = &t, id, xid = x.id, map_fwd]() {
    map_fwd(tp->nodes[xid].value.data(), tp->nodes[id].value.data());
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, b, s, d, hd, heads]() {
      const auto& g = tp->nodes[id].grad;
      auto& gx = tp->nodes[xid].grad;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t si = 0; si < s; ++si) {
            const S* src = g.data() + ((bi * heads + h) * s + si) * hd;
            S* dst = gx.data() + (bi * s + si) * d + h * hd;
            for (std::size_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
    };
  }
  return {&t, id};
}

/// inverse of split_heads: (b*H x s x hd) -> (b x s x H*hd)
template <class S>
Tensor<S> merge_heads(Tensor<S> x, std::size_t heads) {
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  if (sx.size() != 3 || sx[0] % heads != 0)
    throw ValidationError("merge_heads: need 3-D with batch axis divisible by " + std::to_string(heads));
  std::size_t b = sx[0] / heads, s = sx[1], hd = sx[2], d = hd * heads;
  bool rg = t.nodes[x.id].requires_grad;
  int id = t.new_node({b, s, d}, {x.id}, rg);
  auto fwd = [tp = &t, id, xid = x.id, b, s, d, hd, heads]() {
    const auto& xv = tp->nodes[xid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t si = 0; si < s; ++si)
          std::copy_n(xv.data() + ((bi * heads + h) * s + si) * hd, hd,
                      out.data() + (bi * s + si) * d + h * hd);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, b, s, d, hd, heads]() {
      const auto& g = tp->nodes[id].grad;
      auto& gx = tp->nodes[xid].grad;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t si = 0; si < s; ++si) {
            const S* src = g.data() + (bi * s + si) * d + h * hd;
            S* dst = gx.data() + ((bi * heads + h) * s + si) * hd;
            for (std::size_t j = 0; j < hd; ++j) dst[j] += src[j];
          }
    };
  }
  return {&t, id};
}

/// concatenate two 3-D tensors along the sequence axis
template <class S>
Tensor<S> concat_seq(Tensor<S> a, Tensor<S> b) {
  detail::check_same_tape(a, b);
  Tape<S>& t = *a.tape;
  const Shape& sa = t.nodes[a.id].shape;
  const Shape& sb = t.nodes[b.id].shape;
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[2])
    throw ValidationError("concat_seq: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  std::size_t bsz = sa[0], s1 = sa[1], s2 = sb[1], d = sa[2];
  bool rg = t.nodes[a.id].requires_grad || t.nodes[b.id].requires_grad;
  int id = t.new_node({bsz, s1 + s2, d}, {a.id, b.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, bid = b.id, bsz, s1, s2, d]() {
    const auto& av = tp->nodes[aid].value;
    const auto& bv = tp->nodes[bid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t bi = 0; bi < bsz; ++bi) {
      std::copy_n(av.data() + bi * s1 * d, s1 * d, out.data() + bi * (s1 + s2) * d);
      std::copy_n(bv.data() + bi * s2 * d, s2 * d, out.data() + bi * (s1 + s2) * d + s1 * d);
    }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, bid = b.id, bsz, s1, s2, d]() {
      const auto& g = tp->nodes[id].grad;
      bool na = tp->nodes[aid].requires_grad, nb = tp->nodes[bid].requires_grad;
      for (std::size_t bi = 0; bi < bsz; ++bi) {
        const S* gr = g.data() + bi * (s1 + s2) * d;
        if (na) {
          S* ga = tp->nodes[aid].grad.data() + bi * s1 * d;
          for (std::size_t i = 0; i < s1 * d; ++i) ga[i] += gr[i];
        }
        if (nb) {
          S* gb = tp->nodes[bid].grad.data() + bi * s2 * d;
          for (std::size_t i = 0; i < s2 * d; ++i) gb[i] += gr[s1 * d + i];
        }
      }
    };
  }
  return {&t, id};
}

/// gather rows along the batch axis: x (b x rest...) -> (|idx| x rest...)
template <class S>
Tensor<S> select_batch(Tensor<S> x, std::vector<std::size_t> idx) {
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  if (sx.empty()) throw ValidationError("select_batch: scalar input");
  std::size_t b = sx[0], stride = numel(sx) / b;
  for (auto i : idx)
    if (i >= b) throw ValidationError("select_batch: index " + std::to_string(i) + " out of range");
  Shape so = sx;
  so[0] = idx.size();
  bool rg = t.nodes[x.id].requires_grad;
  int id = t.new_node(so, {x.id}, rg);
  auto fwd = [tp = &t, id, xid = x.id, idx, stride]() {
    const auto& xv = tp->nodes[xid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy_n(xv.data() + idx[r] * stride, stride, out.data() + r * stride);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, idx, stride]() {
      const auto& g = tp->nodes[id].grad;
      auto& gx = tp->nodes[xid].grad;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        S* dst = gx.data() + idx[r] * stride;
        const S* src = g.data() + r * stride;
        for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
      }
    };
  }
  return {&t, id};
}

/// pick one sequence position: (b x s x d) -> (b x d)
template <class S>
Tensor<S> select_pos(Tensor<S> x, std::size_t pos) {
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  if (sx.size() != 3 || pos >= sx[1])
    throw ValidationError("select_pos: position " + std::to_string(pos) + " invalid for " + shape_str(sx));
  std::size_t b = sx[0], s = sx[1], d = sx[2];
  bool rg = t.nodes[x.id].requires_grad;
  int id = t.new_node({b, d}, {x.id}, rg);
  auto fwd = [tp = &t, id, xid = x.id, b, s, d, pos]() {
    const auto& xv = tp->nodes[xid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t bi = 0; bi < b; ++bi)
      std::copy_n(xv.data() + (bi * s + pos) * d, d, out.data() + bi * d);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, b, s, d, pos]() {
      const auto& g = tp->nodes[id].grad;
      auto& gx = tp->nodes[xid].grad;
      for (std::size_t bi = 0; bi < b; ++bi) {
        S* dst = gx.data() + (bi * s + pos) * d;
        const S* src = g.data() + bi * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return {&t, id};
}

/// mean over unmasked sequence positions: (b x s x d, mask b*s) -> (b x d)
template <class S>
Tensor<S> masked_mean_pool(Tensor<S> x, std::vector<std::uint8_t> mask) {
  Tape<S>& t = *x.tape;
  const Shape& sx = t.nodes[x.id].shape;
  if (sx.size() != 3 || mask.size() != sx[0] * sx[1])
    throw ValidationError("masked_mean_pool: mask size does not match " + shape_str(sx));
  std::size_t b = sx[0], s = sx[1], d = sx[2];
  std::vector<std::size_t> counts(b, 0);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t si = 0; si < s; ++si) counts[bi] += mask[bi * s + si] ? 1 : 0;
    if (counts[bi] == 0)
      throw ValidationError("masked_mean_pool: row " + std::to_string(bi) + " is fully masked");
  }
  bool rg = t.nodes[x.id].requires_grad;
  int id = t.new_node({b, d}, {x.id}, rg);
  auto fwd = [tp = &t, id, xid = x.id, mask, counts, b, s, d]() {
    const auto& xv = tp->nodes[xid].value;
    auto& out = tp->nodes[id].value;
    std::fill(out.begin(), out.end(), S(0));
    for (std::size_t bi = 0; bi < b; ++bi) {
      S* o = out.data() + bi * d;
      for (std::size_t si = 0; si < s; ++si) {
        if (!mask[bi * s + si]) continue;
        const S* xr = xv.data() + (bi * s + si) * d;
        for (std::size_t j = 0; j < d; ++j) o[j] += xr[j];
      }
      S inv = static_cast<S>(1.0 / static_cast<double>(counts[bi]));
      for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
    }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, xid = x.id, mask, counts, b, s, d]() {
      const auto& g = tp->nodes[id].grad;
      auto& gx = tp->nodes[xid].grad;
      for (std::size_t bi = 0; bi < b; ++bi) {
        const S* gr = g.data() + bi * d;
        S inv = static_cast<S>(1.0 / static_cast<double>(counts[bi]));
        for (std::size_t si = 0; si < s; ++si) {
          if (!mask[bi * s + si]) continue;
          S* dst = gx.data() + (bi * s + si) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j] * inv;
        }
      }
    };
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

/// sum of all elements -> scalar. Accumulates in double so strict-mask and
/// dispatch loss paths agree to well under 1e-6.
template <class S>
Tensor<S> sum_all(Tensor<S> a) {
  Tape<S>& t = *a.tape;
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node({1}, {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id]() {
    const auto& av = tp->nodes[aid].value;
    double acc = 0.0;
    for (auto v : av) acc += static_cast<double>(v);
    tp->nodes[id].value[0] = static_cast<S>(acc);
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id]() {
      S g = tp->nodes[id].grad[0];
      auto& ga = tp->nodes[aid].grad;
      for (auto& v : ga) v += g;
    };
  }
  return {&t, id};
}

template <class S>
Tensor<S> mean_all(Tensor<S> a) {
  std::size_t n = numel(a.shape());
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

/// per-sample binary cross entropy: pred and labels are (n,), labels in {0,1}.
/// Predictions are clamped into [eps, 1-eps] before the logs.
template <class S>
Tensor<S> bce_vec(Tensor<S> pred, Tensor<S> labels, double eps = 1e-7) {
  detail::check_same_tape(pred, labels);
  Tape<S>& t = *pred.tape;
  const Shape& sp = t.nodes[pred.id].shape;
  if (sp != t.nodes[labels.id].shape)
    throw ValidationError("bce: prediction shape " + shape_str(sp) + " does not match labels " +
                          shape_str(t.nodes[labels.id].shape));
  for (auto y : t.nodes[labels.id].value)
    if (y != S(0) && y != S(1))
      throw ValidationError("bce: label " + std::to_string(static_cast<double>(y)) + " outside {0,1}");
  bool rg = t.nodes[pred.id].requires_grad;
  int id = t.new_node(sp, {pred.id, labels.id}, rg);
  auto fwd = [tp = &t, id, pid = pred.id, lid = labels.id, eps]() {
    const auto& pv = tp->nodes[pid].value;
    const auto& yv = tp->nodes[lid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double p = std::clamp(static_cast<double>(pv[i]), eps, 1.0 - eps);
      double y = static_cast<double>(yv[i]);
      out[i] = static_cast<S>(-(y * std::log(p) + (1.0 - y) * std::log(1.0 - p)));
    }
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, pid = pred.id, lid = labels.id, eps]() {
      const auto& pv = tp->nodes[pid].value;
      const auto& yv = tp->nodes[lid].value;
      const auto& g = tp->nodes[id].grad;
      auto& gp = tp->nodes[pid].grad;
      for (std::size_t i = 0; i < pv.size(); ++i) {
        double p = static_cast<double>(pv[i]);
        if (p < eps || p > 1.0 - eps) continue;  // clamp region: derivative 0
        double y = static_cast<double>(yv[i]);
        gp[i] += g[i] * static_cast<S>((p - y) / (p * (1.0 - p)));
      }
    };
  }
  return {&t, id};
}

/// mean BCE over the batch -> scalar
template <class S>
Tensor<S> bce_loss(Tensor<S> pred, Tensor<S> labels, double eps = 1e-7) {
  return mean_all(bce_vec(pred, labels, eps));
}

/// inverted dropout. The keep mask is drawn once at record time and stored,
/// so replay() reproduces the pass bit-identically.
template <class S>
Tensor<S> dropout(Tensor<S> a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ValidationError("dropout: rate must be < 1");
  Tape<S>& t = *a.tape;
  std::size_t n = numel(t.nodes[a.id].shape);
  std::vector<S> keep(n);
  S scale_up = static_cast<S>(1.0 / (1.0 - rate));
  for (auto& k : keep) k = rng.uniform() < rate ? S(0) : scale_up;
  bool rg = t.nodes[a.id].requires_grad;
  int id = t.new_node(t.nodes[a.id].shape, {a.id}, rg);
  auto fwd = [tp = &t, id, aid = a.id, keep]() {
    const auto& av = tp->nodes[aid].value;
    auto& out = tp->nodes[id].value;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * keep[i];
  };
  fwd();
  t.nodes[id].forward = fwd;
  if (rg) {
    t.nodes[id].backward = [tp = &t, id, aid = a.id, keep]() {
      const auto& g = tp->nodes[id].grad;
      auto& ga = tp->nodes[aid].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * keep[i];
    };
  }
  return {&t, id};
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Reverse sweep from a scalar loss. Gradients of every reachable
/// requires_grad node are computed exactly; parameters whose leaf is not on
/// the loss path are never touched, so their accumulated gradient stays at
/// exactly zero. Parameter leaves add their node gradient into Param::grad.
template <class S>
void backward(Tensor<S> loss) {
  Tape<S>& t = *loss.tape;
  if (numel(t.nodes[loss.id].shape) != 1)
    throw ValidationError("backward: loss must be scalar, got " + shape_str(t.nodes[loss.id].shape));
  if (!t.nodes[loss.id].requires_grad) return;

  // mark nodes that both reach the loss and carry gradient
  std::vector<std::uint8_t> reach(t.nodes.size(), 0);
  std::vector<int> stack{loss.id};
  reach[loss.id] = 1;
  while (!stack.empty()) {
    int cur = stack.back();
    stack.pop_back();
    for (int p : t.nodes[cur].parents) {
      if (!reach[p] && t.nodes[p].requires_grad) {
        reach[p] = 1;
        stack.push_back(p);
      }
    }
  }
  for (std::size_t i = 0; i < t.nodes.size(); ++i)
    if (reach[i]) t.nodes[i].grad.assign(t.nodes[i].value.size(), S(0));
  t.nodes[loss.id].grad[0] = S(1);
  for (int i = loss.id; i >= 0; --i)
    if (reach[i] && t.nodes[i].backward) t.nodes[i].backward();
  for (const auto& [param, nid] : t.param_nodes()) {
    if (!reach[nid]) continue;
    const auto& g = t.nodes[nid].grad;
    for (std::size_t j = 0; j < g.size(); ++j) param->grad[j] += g[j];
  }
}

}  // namespace mdctr
