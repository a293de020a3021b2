#pragma once

// Tape-based reverse-mode differentiation over 2-D tensors.
//
// Every op appends a node holding its forward value and a closure that
// pushes the node's gradient into its parents. Shapes must match exactly;
// the only broadcast is bias-add of a 1 x n row over the leading dimension.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "covtpp/errors.hpp"
#include "covtpp/param_store.hpp"
#include "covtpp/tensor.hpp"

namespace covtpp {

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

enum class TopoOrder {
  reverse_tape,  // reverse insertion order
  depth_first,   // reversed DFS post-order from the loss
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  explicit Tape(ParamStore& store) : store_(&store) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, "constant", false); }

  /// Leaf bound to a ParamStore entry; repeated lookups return the same node.
  Var param(const std::string& name) {
    if (store_ == nullptr) throw std::logic_error("tape has no parameter store");
    if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
    Parameter& p = store_->at(name);
    Var v = push(p.value, {}, nullptr, name.c_str(), true);
    nodes_[v.id].param = &p;
    param_nodes_.emplace(name, v.id);
    return v;
  }

  /// Appends a node. Throws NumericalError if the value is not finite.
  Var push(Tensor value, std::vector<std::size_t> parents, Backward backward, const char* op,
           bool leaf_requires_grad = false) {
    if (!value.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
    bool needs = leaf_requires_grad;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = needs ? std::move(backward) : nullptr;
    n.op = op;
    n.requires_grad = needs;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size() || !n.grad.same_shape(n.value)) n.grad = Tensor(n.value.rows(), n.value.cols());
    return n.grad;
  }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and accumulates into every parameter's grad slot.
  void backward(Var loss, TopoOrder order = TopoOrder::reverse_tape) {
    if (loss.value().size() != 1) throw ShapeError("backward() needs a scalar loss, got " + loss.value().shape_string());
    if (!std::isfinite(loss.value().item())) throw NumericalError("non-finite loss at " + nodes_[loss.id].op);
    for (auto& n : nodes_) n.grad = Tensor();
    grad(loss.id)[0] = 1.0;
    for (std::size_t id : ordering(loss.id, order)) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param != nullptr) {
        auto& dst = n.param->grad.values();
        const auto& src = n.grad.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
  }

  /// True when gradients flow into node `id`.
  bool wants_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Smallest |input| seen by a ReLU on this tape (kink distance for gradient checks).
  double min_kink_margin() const { return kink_margin_; }
  void note_kink_margin(double m) { kink_margin_ = std::min(kink_margin_, m); }

  /// Training-mode flag consumed by dropout.
  bool training = false;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    std::string op;
    bool requires_grad = false;
    Parameter* param = nullptr;
  };

  std::vector<std::size_t> ordering(std::size_t root, TopoOrder order) const {
    std::vector<std::size_t> out;
    if (order == TopoOrder::reverse_tape) {
      out.reserve(root + 1);
      for (std::size_t i = root + 1; i-- > 0;) out.push_back(i);
      return out;
    }
    // Iterative DFS post-order; parents visited last-to-first so the order
    // differs from insertion order whenever a node has several parents.
    std::vector<unsigned char> state(nodes_.size(), 0);
    std::vector<std::pair<std::size_t, std::size_t>> stack{{root, 0}};
    state[root] = 1;
    while (!stack.empty()) {
      auto& [id, next] = stack.back();
      const auto& ps = nodes_[id].parents;
      if (next < ps.size()) {
        std::size_t p = ps[ps.size() - 1 - next];
        ++next;
        if (state[p] == 0) {
          state[p] = 1;
          stack.emplace_back(p, 0);
        }
      } else {
        out.push_back(id);
        stack.pop_back();
      }
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  std::vector<Node> nodes_;
  ParamStore* store_ = nullptr;
  std::unordered_map<std::string, std::size_t> param_nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

inline const Tensor& Var::value() const { return tape->value(id); }
inline const Tensor& Var::grad() const { return tape->grad(id); }

namespace detail {
inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw std::logic_error("vars belong to different tapes");
  return *a.tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise and linear-algebra primitives
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) throw ShapeError("matmul: " + av.shape_string() + " * " + bv.shape_string());
  Tensor out(av.rows(), bv.cols());
  kernels::gemm_nn(av, bv, out);
  return t.push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad(a);
      kernels::gemm_nt(g, t.value(b), ga);
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad(b);
      kernels::gemm_tn(t.value(a), g, gb);
    }
  }, "matmul");
}

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] += bv[i];
  return t.push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    for (auto p : {a, b}) {
      if (!t.wants_grad(p)) continue;
      Tensor& gp = t.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  }, "add");
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] -= bv[i];
  return t.push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  }, "sub");
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const auto& bv = b.value().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out[i] *= bv[i];
  return t.push(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  }, "mul");
}

/// a + bias, with a 1 x n bias row repeated over every row of a.
inline Var add_bias(Var a, Var bias) {
  Tape& t = detail::same_tape(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != av.cols()) {
    throw ShapeError("add_bias: " + av.shape_string() + " + " + bv.shape_string());
  }
  Tensor out = av;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += bv[c];
  return t.push(std::move(out), {a.id, bias.id}, [a = a.id, b = bias.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.wants_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.wants_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  }, "add_bias");
}

inline Var scale(Var a, double k) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= k;
  return a.tape->push(std::move(out), {a.id}, [a = a.id, k](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
  }, "scale");
}

inline Var relu(Var a) {
  Tensor out = a.value();
  double margin = std::numeric_limits<double>::infinity();
  for (auto& v : out.values()) {
    margin = std::min(margin, std::abs(v));
    if (v < 0.0) v = 0.0;
  }
  a.tape->note_kink_margin(margin);
  // Gradient at exactly 0 is 0.
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  }, "relu");
}

inline Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  }, "exp");
}

inline Var log(Var a) {
  Tensor out = a.value();
  for (auto& v : out.values()) {
    if (!(v > 0.0)) throw NumericalError("log of non-positive value");
    v = std::log(v);
  }
  return a.tape->push(std::move(out), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  }, "log");
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->push(Tensor::scalar(s), {a.id}, [a = a.id](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& ga = t.grad(a);
    for (auto& v : ga.values()) v += g;
  }, "sum");
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

/// Column-wise concatenation of tensors with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape != &t) throw std::logic_error("vars belong to different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(v.row_span(r).begin(), v.row_span(r).end(), out.row_span(r).begin() + static_cast<std::ptrdiff_t>(off));
    off += v.cols();
  }
  return t.push(std::move(out), ids, [ids](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (auto id : ids) {
      const std::size_t c = t.value(id).cols();
      if (t.wants_grad(id)) {
        Tensor& gp = t.grad(id);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t j = 0; j < c; ++j) gp(r, j) += g(r, off + j);
      }
      off += c;
    }
  }, "concat_cols");
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

/// Row-wise softmax restricted to unmasked entries; masked entries are exactly 0.
inline Tensor masked_softmax_values(const Tensor& logits, const Mask& mask) {
  if (mask.rows != logits.rows() || mask.cols != logits.cols()) {
    throw ShapeError("masked_softmax: mask shape does not match logits " + logits.shape_string());
  }
  Tensor out(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < logits.cols(); ++c)
      if (mask(r, c)) mx = std::max(mx, logits(r, c));
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("masked_softmax: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      if (!mask(r, c)) continue;
      const double e = std::exp(logits(r, c) - mx);
      out(r, c) = e;
      z += e;
    }
    for (std::size_t c = 0; c < logits.cols(); ++c) out(r, c) /= z;
  }
  return out;
}

inline Var masked_softmax(Var logits, const Mask& mask) {
  Tensor out = masked_softmax_values(logits.value(), mask);
  return logits.tape->push(std::move(out), {logits.id}, [a = logits.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += y(r, c) * g(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  }, "masked_softmax");
}

inline Var softmax(Var logits) { return masked_softmax(logits, Mask(logits.rows(), logits.cols(), true)); }

/// Per-row -log softmax(logits)[label]; rows with row_mask false contribute 0.
/// Returns a rows x 1 column.
inline Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels,
                                 const std::vector<unsigned char>& row_mask) {
  const Tensor& x = logits.value();
  if (labels.size() != x.rows() || row_mask.size() != x.rows()) throw ShapeError("softmax_cross_entropy: label count");
  Tensor probs(x.rows(), x.cols());
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (!row_mask[r]) continue;
    if (labels[r] >= x.cols()) throw DataError("label " + std::to_string(labels[r]) + " out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x.row_span(r)) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) z += std::exp(x(r, c) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < x.cols(); ++c) probs(r, c) = std::exp(x(r, c) - lse);
    out[r] = lse - x(r, labels[r]);
  }
  return logits.tape->push(std::move(out), {logits.id},
                           [a = logits.id, probs = std::move(probs), labels, row_mask](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      if (!row_mask[r]) continue;
      for (std::size_t c = 0; c < probs.cols(); ++c)
        ga(r, c) += g[r] * (probs(r, c) - (c == labels[r] ? 1.0 : 0.0));
    }
  }, "softmax_cross_entropy");
}

// ---------------------------------------------------------------------------
// Normalization, lookup, dropout
// ---------------------------------------------------------------------------

inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(n));
  }
  Tensor xhat(xv.rows(), n);
  std::vector<double> inv_std(xv.rows());
  Tensor out(xv.rows(), n);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mu = 0.0;
    for (double v : xv.row_span(r)) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : xv.row_span(r)) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * inv_std[r];
      out(r, c) = gain.value()[c] * xhat(r, c) + bias.value()[c];
    }
  }
  return t.push(std::move(out), {x.id, gain.id, bias.id},
                [xi = x.id, gi = gain.id, bi = bias.id, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& gv = t.value(gi);
    const std::size_t n = g.cols();
    if (t.wants_grad(gi) || t.wants_grad(bi)) {
      Tensor& gg = t.grad(gi);
      Tensor& gb = t.grad(bi);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) {
          gg[c] += g(r, c) * xhat(r, c);
          gb[c] += g(r, c);
        }
    }
    if (t.wants_grad(xi)) {
      Tensor& gx = t.grad(xi);
      std::vector<double> dxhat(n);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dxhat[c] = g(r, c) * gv[c];
          m1 += dxhat[c];
          m2 += dxhat[c] * xhat(r, c);
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) gx(r, c) += inv_std[r] * (dxhat[c] - m1 - xhat(r, c) * m2);
      }
    }
  }, "layer_norm");
}

/// Row lookup: out[i] = table[index[i]].
inline Var gather_rows(Var table, const std::vector<std::size_t>& index) {
  const Tensor& tv = table.value();
  Tensor out(index.size(), tv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= tv.rows()) {
      throw DataError("index " + std::to_string(index[i]) + " out of range for table with " +
                      std::to_string(tv.rows()) + " rows");
    }
    std::copy(tv.row_span(index[i]).begin(), tv.row_span(index[i]).end(), out.row_span(i).begin());
  }
  return table.tape->push(std::move(out), {table.id}, [a = table.id, index](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(index[i], c) += g(i, c);
  }, "gather_rows");
}

/// Inverted dropout; identity unless the tape is in training mode and p > 0.
template <class Rng>
Var dropout(Var x, double p, Rng& rng) {
  if (!x.tape->training || p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Tensor mask(x.rows(), x.cols());
  for (auto& m : mask.values()) m = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->push(std::move(out), {x.id}, [a = x.id, mask = std::move(mask)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  }, "dropout");
}

// ---------------------------------------------------------------------------
// Block-diagonal batched products. A batch of B padded sequences of length
// `block` is stacked into B*block rows; these ops multiply within each block.
// ---------------------------------------------------------------------------

/// out[b*block + i, j] = <q[b*block + i], k[b*block + j]>; shape (B*block) x block.
inline Var block_matmul_nt(Var q, Var k, std::size_t block) {
  Tape& t = detail::same_tape(q, k);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  if (!qv.same_shape(kv) || block == 0 || qv.rows() % block != 0) {
    throw ShapeError("block_matmul_nt: " + qv.shape_string() + " vs " + kv.shape_string());
  }
  const std::size_t d = qv.cols();
  Tensor out(qv.rows(), block);
  for (std::size_t base = 0; base < qv.rows(); base += block)
    for (std::size_t i = 0; i < block; ++i) {
      const double* qi = qv.data() + (base + i) * d;
      for (std::size_t j = 0; j < block; ++j) {
        const double* kj = kv.data() + (base + j) * d;
        double s = 0.0;
        for (std::size_t p = 0; p < d; ++p) s += qi[p] * kj[p];
        out(base + i, j) = s;
      }
    }
  return t.push(std::move(out), {q.id, k.id}, [qi = q.id, ki = k.id, block](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& qv = t.value(qi);
    const Tensor& kv = t.value(ki);
    const std::size_t d = qv.cols();
    const bool gq = t.wants_grad(qi), gk = t.wants_grad(ki);
    Tensor* dq = gq ? &t.grad(qi) : nullptr;
    Tensor* dk = gk ? &t.grad(ki) : nullptr;
    for (std::size_t base = 0; base < qv.rows(); base += block)
      for (std::size_t i = 0; i < block; ++i)
        for (std::size_t j = 0; j < block; ++j) {
          const double gij = g(base + i, j);
          if (gij == 0.0) continue;
          if (gq) {
            double* o = dq->data() + (base + i) * d;
            const double* kj = kv.data() + (base + j) * d;
            for (std::size_t p = 0; p < d; ++p) o[p] += gij * kj[p];
          }
          if (gk) {
            double* o = dk->data() + (base + j) * d;
            const double* qrow = qv.data() + (base + i) * d;
            for (std::size_t p = 0; p < d; ++p) o[p] += gij * qrow[p];
          }
        }
  }, "block_matmul_nt");
}

/// out[b*block + i] = sum_j w[b*block + i, j] * v[b*block + j]; shape (B*block) x v.cols.
inline Var block_matmul(Var w, Var v, std::size_t block) {
  Tape& t = detail::same_tape(w, v);
  const Tensor& wv = w.value();
  const Tensor& vv = v.value();
  if (wv.cols() != block || wv.rows() != vv.rows() || block == 0 || vv.rows() % block != 0) {
    throw ShapeError("block_matmul: " + wv.shape_string() + " vs " + vv.shape_string());
  }
  const std::size_t d = vv.cols();
  Tensor out(vv.rows(), d);
  for (std::size_t base = 0; base < vv.rows(); base += block)
    for (std::size_t i = 0; i < block; ++i) {
      double* o = out.data() + (base + i) * d;
      for (std::size_t j = 0; j < block; ++j) {
        const double a = wv(base + i, j);
        if (a == 0.0) continue;
        const double* vj = vv.data() + (base + j) * d;
        for (std::size_t p = 0; p < d; ++p) o[p] += a * vj[p];
      }
    }
  return t.push(std::move(out), {w.id, v.id}, [wi = w.id, vi = v.id, block](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& wv = t.value(wi);
    const Tensor& vv = t.value(vi);
    const std::size_t d = vv.cols();
    const bool gw = t.wants_grad(wi), gv = t.wants_grad(vi);
    Tensor* dw = gw ? &t.grad(wi) : nullptr;
    Tensor* dv = gv ? &t.grad(vi) : nullptr;
    for (std::size_t base = 0; base < vv.rows(); base += block)
      for (std::size_t i = 0; i < block; ++i) {
        const double* gi = g.data() + (base + i) * d;
        for (std::size_t j = 0; j < block; ++j) {
          const double* vj = vv.data() + (base + j) * d;
          if (gw) {
            double s = 0.0;
            for (std::size_t p = 0; p < d; ++p) s += gi[p] * vj[p];
            (*dw)(base + i, j) += s;
          }
          if (gv) {
            const double a = wv(base + i, j);
            if (a == 0.0) continue;
            double* o = dv->data() + (base + j) * d;
            for (std::size_t p = 0; p < d; ++p) o[p] += a * gi[p];
          }
        }
      }
  }, "block_matmul");
}

/// Shifts rows down by one inside each block. Row 0 of every block becomes
/// `first` (a 1 x cols row) or zeros when `first` is absent.
inline Var shift_rows(Var x, std::size_t block, std::optional<Var> first = std::nullopt) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (block == 0 || xv.rows() % block != 0) throw ShapeError("shift_rows: rows not a multiple of block");
  if (first && (first->rows() != 1 || first->cols() != xv.cols())) throw ShapeError("shift_rows: bad first row");
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t base = 0; base < xv.rows(); base += block) {
    if (first) std::copy(first->value().values().begin(), first->value().values().end(), out.row_span(base).begin());
    for (std::size_t i = 1; i < block; ++i)
      std::copy(xv.row_span(base + i - 1).begin(), xv.row_span(base + i - 1).end(), out.row_span(base + i).begin());
  }
  std::vector<std::size_t> parents{x.id};
  if (first) parents.push_back(first->id);
  const std::size_t fid = first ? first->id : x.id;
  const bool has_first = first.has_value();
  return t.push(std::move(out), parents, [xi = x.id, fid, has_first, block](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const std::size_t cols = g.cols();
    if (t.wants_grad(xi)) {
      Tensor& gx = t.grad(xi);
      for (std::size_t base = 0; base < g.rows(); base += block)
        for (std::size_t i = 1; i < block; ++i)
          for (std::size_t c = 0; c < cols; ++c) gx(base + i - 1, c) += g(base + i, c);
    }
    if (has_first && t.wants_grad(fid)) {
      Tensor& gf = t.grad(fid);
      for (std::size_t base = 0; base < g.rows(); base += block)
        for (std::size_t c = 0; c < cols; ++c) gf[c] += g(base, c);
    }
  }, "shift_rows");
}

// ---------------------------------------------------------------------------
// Driving a forward/backward pass
// ---------------------------------------------------------------------------

/// Zeroes gradients, builds the graph with `build(tape)`, and back-propagates
/// the returned scalar into the store. Returns the loss value.
template <class Build>
double forward_backward(ParamStore& store, Build&& build, TopoOrder order = TopoOrder::reverse_tape) {
  store.zero_grad();
  Tape tape(store);
  Var loss = build(tape);
  if (loss.value().size() != 1) throw ShapeError("loss must be scalar");
  const double value = loss.value().item();
  if (!std::isfinite(value)) throw NumericalError("non-finite loss from " + tape.op_name(loss.id));
  tape.backward(loss, order);
  return value;
}

}  // namespace covtpp
