// Define-by-run reverse-mode automatic differentiation.
//
// A Tape owns an append-only list of nodes. Every primitive op evaluates its
// forward value eagerly and records a closure that pushes the node's output
// gradient into its parents. Because parents are always recorded before their
// children, reverse id order is a valid topological order and backward()
// visits every node exactly once.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "seqj/tensor.hpp"

namespace seqj::ad {

class Tape;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lightweight handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

class Tape {
 public:
  struct Node {
    const char* op = "leaf";
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Tape() = default;
  /// A tape built with gradients disabled binds parameters as constants, so
  /// no backward closures are recorded (inference).
  explicit Tape(bool gradients) : gradients_(gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) { return push("const", std::move(value), false, {}, nullptr); }
  Var variable(Tensor value) { return push("var", std::move(value), true, {}, nullptr); }

  /// Binds a parameter as a leaf. Repeated binds on one tape share the node.
  Var param(Parameter& p) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
    Var v = push("param", p.value, gradients_, {}, nullptr);
    if (gradients_) nodes_[v.id()].param = &p;
    bound_.emplace(&p, v.id());
    return v;
  }

  /// Records an op node. requires_grad is inherited from the parents.
  Var record(const char* op, Tensor value, std::vector<Var> parents, BackwardFn fn) {
    bool rg = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const Var& p : parents) {
      if (p.tape() != this) throw std::invalid_argument(std::string(op) + ": operand from another tape");
      rg = rg || nodes_[p.id()].requires_grad;
      ids.push_back(p.id());
    }
    return push(op, std::move(value), rg, std::move(ids), rg ? std::move(fn) : BackwardFn{});
  }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first touch.
  Tensor& grad_buffer(const Var& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Gradient of v after backward(); zeros if nothing reached it.
  Tensor grad(const Var& v) const {
    const Node& n = nodes_.at(v.id());
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  /// Runs reverse accumulation from a scalar loss and adds leaf gradients
  /// into every bound Parameter's grad.
  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss from another tape");
    if (loss.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    grad_buffer(loss)[0] += 1.0;
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      Tensor& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape());
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }

  /// Debug mode: every recorded value is checked for NaN/Inf.
  void set_check_finite(bool on) noexcept { check_finite_ = on; }

 private:
  Var push(const char* op, Tensor value, bool rg, std::vector<std::size_t> parents, BackwardFn fn) {
    if (check_finite_) {
      for (double x : value.data()) {
        if (!std::isfinite(x)) {
          throw NonFiniteError(std::string("non-finite value produced by ") + op + " at node " +
                               std::to_string(nodes_.size()));
        }
      }
    }
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  // deque keeps references to node values stable while the tape grows.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> bound_;
  bool check_finite_ = false;
  bool gradients_ = true;
};

inline const Tensor& Var::value() const { return tape_->node(id_).value; }

inline double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw ShapeError("item() on non-scalar " + shape_str(v.shape()));
  return v[0];
}

// ---------------------------------------------------------------------------
// Broadcasting: `small` broadcasts into `big` when it is a single element or
// its shape is a trailing suffix of big's shape. Element i of big then pairs
// with element i % numel(small).

inline bool broadcasts_to(const Shape& small, const Shape& big) {
  if (numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

namespace detail {

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
  if (a.tape() != b.tape() || a.tape() == nullptr) {
    throw std::invalid_argument(std::string(op) + ": operands must share a tape");
  }
}

inline ShapeError incompatible(const char* op, const Shape& a, const Shape& b) {
  return ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Var add(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "add");
  if (a.shape() != b.shape() && !broadcasts_to(b.shape(), a.shape())) {
    if (broadcasts_to(a.shape(), b.shape())) return add(b, a);
    throw detail::incompatible("add", a.shape(), b.shape());
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % nb];
  return a.tape()->record("add", std::move(out), {a, b}, [a, b, nb](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

/// a - b, with b broadcast into a.
inline Var sub(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "sub");
  if (!broadcasts_to(b.shape(), a.shape())) throw detail::incompatible("sub", a.shape(), b.shape());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % nb];
  return a.tape()->record("sub", std::move(out), {a, b}, [a, b, nb](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "mul");
  if (a.shape() != b.shape() && !broadcasts_to(b.shape(), a.shape())) {
    if (broadcasts_to(a.shape(), b.shape())) return mul(b, a);
    throw detail::incompatible("mul", a.shape(), b.shape());
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t nb = bv.size();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % nb];
  return a.tape()->record("mul", std::move(out), {a, b}, [a, b, nb](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i % nb];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i] * av[i];
    }
  });
}

/// scale * x + shift with constant scalars.
inline Var scalar_affine(const Var& x, double scale, double shift) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  return x.tape()->record("scalar_affine", std::move(out), {x}, [x, scale](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
  });
}

inline Var relu(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return x.tape()->record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor& gx = t.grad_buffer(x);
    // Subgradient at exactly 0 is 0.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

inline Var sigmoid(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Tape* tape = x.tape();
  const std::size_t self = tape->size();
  return tape->record("sigmoid", std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    const Tensor& y = t.node(self).value;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Var square(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * xv[i];
  return x.tape()->record("square", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    const Tensor& xv = x.value();
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * xv[i] * g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

inline Var mean(const Var& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape()->record("mean", Tensor::scalar(s / n), {x}, [x, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] / n;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  detail::require_same_tape(a, b, "matmul");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_str(as) + " by " + shape_str(bs));
  }
  const std::size_t m = as[0], k = as[1], n = bs[1];
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return a.tape()->record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.requires_grad(a)) {
      // dA = G * B^T
      Tensor& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &g[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = &bv[p * n];
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
      }
    }
    if (t.requires_grad(b)) {
      // dB = A^T * G
      Tensor& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i) {
        const double* grow = &g[i * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          double* gbrow = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

/// Row-wise softmax over the last dimension, max-shifted for stability.
inline Var softmax_lastdim(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.size() / n;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv[r * n];
    double* o = &out[r * n];
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  Tape* tape = x.tape();
  const std::size_t self = tape->size();
  return tape->record("softmax", std::move(out), {x}, [x, self, n, rows](Tape& t, const Tensor& g) {
    const Tensor& y = t.node(self).value;
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

/// Normalizes the last dimension to zero mean / unit variance, then applies
/// gamma * xhat + beta.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: feature dim " + std::to_string(d) + " vs gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  const std::size_t rows = xv.size() / d;
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv[r * d];
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mu) * is;
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  return x.tape()->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
        const Tensor& gv = gamma.value();
        if (t.requires_grad(x)) {
          Tensor& gx = t.grad_buffer(x);
          const double dn = static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              m1 += gh;
              m2 += gh * xhat[r * d + j];
            }
            m1 /= dn;
            m2 /= dn;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              gx[r * d + j] += inv_std[r] * (gh - m1 - xhat[r * d + j] * m2);
            }
          }
        }
        if (t.requires_grad(gamma)) {
          Tensor& gg = t.grad_buffer(gamma);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (t.requires_grad(beta)) {
          Tensor& gb = t.grad_buffer(beta);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Rearrangements

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape()->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Var transpose_2d(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("transpose_2d: expected rank 2, got " + shape_str(s));
  const std::size_t r = s[0], c = s[1];
  const Tensor& xv = x.value();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return x.tape()->record("transpose", std::move(out), {x}, [x, r, c](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
  });
}

/// out[i] = x[index[i]]; the gradient scatters back. Used for patchify and
/// other fixed permutations.
inline Var gather(const Var& x, std::vector<std::size_t> index, Shape shape) {
  if (numel(shape) != index.size()) {
    throw ShapeError("gather: index length " + std::to_string(index.size()) + " vs shape " + shape_str(shape));
  }
  const Tensor& xv = x.value();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size()) throw std::out_of_range("gather: index out of range");
    out[i] = xv[index[i]];
  }
  return x.tape()->record("gather", std::move(out), {x}, [x, index = std::move(index)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
  });
}

/// Concatenates along the last dimension; leading dims must agree.
inline Var concat_lastdim(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: no operands");
  Shape lead = parts.front().shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    const std::size_t w = s.back();
    s.pop_back();
    if (s != lead) throw detail::incompatible("concat_lastdim", parts.front().shape(), p.shape());
    widths.push_back(w);
    total += w;
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + off + j] = pv[r * widths[k] + j];
    off += widths[k];
  }
  return parts.front().tape()->record("concat_lastdim", std::move(out), parts,
                                      [parts, widths, rows, total](Tape& t, const Tensor& g) {
                                        std::size_t off = 0;
                                        for (std::size_t k = 0; k < parts.size(); ++k) {
                                          if (t.requires_grad(parts[k])) {
                                            Tensor& gp = t.grad_buffer(parts[k]);
                                            for (std::size_t r = 0; r < rows; ++r)
                                              for (std::size_t j = 0; j < widths[k]; ++j)
                                                gp[r * widths[k] + j] += g[r * total + off + j];
                                          }
                                          off += widths[k];
                                        }
                                      });
}

/// Columns [begin, begin + width) of the last dimension.
inline Var slice_lastdim(const Var& x, std::size_t begin, std::size_t width) {
  const Shape& s = x.shape();
  const std::size_t total = s.back();
  if (width == 0 || begin + width > total) {
    throw ShapeError("slice_lastdim: range [" + std::to_string(begin) + "," + std::to_string(begin + width) +
                     ") outside " + shape_str(s));
  }
  const std::size_t rows = x.size() / total;
  Shape os = s;
  os.back() = width;
  const Tensor& xv = x.value();
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = xv[r * total + begin + j];
  return x.tape()->record("slice_lastdim", std::move(out), {x},
                          [x, begin, width, total, rows](Tape& t, const Tensor& g) {
                            Tensor& gx = t.grad_buffer(x);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < width; ++j) gx[r * total + begin + j] += g[r * width + j];
                          });
}

/// Splits the last dimension into consecutive pieces of the given widths.
inline std::vector<Var> split_lastdim(const Var& x, const std::vector<std::size_t>& widths) {
  std::size_t total = 0;
  for (std::size_t w : widths) total += w;
  if (total != x.shape().back()) {
    throw ShapeError("split_lastdim: widths sum to " + std::to_string(total) + " but last dim of " +
                     shape_str(x.shape()) + " differs");
  }
  std::vector<Var> out;
  std::size_t off = 0;
  for (std::size_t w : widths) {
    out.push_back(slice_lastdim(x, off, w));
    off += w;
  }
  return out;
}

/// Leading-dimension slice [begin, begin + count).
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (count == 0 || begin + count > s[0]) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + shape_str(s));
  }
  const std::size_t stride = x.size() / s[0];
  Shape os = s;
  os[0] = count;
  const Tensor& xv = x.value();
  Tensor out(os);
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
            xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * stride), out.data().begin());
  const std::size_t off = begin * stride;
  return x.tape()->record("slice_rows", std::move(out), {x}, [x, off](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

/// Concatenates along the leading dimension; trailing dims must agree.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no operands");
  Shape tail(parts.front().shape().begin() + 1, parts.front().shape().end());
  std::size_t rows = 0;
  for (const Var& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (pt != tail) throw detail::incompatible("concat_rows", parts.front().shape(), p.shape());
    rows += p.shape()[0];
  }
  Shape os = parts.front().shape();
  os[0] = rows;
  Tensor out(os);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  return parts.front().tape()->record("concat_rows", std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const Var& p : parts) {
      const std::size_t n = p.size();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_buffer(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference checking

struct GradCheckResult {
  /// max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf, 1e-6)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

namespace detail {

inline void fold_error(GradCheckResult& r, const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double scale = 1e-6;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double e = std::abs(analytic[i] - numeric[i]);
    if (e > r.max_abs_error) {
      r.max_abs_error = e;
      r.worst_index = i;
    }
  }
  r.max_rel_error = r.max_abs_error / scale;
  r.coordinates = analytic.size();
}

}  // namespace detail

/// Compares the tape gradient of a scalar function f(tape, x) against central
/// differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps.
template <class F>
GradCheckResult grad_check(F&& f, const Tensor& x, double eps = 1e-5) {
  std::vector<double> analytic;
  {
    Tape tape;
    Var xv = tape.variable(x);
    Var y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad(xv).values();
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    return f(tape, tape.variable(at)).item();
  };
  std::vector<double> numeric(x.size());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    probe[i] = orig - eps;
    const double fm = eval(probe);
    probe[i] = orig;
    numeric[i] = (fp - fm) / (2.0 * eps);
  }
  GradCheckResult r;
  detail::fold_error(r, analytic, numeric);
  return r;
}

/// Same comparison over every coordinate of a set of parameters. f must bind
/// the parameters through tape.param() and return a scalar.
template <class F>
GradCheckResult grad_check_params(F&& f, const std::vector<Parameter*>& params, double eps = 1e-5) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var y = f(tape);
    tape.backward(y);
  }
  std::vector<double> analytic;
  for (Parameter* p : params) analytic.insert(analytic.end(), p->grad.data().begin(), p->grad.data().end());
  auto eval = [&] {
    Tape tape;
    return f(tape).item();
  };
  std::vector<double> numeric;
  numeric.reserve(analytic.size());
  for (Parameter* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double fp = eval();
      p->value[i] = orig - eps;
      const double fm = eval();
      p->value[i] = orig;
      numeric.push_back((fp - fm) / (2.0 * eps));
    }
  }
  GradCheckResult r;
  detail::fold_error(r, analytic, numeric);
  return r;
}

}  // namespace seqj::ad
