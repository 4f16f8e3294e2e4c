#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "covidfact/tensor.hpp"

namespace covidfact {

class Graph;

// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Smoothing term used in the backward of Euclidean norms so that the gradient
// at the zero vector stays finite.
inline constexpr double kNormBackwardEpsilon = 1e-9;

// Computation record for reverse-mode differentiation.
//
// Nodes are appended in creation order, which is a topological order, so
// backward() is a single reverse sweep. Node storage is a deque: references
// to existing values stay valid while new nodes are emitted.
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t out)>;

  // With trainable_parameters == false, parameter() nodes are constants:
  // gradients stop at them and Parameter::grad is left untouched.
  explicit Graph(bool record = true, bool trainable_parameters = true)
      : record_(record), train_params_(trainable_parameters) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor t) { return push(std::move(t), false, nullptr); }
  Var input(Tensor t) { return push(std::move(t), record_, nullptr); }
  Var parameter(Parameter& p) {
    return train_params_ ? push(p.value, record_, &p) : push(p.value, false, nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool has_grad(Var v) const { return nodes_.at(v.id).has_grad; }

  const Tensor& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (!n.has_grad) throw Error("no gradient recorded for node " + std::to_string(v.id));
    return n.grad;
  }

  // Gradient accumulator for a node, zero-initialised on first access.
  Tensor& grad_ref(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor::zeros_like(n.value);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Appends an op output. `bw` is kept only when recording and some input
  // requires a gradient.
  Var emit(std::string_view op, Tensor value, std::initializer_list<Var> inputs, Backward bw) {
    return emit(op, std::move(value), std::vector<Var>(inputs), std::move(bw));
  }
  Var emit(std::string_view op, Tensor value, const std::vector<Var>& inputs, Backward bw) {
    if (!value.all_finite()) throw NumericError("non-finite value produced by " + std::string(op));
    bool rg = false;
    for (const Var& v : inputs) {
      if (v.graph != this) throw Error(std::string(op) + ": input belongs to a different graph");
      rg = rg || nodes_[v.id].requires_grad;
    }
    Var out = push(std::move(value), record_ && rg, nullptr);
    if (record_ && rg) nodes_[out.id].backward = std::move(bw);
    return out;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the record in reverse. Parameter
  // gradients are accumulated into Parameter::grad.
  void backward(Var loss) {
    if (loss.value().size() != 1)
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (!nodes_[loss.id].requires_grad) return;
    grad_ref(loss.id).fill(1.0);
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backward) n.backward(*this, id);
    }
    for (Node& n : nodes_)
      if (n.param && n.has_grad) n.param->grad += n.grad;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  Var push(Tensor t, bool rg, Parameter* p) {
    nodes_.push_back(Node{std::move(t), {}, rg, false, {}, p});
    return Var{this, nodes_.size() - 1};
  }

  bool record_;
  bool train_params_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape r;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) r.push_back(s[i]);
  if (r.empty()) r.push_back(1);
  return r;
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// C[m,n] += A[m,k] * B[k,n], all row-major.
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
                    double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor y = a.value();
  y += b.value();
  return a.graph->emit("add", std::move(y), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    if (g.requires_grad(a)) g.grad_ref(a) += gy;
    if (g.requires_grad(b)) g.grad_ref(b) += gy;
  });
}

inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  return a.graph->emit("mul", std::move(y), {a, b}, [a = a.id, b = b.id](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    if (g.requires_grad(a)) {
      const Tensor& zv = g.value(b);
      Tensor& ga = g.grad_ref(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * zv[i];
    }
    if (g.requires_grad(b)) {
      const Tensor& xv = g.value(a);
      Tensor& gb = g.grad_ref(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * xv[i];
    }
  });
}

inline Var scale(Var a, double s) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= s;
  return a.graph->emit("scale", std::move(y), {a}, [a = a.id, s](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * gy[i];
  });
}

inline Var relu(Var a) {
  Tensor y = a.value();
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return a.graph->emit("relu", std::move(y), {a}, [a = a.id](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& x = g.value(a);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (x[i] > 0.0) ga[i] += gy[i];
  });
}

inline Var matmul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.rank() != 2 || z.rank() != 2 || x.dim(1) != z.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(z.shape()));
  const std::size_t m = x.dim(0), k = x.dim(1), n = z.dim(1);
  Tensor y({m, n});
  detail::gemm_nn(m, k, n, x.data().data(), z.data().data(), y.data().data());
  return a.graph->emit("matmul", std::move(y), {a, b}, [a = a.id, b = b.id, m, k, n](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    if (g.requires_grad(a))
      detail::gemm_nt(m, n, k, gy.data().data(), g.value(b).data().data(), g.grad_ref(a).data().data());
    if (g.requires_grad(b))
      detail::gemm_tn(k, m, n, g.value(a).data().data(), gy.data().data(), g.grad_ref(b).data().data());
  });
}

// Numerically stable softmax along `axis` (max subtracted before exp).
inline Var softmax(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < n; ++k) sum += (y[base + k * inner] = std::exp(x[base + k * inner] - mx));
      for (std::size_t k = 0; k < n; ++k) y[base + k * inner] /= sum;
    }
  return a.graph->emit("softmax", std::move(y), {a}, [a = a.id, outer, n, inner](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& yv = g.value(out);
    Tensor& ga = g.grad_ref(a);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += gy[base + k * inner] * yv[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          ga[i] += yv[i] * (gy[i] - dot);
        }
      }
  });
}

// Euclidean norm along `axis`, which is removed from the shape. The forward
// value is sqrt(sum x^2 + epsilon); the backward uses at least
// kNormBackwardEpsilon inside the root.
inline Var vector_norm(Var a, std::size_t axis, double epsilon = 0.0) {
  if (epsilon < 0.0) throw Error("vector_norm: epsilon must be non-negative");
  const Tensor& x = a.value();
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor y(detail::drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      double ss = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double v = x[o * n * inner + k * inner + in];
        ss += v * v;
      }
      y[o * inner + in] = std::sqrt(ss + epsilon);
    }
  return a.graph->emit("vector_norm", std::move(y), {a},
                       [a = a.id, outer, n, inner, epsilon](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& xv = g.value(a);
    Tensor& ga = g.grad_ref(a);
    const double eps = std::max(epsilon, kNormBackwardEpsilon);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        double ss = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double v = xv[o * n * inner + k * inner + in];
          ss += v * v;
        }
        const double s = gy[o * inner + in] / std::sqrt(ss + eps);
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = o * n * inner + k * inner + in;
          ga[i] += s * xv[i];
        }
      }
  });
}

inline Var reduce_sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->emit("reduce_sum", Tensor::scalar(s), {a}, [a = a.id](Graph& g, std::size_t out) {
    const double gy = g.grad(Var{&g, out})[0];
    for (auto& v : g.grad_ref(a).data()) v += gy;
  });
}

inline Var reduce_sum(Var a, std::size_t axis) {
  const Tensor& x = a.value();
  const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
  Tensor y(detail::drop_axis(x.shape(), axis));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t in = 0; in < inner; ++in) y[o * inner + in] += x[(o * n + k) * inner + in];
  return a.graph->emit("reduce_sum", std::move(y), {a}, [a = a.id, outer, n, inner](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    Tensor& ga = g.grad_ref(a);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t in = 0; in < inner; ++in) ga[(o * n + k) * inner + in] += gy[o * inner + in];
  });
}

inline Var reduce_mean(Var a) { return scale(reduce_sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(Var a, Shape shape) {
  if (shape_size(shape) != a.value().size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor y = a.value().reshaped(std::move(shape));
  return a.graph->emit("reshape", std::move(y), {a}, [a = a.id](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    Tensor& ga = g.grad_ref(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != shape[i])
        throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(shape));
    total += s[axis];
  }
  shape[axis] = total;
  const auto split = detail::split_axis(shape, axis);
  Tensor y(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t n = x.dim(axis);
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(x.data().begin() + o * n * split.inner, n * split.inner,
                  y.data().begin() + (o * total + off) * split.inner);
    offsets.push_back(off);
    off += n;
  }
  std::vector<std::size_t> ids, widths;
  for (const Var& p : parts) {
    ids.push_back(p.id);
    widths.push_back(p.value().dim(axis));
  }
  Graph* graph = parts[0].graph;
  return graph->emit("concat", std::move(y), parts,
                     [ids, widths, offsets, split, total](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!g.requires_grad(ids[p])) continue;
      Tensor& gp = g.grad_ref(ids[p]);
      const std::size_t n = widths[p];
      for (std::size_t o = 0; o < split.outer; ++o)
        for (std::size_t i = 0; i < n * split.inner; ++i)
          gp[o * n * split.inner + i] += gy[(o * total + offsets[p]) * split.inner + i];
    }
  });
}

// Central-difference gradient of a scalar function. Test oracle only.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                     double h = 1e-5) {
  if (!(h > 0.0)) throw Error("finite_difference_grad: step must be positive");
  Tensor grad = Tensor::zeros_like(x);
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Adapter for functions written against the graph API: builds a fresh
// non-recording graph per evaluation and checks the output is scalar.
inline std::function<double(const Tensor&)> scalar_fn(std::function<Var(Graph&, Var)> build) {
  return [build = std::move(build)](const Tensor& t) {
    Graph g(false);
    Var y = build(g, g.constant(t));
    if (y.value().size() != 1) throw DimensionError("finite_difference_grad: function output is not scalar");
    return y.value()[0];
  };
}

}  // namespace covidfact
