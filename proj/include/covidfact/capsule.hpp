#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "covidfact/autograd.hpp"

namespace covidfact {

struct CapsuleLayerSpec {
  std::size_t num_in = 0;
  std::size_t dim_in = 0;
  std::size_t num_out = 0;
  std::size_t dim_out = 0;
  int routing_iters = 3;

  Shape weight_shape() const { return {num_in, num_out, dim_in, dim_out}; }
};

// Transformation matrices W[i,j] (dim_in x dim_out) for every input/output
// capsule pair.
struct CapsuleLayer {
  CapsuleLayerSpec spec;
  Parameter weights;

  // Uniform(-a, a) with a = sqrt(3 / dim_in), i.e. unit variance per vote
  // component for unit-variance inputs.
  static CapsuleLayer make(const std::string& name, const CapsuleLayerSpec& spec, Rng& rng) {
    if (spec.routing_iters < 1) throw ConfigError("capsule layer " + name + ": routing_iters must be >= 1");
    if (!spec.num_in || !spec.dim_in || !spec.num_out || !spec.dim_out)
      throw ConfigError("capsule layer " + name + ": all capsule counts and dimensions must be positive");
    const double a = std::sqrt(3.0 / static_cast<double>(spec.dim_in));
    return CapsuleLayer{spec, Parameter(name + ".W", rng.uniform_tensor(spec.weight_shape(), -a, a))};
  }
};

struct MarginLossParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda = 0.5;

  void validate() const {
    if (!(0.0 <= m_minus && m_minus < m_plus && m_plus <= 1.0))
      throw ConfigError("margin loss needs 0 <= m_minus < m_plus <= 1");
    if (!(lambda > 0.0)) throw ConfigError("margin loss lambda must be positive");
  }
};

// v = (|s|^2 / (1 + |s|^2)) * s / |s|, written as s * |s| / (1 + |s|^2) so
// the zero vector maps to zero without a division. Acts on the last axis.
inline Var squash(Var s) {
  const Tensor& x = s.value();
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) ss += x[r * d + k] * x[r * d + k];
    const double f = std::sqrt(ss) / (1.0 + ss);
    for (std::size_t k = 0; k < d; ++k) y[r * d + k] = x[r * d + k] * f;
  }
  return s.graph->emit("squash", std::move(y), {s}, [si = s.id, rows, d](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& x = g.value(si);
    Tensor& gx = g.grad_ref(si);
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0.0, dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        ss += x[r * d + k] * x[r * d + k];
        dot += x[r * d + k] * gy[r * d + k];
      }
      const double n = std::sqrt(ss);
      const double f = n / (1.0 + ss);
      // f'(n) / n with the norm smoothed in the denominator
      const double df_over_n = (1.0 - ss) / ((1.0 + ss) * (1.0 + ss)) / std::sqrt(ss + kNormBackwardEpsilon);
      for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += gy[r * d + k] * f + x[r * d + k] * df_over_n * dot;
    }
  });
}

// votes[n,i,j,:] = u[n,i,:] * W[i,j]   (u as a row vector, W is dim_in x dim_out)
inline Var predict_votes(Var u, Var w) {
  const Shape& us = u.shape();
  const Shape& ws = w.shape();
  if (us.size() != 3 || ws.size() != 4 || us[1] != ws[0] || us[2] != ws[2])
    throw DimensionError("predict_votes: u " + shape_str(us) + " incompatible with W " + shape_str(ws));
  const std::size_t N = us[0], I = ws[0], J = ws[1], P = ws[2], Q = ws[3];
  const Tensor& uv = u.value();
  const Tensor& wv = w.value();
  Tensor y({N, I, J, Q});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < I; ++i) {
      const double* ui = &uv[(n * I + i) * P];
      for (std::size_t j = 0; j < J; ++j) {
        double* yo = &y[((n * I + i) * J + j) * Q];
        const double* wij = &wv[(i * J + j) * P * Q];
        for (std::size_t p = 0; p < P; ++p)
          for (std::size_t q = 0; q < Q; ++q) yo[q] += ui[p] * wij[p * Q + q];
      }
    }
  return u.graph->emit("predict_votes", std::move(y), {u, w}, [ui = u.id, wi = w.id, N, I, J, P, Q](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& uv = g.value(ui);
    const Tensor& wv = g.value(wi);
    const bool need_u = g.requires_grad(ui), need_w = g.requires_grad(wi);
    double* gu = need_u ? g.grad_ref(ui).data().data() : nullptr;
    double* gw = need_w ? g.grad_ref(wi).data().data() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const double* gyo = &gy[((n * I + i) * J + j) * Q];
          const std::size_t wbase = (i * J + j) * P * Q;
          for (std::size_t p = 0; p < P; ++p) {
            if (need_u) {
              double acc = 0.0;
              for (std::size_t q = 0; q < Q; ++q) acc += gyo[q] * wv[wbase + p * Q + q];
              gu[(n * I + i) * P + p] += acc;
            }
            if (need_w) {
              const double up = uv[(n * I + i) * P + p];
              for (std::size_t q = 0; q < Q; ++q) gw[wbase + p * Q + q] += up * gyo[q];
            }
          }
        }
  });
}

inline Var predict_votes(Graph& g, Var u, CapsuleLayer& layer) {
  return predict_votes(u, g.parameter(layer.weights));
}

namespace detail {

// s[n,j,:] = sum_i c[n,i,j] * votes[n,i,j,:]
inline Var couple_votes(Var c, Var votes) {
  const Shape& vs = votes.shape();
  const std::size_t N = vs[0], I = vs[1], J = vs[2], D = vs[3];
  if (c.shape() != Shape{N, I, J}) throw DimensionError("couple_votes: coupling shape mismatch");
  const Tensor& cv = c.value();
  const Tensor& uv = votes.value();
  Tensor s({N, J, D});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        const double cij = cv[(n * I + i) * J + j];
        const double* u = &uv[((n * I + i) * J + j) * D];
        double* so = &s[(n * J + j) * D];
        for (std::size_t k = 0; k < D; ++k) so[k] += cij * u[k];
      }
  return c.graph->emit("couple_votes", std::move(s), {c, votes}, [ci = c.id, ui = votes.id, N, I, J, D](Graph& g, std::size_t out) {
    const Tensor& gs = g.grad(Var{&g, out});
    const Tensor& cv = g.value(ci);
    const Tensor& uv = g.value(ui);
    const bool need_c = g.requires_grad(ci), need_u = g.requires_grad(ui);
    double* gc = need_c ? g.grad_ref(ci).data().data() : nullptr;
    double* gu = need_u ? g.grad_ref(ui).data().data() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const std::size_t cidx = (n * I + i) * J + j;
          const double* gso = &gs[(n * J + j) * D];
          if (need_c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < D; ++k) acc += gso[k] * uv[cidx * D + k];
            gc[cidx] += acc;
          }
          if (need_u)
            for (std::size_t k = 0; k < D; ++k) gu[cidx * D + k] += cv[cidx] * gso[k];
        }
  });
}

// a[n,i,j] = <v[n,j,:], votes[n,i,j,:]>
inline Var agreement(Var v, Var votes) {
  const Shape& vs = votes.shape();
  const std::size_t N = vs[0], I = vs[1], J = vs[2], D = vs[3];
  if (v.shape() != Shape{N, J, D}) throw DimensionError("agreement: output shape mismatch");
  const Tensor& ov = v.value();
  const Tensor& uv = votes.value();
  Tensor a({N, I, J});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < I; ++i)
      for (std::size_t j = 0; j < J; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < D; ++k) acc += ov[(n * J + j) * D + k] * uv[((n * I + i) * J + j) * D + k];
        a[(n * I + i) * J + j] = acc;
      }
  return v.graph->emit("agreement", std::move(a), {v, votes}, [vi = v.id, ui = votes.id, N, I, J, D](Graph& g, std::size_t out) {
    const Tensor& ga = g.grad(Var{&g, out});
    const Tensor& ov = g.value(vi);
    const Tensor& uv = g.value(ui);
    const bool need_v = g.requires_grad(vi), need_u = g.requires_grad(ui);
    double* gv = need_v ? g.grad_ref(vi).data().data() : nullptr;
    double* gu = need_u ? g.grad_ref(ui).data().data() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t i = 0; i < I; ++i)
        for (std::size_t j = 0; j < J; ++j) {
          const std::size_t aidx = (n * I + i) * J + j;
          const double gaij = ga[aidx];
          for (std::size_t k = 0; k < D; ++k) {
            if (need_v) gv[(n * J + j) * D + k] += gaij * uv[aidx * D + k];
            if (need_u) gu[aidx * D + k] += gaij * ov[(n * J + j) * D + k];
          }
        }
  });
}

}  // namespace detail

// Coupling coefficients and logits observed during one route() call, one
// entry per iteration.
struct RoutingTrace {
  std::vector<Tensor> logits;    // b, [N,I,J]
  std::vector<Tensor> coupling;  // c, [N,I,J]
  std::vector<Tensor> agreement; // a, [N,I,J]; one fewer than iterations
};

// Routing by agreement over votes[N,I,J,D]. Logits start at zero on every
// call. Each iteration: c = softmax_j(b); s_j = sum_i c_ij votes_ij;
// v_j = squash(s_j); then, except after the last iteration,
// b_ij += <v_j, votes_ij>. Gradients flow through every iteration.
inline Var route(Var votes, int iterations, RoutingTrace* trace = nullptr) {
  if (iterations < 1) throw Error("route: iterations must be >= 1, got " + std::to_string(iterations));
  const Shape& vs = votes.shape();
  if (vs.size() != 4) throw DimensionError("route: votes must be [N,I,J,D], got " + shape_str(vs));
  Graph& g = *votes.graph;
  Var b = g.constant(Tensor({vs[0], vs[1], vs[2]}, 0.0));
  Var v{};
  for (int it = 0; it < iterations; ++it) {
    Var c = softmax(b, 2);
    v = squash(detail::couple_votes(c, votes));
    if (trace) {
      trace->logits.push_back(b.value());
      trace->coupling.push_back(c.value());
    }
    if (it + 1 < iterations) {
      Var a = detail::agreement(v, votes);
      if (trace) trace->agreement.push_back(a.value());
      b = add(b, a);
    }
  }
  return v;
}

// Full capsule layer: votes then routing. u is [N,I,dim_in].
inline Var capsule_forward(Graph& g, Var u, CapsuleLayer& layer, RoutingTrace* trace = nullptr) {
  return route(predict_votes(g, u, layer), layer.spec.routing_iters, trace);
}

// Length of each capsule vector (last axis), the class existence probability.
inline Var capsule_lengths(Var v) { return vector_norm(v, v.shape().size() - 1, 0.0); }

// Feature map x[N,C,H,W] regrouped into capsules of `dim` consecutive
// channels at each position: capsule (g, y, x) has index (g*H + y)*W + x and
// components x[:, g*dim + k, y, x]. Output [N, (C/dim)*H*W, dim], unsquashed.
inline Var to_primary_capsules(Var x, std::size_t dim) {
  const Shape& s = x.shape();
  if (s.size() != 4 || dim == 0 || s[1] % dim != 0)
    throw DimensionError("to_primary_capsules: channel count " + (s.size() > 1 ? std::to_string(s[1]) : std::string("?")) +
                         " not divisible by capsule dimension " + std::to_string(dim));
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3], G = C / dim, hw = H * W;
  const Tensor& xv = x.value();
  Tensor y({N, G * hw, dim});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t gr = 0; gr < G; ++gr)
      for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t k = 0; k < dim; ++k)
          y[(n * G * hw + gr * hw + p) * dim + k] = xv[(n * C + gr * dim + k) * hw + p];
  return x.graph->emit("to_primary_capsules", std::move(y), {x}, [xi = x.id, N, C, G, hw, dim](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    Tensor& gx = g.grad_ref(xi);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t gr = 0; gr < G; ++gr)
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t k = 0; k < dim; ++k)
            gx[(n * C + gr * dim + k) * hw + p] += gy[(n * G * hw + gr * hw + p) * dim + k];
  });
}

inline void require_onehot(const Tensor& onehot, const Shape& expected) {
  if (onehot.shape() != expected)
    throw DimensionError("margin_loss: targets " + shape_str(onehot.shape()) + " vs lengths " + shape_str(expected));
  const std::size_t K = expected[1];
  for (std::size_t n = 0; n < expected[0]; ++n) {
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double t = onehot[n * K + k];
      if (t != 0.0 && t != 1.0) throw Error("margin_loss: target row " + std::to_string(n) + " is not one-hot");
      sum += t;
    }
    if (sum != 1.0) throw Error("margin_loss: target row " + std::to_string(n) + " is not one-hot");
  }
}

// Per-sample margin loss, summed over the K capsules: output [N].
inline Var margin_loss_per_sample(Var lengths, const Tensor& onehot, const MarginLossParams& p = {}) {
  p.validate();
  const Shape& s = lengths.shape();
  if (s.size() != 2) throw DimensionError("margin_loss: lengths must be [N,K]");
  require_onehot(onehot, s);
  const std::size_t N = s[0], K = s[1];
  const Tensor& l = lengths.value();
  Tensor y({N});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      const double t = onehot[n * K + k], len = l[n * K + k];
      const double hi = std::max(0.0, p.m_plus - len), lo = std::max(0.0, len - p.m_minus);
      y[n] += t * hi * hi + p.lambda * (1.0 - t) * lo * lo;
    }
  return lengths.graph->emit("margin_loss", std::move(y), {lengths}, [li = lengths.id, onehot, p, N, K](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    const Tensor& l = g.value(li);
    Tensor& gl = g.grad_ref(li);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k) {
        const double t = onehot[n * K + k], len = l[n * K + k];
        const double hi = std::max(0.0, p.m_plus - len), lo = std::max(0.0, len - p.m_minus);
        gl[n * K + k] += gy[n] * (-2.0 * t * hi + 2.0 * p.lambda * (1.0 - t) * lo);
      }
  });
}

// Batch-averaged margin loss.
inline Var margin_loss(Var lengths, const Tensor& onehot, const MarginLossParams& p = {}) {
  return reduce_mean(margin_loss_per_sample(lengths, onehot, p));
}

namespace detail {
inline void check_counts(long n_pos, long n_neg) {
  if (n_pos < 0 || n_neg < 0) throw Error("weighted_loss: negative class count");
  if (n_pos + n_neg == 0) throw Error("weighted_loss: both class counts are zero");
}
}  // namespace detail

// Class-imbalance weighting: the rarer class's loss receives the larger
// coefficient. loss = N+/(N+ + N-) * loss- + N-/(N+ + N-) * loss+.
inline double weighted_loss(double loss_pos, double loss_neg, long n_pos, long n_neg) {
  detail::check_counts(n_pos, n_neg);
  const double total = static_cast<double>(n_pos + n_neg);
  return static_cast<double>(n_pos) / total * loss_neg + static_cast<double>(n_neg) / total * loss_pos;
}

inline Var weighted_loss(Var loss_pos, Var loss_neg, long n_pos, long n_neg) {
  detail::check_counts(n_pos, n_neg);
  const double total = static_cast<double>(n_pos + n_neg);
  return add(scale(loss_neg, static_cast<double>(n_pos) / total), scale(loss_pos, static_cast<double>(n_neg) / total));
}

}  // namespace covidfact
