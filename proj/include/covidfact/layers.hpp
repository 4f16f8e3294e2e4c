#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "covidfact/autograd.hpp"

namespace covidfact {

enum class Padding { same, valid };
enum class Mode { train, infer };

struct Window2 {
  std::size_t h = 1, w = 1;
  friend bool operator==(const Window2&, const Window2&) = default;
};

namespace detail {

struct ConvGeometry {
  std::size_t n, c, h, w;        // input
  std::size_t o, kh, kw;         // kernel
  std::size_t sh, sw;            // stride
  std::size_t ho, wo;            // output
  std::size_t pad_top, pad_left;
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, Padding p, std::size_t& pad_before) {
  if (p == Padding::same) {
    const std::size_t out = (in + s - 1) / s;
    const std::size_t need = (out - 1) * s + k;
    pad_before = need > in ? (need - in) / 2 : 0;
    return out;
  }
  pad_before = 0;
  if (k > in) return 0;
  return (in - k) / s + 1;
}

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, Window2 stride, Padding pad) {
  if (x.size() != 4) throw DimensionError("conv2d: input must be [N,C,H,W], got " + shape_str(x));
  if (w.size() != 4) throw DimensionError("conv2d: weight must be [O,C,kh,kw], got " + shape_str(w));
  if (x[1] != w[1])
    throw DimensionError("conv2d: input has " + std::to_string(x[1]) + " channels, layer expects " +
                         std::to_string(w[1]));
  if (stride.h == 0 || stride.w == 0) throw DimensionError("conv2d: zero stride");
  ConvGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride.h, stride.w, 0, 0, 0, 0};
  g.ho = conv_out(g.h, g.kh, g.sh, pad, g.pad_top);
  g.wo = conv_out(g.w, g.kw, g.sw, pad, g.pad_left);
  if (g.ho == 0 || g.wo == 0)
    throw DimensionError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                         " larger than input " + std::to_string(g.h) + "x" + std::to_string(g.w));
  return g;
}

// col[(c*kh+i)*kw+j, oy*wo+ox] = x[c, oy*sh+i-pt, ox*sw+j-pl] (zero outside).
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.pad_top);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pad_left);
            row[oy * g.wo + ox] = (iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) && ix < static_cast<long>(g.w))
                                      ? x[(c * g.h + iy) * g.w + ix]
                                      : 0.0;
          }
        }
      }
}

inline void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t hw = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t i = 0; i < g.kh; ++i)
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = col + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.sh + i) - static_cast<long>(g.pad_top);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.sw + j) - static_cast<long>(g.pad_left);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            dx[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation of x[N,C,H,W] with w[O,C,kh,kw] plus bias[O].
inline Var conv2d(Var x, Var w, Var bias, Window2 stride = {1, 1}, Padding pad = Padding::same) {
  const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
  if (bias.shape() != Shape{g.o}) throw DimensionError("conv2d: bias must be [" + std::to_string(g.o) + "]");
  const std::size_t ck = g.c * g.kh * g.kw, hw = g.ho * g.wo;
  Tensor y({g.n, g.o, g.ho, g.wo});
  std::vector<double> col(ck * hw);
  const double* xd = x.value().data().data();
  const double* wd = w.value().data().data();
  const double* bd = bias.value().data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    detail::im2col(g, xd + n * g.c * g.h * g.w, col.data());
    double* yn = y.data().data() + n * g.o * hw;
    for (std::size_t o = 0; o < g.o; ++o) std::fill_n(yn + o * hw, hw, bd[o]);
    detail::gemm_nn(g.o, ck, hw, wd, col.data(), yn);
  }
  return x.graph->emit("conv2d", std::move(y), {x, w, bias},
                       [xi = x.id, wi = w.id, bi = bias.id, g, ck, hw](Graph& gr, std::size_t out) {
    const double* gy = gr.grad(Var{&gr, out}).data().data();
    const double* xd = gr.value(xi).data().data();
    const double* wd = gr.value(wi).data().data();
    const bool need_x = gr.requires_grad(xi), need_w = gr.requires_grad(wi), need_b = gr.requires_grad(bi);
    std::vector<double> col(ck * hw), dcol(need_x ? ck * hw : 0);
    double* dw = need_w ? gr.grad_ref(wi).data().data() : nullptr;
    double* db = need_b ? gr.grad_ref(bi).data().data() : nullptr;
    double* dx = need_x ? gr.grad_ref(xi).data().data() : nullptr;
    for (std::size_t n = 0; n < g.n; ++n) {
      const double* gyn = gy + n * g.o * hw;
      if (need_b)
        for (std::size_t o = 0; o < g.o; ++o)
          for (std::size_t p = 0; p < hw; ++p) db[o] += gyn[o * hw + p];
      if (need_w) {
        detail::im2col(g, xd + n * g.c * g.h * g.w, col.data());
        detail::gemm_nt(g.o, hw, ck, gyn, col.data(), dw);
      }
      if (need_x) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        detail::gemm_tn(ck, g.o, hw, wd, gyn, dcol.data());
        detail::col2im_add(g, dcol.data(), dx + n * g.c * g.h * g.w);
      }
    }
  });
}

struct Conv2D {
  std::size_t in_channels = 0, out_channels = 0;
  Window2 kernel{3, 3};
  Window2 stride{1, 1};
  Padding padding = Padding::same;
  Parameter weight;  // [out, in, kh, kw]
  Parameter bias;    // [out]

  // He-uniform weights, zero bias.
  static Conv2D make(const std::string& name, std::size_t in, std::size_t out, Window2 kernel, Rng& rng,
                     Window2 stride = {1, 1}, Padding padding = Padding::same) {
    Conv2D c{in, out, kernel, stride, padding, {}, {}};
    const double limit = std::sqrt(6.0 / static_cast<double>(in * kernel.h * kernel.w));
    c.weight = Parameter(name + ".weight", rng.uniform_tensor({out, in, kernel.h, kernel.w}, -limit, limit));
    c.bias = Parameter(name + ".bias", Tensor({out}, 0.0));
    return c;
  }
};

inline Var conv2d_forward(Graph& g, Var x, Conv2D& layer) {
  return conv2d(x, g.parameter(layer.weight), g.parameter(layer.bias), layer.stride, layer.padding);
}

struct BatchNorm2D {
  std::size_t channels = 0;
  Parameter gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.99;
  double epsilon = 1e-5;

  static BatchNorm2D make(const std::string& name, std::size_t channels, double momentum = 0.99,
                          double epsilon = 1e-5) {
    return BatchNorm2D{channels,
                       Parameter(name + ".gamma", Tensor({channels}, 1.0)),
                       Parameter(name + ".beta", Tensor({channels}, 0.0)),
                       Tensor({channels}, 0.0),
                       Tensor({channels}, 1.0),
                       momentum,
                       epsilon};
  }
};

// Train mode normalises with batch statistics (biased variance) and folds
// them into the running estimates, which use the unbiased variance.
// Infer mode is the fixed affine map given by the running statistics.
inline Var batchnorm_forward(Graph& g, Var x, BatchNorm2D& layer, Mode mode) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != layer.channels)
    throw DimensionError("batchnorm: expected [N," + std::to_string(layer.channels) + ",H,W], got " + shape_str(s));
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3];
  const double m = static_cast<double>(n * hw);
  Var gamma = g.parameter(layer.gamma);
  Var beta = g.parameter(layer.beta);
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();

  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> inv_std(c);
  if (mode == Mode::train) {
    if (n < 2) throw DimensionError("batchnorm: train mode needs a batch of at least 2");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double mean = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) mean += xv[(b * c + ch) * hw + p];
      mean /= m;
      double var = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = xv[(b * c + ch) * hw + p] - mean;
          var += d * d;
        }
      var /= m;
      inv_std[ch] = 1.0 / std::sqrt(var + layer.epsilon);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (b * c + ch) * hw + p;
          (*xhat)[i] = (xv[i] - mean) * inv_std[ch];
        }
      layer.running_mean[ch] = layer.momentum * layer.running_mean[ch] + (1.0 - layer.momentum) * mean;
      layer.running_var[ch] = layer.momentum * layer.running_var[ch] + (1.0 - layer.momentum) * var * m / (m - 1.0);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      inv_std[ch] = 1.0 / std::sqrt(layer.running_var[ch] + layer.epsilon);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (b * c + ch) * hw + p;
          (*xhat)[i] = (xv[i] - layer.running_mean[ch]) * inv_std[ch];
        }
    }
  }
  Tensor y(s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t i = (b * c + ch) * hw + p;
        y[i] = gv[ch] * (*xhat)[i] + bv[ch];
      }
  const bool batch_stats = mode == Mode::train;
  return g.emit("batchnorm", std::move(y), {x, gamma, beta},
                [xi = x.id, gi = gamma.id, bi = beta.id, xhat, inv_std, n, c, hw, m, batch_stats](Graph& gr, std::size_t out) {
    const Tensor& gy = gr.grad(Var{&gr, out});
    const Tensor& gv = gr.value(gi);
    const bool need_x = gr.requires_grad(xi);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (b * c + ch) * hw + p;
          sum_dy += gy[i];
          sum_dy_xhat += gy[i] * (*xhat)[i];
        }
      if (gr.requires_grad(gi)) gr.grad_ref(gi)[ch] += sum_dy_xhat;
      if (gr.requires_grad(bi)) gr.grad_ref(bi)[ch] += sum_dy;
      if (!need_x) continue;
      Tensor& dx = gr.grad_ref(xi);
      const double k = gv[ch] * inv_std[ch];
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = (b * c + ch) * hw + p;
          dx[i] += batch_stats ? k * (gy[i] - sum_dy / m - (*xhat)[i] * sum_dy_xhat / m) : k * gy[i];
        }
    }
  });
}

struct MaxPool2D {
  Window2 window{2, 2};
  Window2 stride{2, 2};
};

// Windowed max. Ties resolve to the first position of the row-major window
// scan, and only that position receives gradient.
inline Var maxpool_forward(Var x, const MaxPool2D& layer) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("maxpool: input must be [N,C,H,W], got " + shape_str(s));
  const auto [wh, ww] = layer.window;
  const auto [sh, sw] = layer.stride;
  if (s[2] < wh || s[3] < ww)
    throw DimensionError("maxpool: window " + std::to_string(wh) + "x" + std::to_string(ww) +
                         " exceeds input " + std::to_string(s[2]) + "x" + std::to_string(s[3]));
  const std::size_t planes = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t ho = (h - wh) / sh + 1, wo = (w - ww) / sw + 1;
  Tensor y({s[0], s[1], ho, wo});
  std::vector<std::size_t> argmax(y.size());
  const Tensor& xv = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        std::size_t best = p * h * w + (oy * sh) * w + ox * sw;
        for (std::size_t i = 0; i < wh; ++i)
          for (std::size_t j = 0; j < ww; ++j) {
            const std::size_t idx = p * h * w + (oy * sh + i) * w + ox * sw + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (p * ho + oy) * wo + ox;
        y[o] = xv[best];
        argmax[o] = best;
      }
  return x.graph->emit("maxpool", std::move(y), {x}, [xi = x.id, argmax = std::move(argmax)](Graph& g, std::size_t out) {
    const Tensor& gy = g.grad(Var{&g, out});
    Tensor& dx = g.grad_ref(xi);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += gy[o];
  });
}

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m, v;  // aligned with the parameter list passed to adam_step
  std::uint64_t step = 0;
};

// One bias-corrected Adam update, then zero the gradients.
inline void adam_step(std::span<Parameter* const> params, AdamState& st) {
  for (const Parameter* p : params)
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");
  if (st.m.empty()) {
    for (const Parameter* p : params) {
      st.m.push_back(Tensor::zeros_like(p->value));
      st.v.push_back(Tensor::zeros_like(p->value));
    }
  }
  if (st.m.size() != params.size()) throw Error("adam_step: parameter list changed between steps");
  ++st.step;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = st.m[k];
    Tensor& v = st.v[k];
    if (m.shape() != p.value.shape()) throw DimensionError("adam_step: moment shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double gr = p.grad[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gr;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gr * gr;
      p.value[i] -= st.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + st.eps);
    }
    p.zero_grad();
  }
}

}  // namespace covidfact
