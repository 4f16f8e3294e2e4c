#pragma once

#include <algorithm>
#include <cmath>

#include "covidfact/models.hpp"

namespace covidfact {

// Normaliser Z of the gradient average. `spatial` divides by the number of
// positions h*w of the feature map (global average pooling). `feature_maps`
// divides by the number of maps K instead; the two differ by a positive
// constant per layer, so the resulting CAM differs only in scale.
enum class CamNormalization { spatial, feature_maps };

struct CamMap {
  Tensor map;        // [h,w], >= 0
  Tensor upsampled;  // [H,W], >= 0
};

// alpha_k = (1/Z) * sum_ij dy/dA^k_ij for a gradient tensor [K,h,w].
inline Tensor grad_weights(const Tensor& dA, CamNormalization norm = CamNormalization::spatial) {
  if (dA.rank() != 3) throw DimensionError("grad_weights: expected [K,h,w], got " + shape_str(dA.shape()));
  const std::size_t K = dA.dim(0), hw = dA.dim(1) * dA.dim(2);
  const double Z = norm == CamNormalization::spatial ? static_cast<double>(hw) : static_cast<double>(K);
  Tensor alpha({K});
  for (std::size_t k = 0; k < K; ++k) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += dA[k * hw + p];
    alpha[k] = s / Z;
  }
  return alpha;
}

// Same, reading dy/dA from a graph on which backward(y) has run. A may carry
// a leading batch dimension of 1.
inline Tensor grad_weights(const Graph& g, Var A, CamNormalization norm = CamNormalization::spatial) {
  if (!g.has_grad(A)) throw Error("grad_weights: no gradient reaches the requested layer");
  Tensor dA = g.grad(A);
  const Shape& s = dA.shape();
  if (s.size() == 4) {
    if (s[0] != 1) throw DimensionError("grad_weights: batch dimension must be 1");
    dA = dA.reshaped({s[1], s[2], s[3]});
  }
  return grad_weights(dA, norm);
}

// sum_k alpha_k A^k, before the ReLU.
inline Tensor cam_preactivation(const Tensor& alpha, const Tensor& A) {
  if (A.rank() != 3 || alpha.shape() != Shape{A.dim(0)})
    throw DimensionError("cam: alpha " + shape_str(alpha.shape()) + " does not match maps " + shape_str(A.shape()));
  const std::size_t K = A.dim(0), hw = A.dim(1) * A.dim(2);
  Tensor out({A.dim(1), A.dim(2)});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t p = 0; p < hw; ++p) out[p] += alpha[k] * A[k * hw + p];
  return out;
}

// Bilinear resize with half-pixel centres, edges clamped.
inline Tensor bilinear_resize(const Tensor& img, std::size_t H, std::size_t W) {
  const std::size_t h = img.dim(0), w = img.dim(1);
  Tensor out({H, W});
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& t) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    t = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, h, H, y0, y1, ty);
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, w, W, x0, x1, tx);
      const double top = img[y0 * w + x0] * (1 - tx) + img[y0 * w + x1] * tx;
      const double bot = img[y1 * w + x0] * (1 - tx) + img[y1 * w + x1] * tx;
      out[y * W + x] = top * (1 - ty) + bot * ty;
    }
  }
  return out;
}

inline CamMap cam(const Tensor& alpha, const Tensor& A, std::size_t out_h, std::size_t out_w) {
  Tensor m = cam_preactivation(alpha, A);
  for (auto& v : m.data()) v = std::max(0.0, v);
  Tensor up = bilinear_resize(m, out_h, out_w);
  for (auto& v : up.data()) v = std::max(0.0, v);
  return {std::move(m), std::move(up)};
}

inline CamMap cam(const Tensor& alpha, const Tensor& A) { return cam(alpha, A, A.dim(1), A.dim(2)); }

// Scales to max 1; an all-zero map stays zero.
inline Tensor normalize_max(const Tensor& t) {
  const double mx = *std::max_element(t.data().begin(), t.data().end());
  Tensor out = t;
  if (mx > 0.0)
    for (auto& v : out.data()) v /= mx;
  return out;
}

// Input in gray plus the max-normalised CAM as additive intensity.
inline Tensor overlay(const Tensor& input, const Tensor& cam_up) {
  detail::require_same_shape("overlay", input, cam_up);
  const Tensor c = normalize_max(cam_up);
  Tensor out(input.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(1.0, 0.6 * input[i] + c[i]);
  return out;
}

struct Explanation {
  CamMap cam;
  Tensor overlay;
  Tensor alpha;
  double score = 0.0;  // y^c, the target class-capsule length
};

// Grad-CAM for conv layer `layer` (1..4) and class capsule `target` (0/1) on
// one preprocessed slice [H,W]. Capsule layers are not valid targets.
inline Explanation explain_slice(ModelBundle& model, const Tensor& slice, int layer, int target,
                                 CamNormalization norm = CamNormalization::spatial) {
  if (layer < 1 || layer > 4) throw ConfigError("explain: layer must name a convolutional layer 1..4, got " + std::to_string(layer));
  if (target < 0 || target > 1) throw ConfigError("explain: class must be 0 or 1, got " + std::to_string(target));
  if (slice.shape() != Shape{model.spec.input_h, model.spec.input_w})
    throw DimensionError("explain: slice " + shape_str(slice.shape()) + " does not match model input");
  const Mode saved = model.mode;
  model.mode = Mode::infer;
  Graph g(true, false);
  Var x = g.input(slice.reshaped({1, 1, slice.dim(0), slice.dim(1)}));
  const auto f = model.forward(g, x);
  model.mode = saved;
  const Var A = f.conv_maps[static_cast<std::size_t>(layer - 1)];
  Var y = reshape(f.lengths, {2});
  Var yc = reduce_sum(mul(y, g.constant(Tensor({2}, target == 0 ? std::vector<double>{1, 0} : std::vector<double>{0, 1}))));
  g.backward(yc);
  Explanation e;
  e.score = yc.value()[0];
  e.alpha = grad_weights(g, A, norm);
  const Shape& as = A.shape();
  e.cam = cam(e.alpha, A.value().reshaped({as[1], as[2], as[3]}), slice.dim(0), slice.dim(1));
  e.overlay = overlay(slice, e.cam.upsampled);
  return e;
}

}  // namespace covidfact
