#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covidfact/models.hpp"
#include "covidfact/volume.hpp"
#include "json.hpp"

namespace covidfact {

// ---------------------------------------------------------------------------
// Preprocessing

// Box-filter resampling: each output pixel is the area-weighted mean of the
// input pixels it covers (fractional overlaps included).
inline Tensor area_resample(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 2) throw DimensionError("area_resample: expected [H,W], got " + shape_str(img.shape()));
  const std::size_t H = img.dim(0), W = img.dim(1);
  auto weights = [](std::size_t in, std::size_t out) {
    // rows: output index, entries (input index, weight), weights sum to 1
    std::vector<std::vector<std::pair<std::size_t, double>>> w(out);
    const double step = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double lo = static_cast<double>(o) * step, hi = static_cast<double>(o + 1) * step;
      for (auto i = static_cast<std::size_t>(std::floor(lo)); i < in && static_cast<double>(i) < hi; ++i) {
        const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
        if (overlap > 0) w[o].emplace_back(i, overlap / step);
      }
    }
    return w;
  };
  const auto wy = weights(H, out_h), wx = weights(W, out_w);
  Tensor out({out_h, out_w});
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      double acc = 0.0;
      for (const auto& [iy, a] : wy[oy])
        for (const auto& [ix, b] : wx[ox]) acc += a * b * img[iy * W + ix];
      out[oy * out_w + ox] = acc;
    }
  return out;
}

// Crude lung mask for scans without precomputed masks: dark pixels
// (windowed value below `level`) that are not connected to the image border.
inline Tensor fallback_lung_mask(const Tensor& img, double level = 0.5) {
  const std::size_t H = img.dim(0), W = img.dim(1);
  Tensor mask({H, W});
  std::vector<std::uint8_t> outside(H * W, 0);
  std::vector<std::size_t> stack;
  auto seed = [&](std::size_t i) {
    if (img[i] < level && !outside[i]) {
      outside[i] = 1;
      stack.push_back(i);
    }
  };
  for (std::size_t x = 0; x < W; ++x) {
    seed(x);
    seed((H - 1) * W + x);
  }
  for (std::size_t y = 0; y < H; ++y) {
    seed(y * W);
    seed(y * W + W - 1);
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const std::size_t y = i / W, x = i % W;
    if (y > 0) seed(i - W);
    if (y + 1 < H) seed(i + W);
    if (x > 0) seed(i - 1);
    if (x + 1 < W) seed(i + 1);
  }
  for (std::size_t i = 0; i < H * W; ++i) mask[i] = (img[i] < level && !outside[i]) ? 1.0 : 0.0;
  return mask;
}

// Per-slice min-max normalisation to [0,1]; a constant slice maps to zeros.
inline Tensor minmax_normalize(const Tensor& t) {
  const auto [lo, hi] = std::minmax_element(t.data().begin(), t.data().end());
  Tensor out(t.shape());
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = (t[i] - *lo) / range;
  return out;
}

// Mask (background zeroed) -> min-max normalise -> area-resample to the
// model input size. Slices whose mask is empty are dropped. A missing mask
// is replaced by fallback_lung_mask().
inline Volume preprocess(const Volume& raw, std::size_t out_h, std::size_t out_w) {
  Volume v{raw.patient_id, {}, raw.label, raw.original_slice_count ? raw.original_slice_count : raw.slices.size()};
  for (const auto& s : raw.slices) {
    const Tensor mask = s.lung_mask ? *s.lung_mask : fallback_lung_mask(s.pixels);
    if (mask.shape() != s.pixels.shape())
      throw DimensionError("patient " + raw.patient_id + ": mask shape differs from slice");
    const bool any = std::any_of(mask.data().begin(), mask.data().end(), [](double m) { return m != 0.0; });
    if (!any) continue;
    Tensor masked(s.pixels.shape());
    for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = mask[i] != 0.0 ? s.pixels[i] : 0.0;
    SliceRecord r;
    r.pixels = area_resample(minmax_normalize(masked), out_h, out_w);
    Tensor small = area_resample(mask, out_h, out_w);
    for (auto& m : small.data()) m = m > 0.0 ? 1.0 : 0.0;
    r.lung_mask = std::move(small);
    r.infection_label = s.infection_label;
    r.source_index = s.source_index;
    v.slices.push_back(std::move(r));
  }
  if (v.slices.empty()) throw DataError("patient " + raw.patient_id + ": no slice contains lung tissue");
  return v;
}

// Stacks slices [begin, end) into a model batch [N,1,H,W].
inline Tensor stack_slices(const Volume& v, std::size_t begin, std::size_t end) {
  const std::size_t H = v.slices.at(begin).pixels.dim(0), W = v.slices.at(begin).pixels.dim(1);
  Tensor batch({end - begin, 1, H, W});
  for (std::size_t k = begin; k < end; ++k)
    std::copy(v.slices[k].pixels.data().begin(), v.slices[k].pixels.data().end(),
              batch.data().begin() + (k - begin) * H * W);
  return batch;
}

// ---------------------------------------------------------------------------
// Decision rules

enum class Decision { covid, non_covid };
enum class DecisionRule { vote, three_percent_rule };
enum class ProbabilityMode { raw, normalized };
enum class FractionDenominator { surviving, all };
enum class SelectionMode { argmax, threshold };

inline std::string to_string(Decision d) { return d == Decision::covid ? "COVID" : "non-COVID"; }
inline std::string to_string(DecisionRule r) { return r == DecisionRule::vote ? "vote" : "three_percent_rule"; }

// True means short-circuit to non-COVID: strictly fewer than `threshold` of
// the slices were flagged.
inline bool three_percent_rule(double infected_fraction, double threshold = 0.03) {
  return infected_fraction < threshold;
}

// Patient probability as the mean of slice probabilities.
inline double vote(std::span<const double> slice_probs) {
  if (slice_probs.empty()) throw Error("vote: no slice probabilities");
  double s = 0.0;
  for (double p : slice_probs) s += p;
  return std::clamp(s / static_cast<double>(slice_probs.size()),
                    *std::min_element(slice_probs.begin(), slice_probs.end()),
                    *std::max_element(slice_probs.begin(), slice_probs.end()));
}

// COVID iff p > cutoff (strict).
inline Decision apply_cutoff(double p, double cutoff = 0.5) { return p > cutoff ? Decision::covid : Decision::non_covid; }

// ---------------------------------------------------------------------------

// Maps a slice batch [N,1,H,W] to class-capsule lengths [N,2].
using SliceScorer = std::function<Tensor(const Tensor&)>;

inline SliceScorer scorer_for(const ModelBundle& m) {
  return [&m](const Tensor& batch) { return m.predict(batch); };
}

struct PipelineConfig {
  double cutoff = 0.5;
  double threshold = 0.03;
  ProbabilityMode probability_mode = ProbabilityMode::raw;
  FractionDenominator fraction_denominator = FractionDenominator::surviving;
  SelectionMode selection = SelectionMode::argmax;
  double selection_threshold = 0.5;
  std::size_t input_h = 32, input_w = 32;
  std::size_t batch_size = 64;
};

// Positive-class probability from a pair of capsule lengths.
inline double class_probability(double positive_len, double negative_len, ProbabilityMode mode) {
  if (mode == ProbabilityMode::raw) return positive_len;
  const double s = positive_len + negative_len;
  return s > 0.0 ? positive_len / s : 0.5;
}

// Runs `scorer` over all slices of a preprocessed volume in batches.
inline Tensor score_volume(const Volume& v, const SliceScorer& scorer, std::size_t batch_size = 64) {
  if (v.slices.empty()) throw DataError("patient " + v.patient_id + ": empty volume");
  Tensor out({v.slices.size(), 2});
  for (std::size_t b = 0; b < v.slices.size(); b += batch_size) {
    const std::size_t e = std::min(v.slices.size(), b + batch_size);
    const Tensor lens = scorer(stack_slices(v, b, e));
    if (lens.shape() != Shape{e - b, 2}) throw DimensionError("scorer returned " + shape_str(lens.shape()));
    std::copy(lens.data().begin(), lens.data().end(), out.data().begin() + b * 2);
  }
  return out;
}

struct Stage1Result {
  std::vector<std::size_t> selected;  // positions in the volume's slice list
  std::vector<double> p_infected;     // one per slice
  double infected_fraction = 0.0;
};

inline Stage1Result stage1_filter(const Volume& v, const SliceScorer& stage1, const PipelineConfig& cfg = {}) {
  const Tensor lens = score_volume(v, stage1, cfg.batch_size);
  Stage1Result r;
  for (std::size_t k = 0; k < v.slices.size(); ++k) {
    const double pos = lens[k * 2 + kPositiveClass], neg = lens[k * 2 + kNegativeClass];
    r.p_infected.push_back(class_probability(pos, neg, cfg.probability_mode));
    const bool sel = cfg.selection == SelectionMode::argmax ? pos > neg : pos > cfg.selection_threshold;
    if (sel) r.selected.push_back(k);
  }
  const std::size_t denom = cfg.fraction_denominator == FractionDenominator::surviving
                                ? v.slices.size()
                                : std::max(v.original_slice_count, v.slices.size());
  r.infected_fraction = static_cast<double>(r.selected.size()) / static_cast<double>(denom);
  return r;
}

struct SliceProbability {
  std::size_t slice_index = 0;  // index in the original scan
  double p_infected = 0.0;
  std::optional<double> p_covid;
};

struct PatientVerdict {
  std::string patient_id;
  std::vector<SliceProbability> slice_probs;
  std::size_t slices_examined = 0;
  std::size_t slices_selected = 0;
  double infected_fraction = 0.0;
  double patient_prob = 0.0;  // 0 when the 3% rule short-circuits
  Decision decision = Decision::non_covid;
  DecisionRule decision_rule = DecisionRule::vote;
  double cutoff_used = 0.5;
  double threshold_used = 0.03;

  // rule == three_percent_rule => non-COVID and fraction < threshold (or
  // nothing selected); otherwise decision == (patient_prob > cutoff).
  bool consistent() const {
    if (decision_rule == DecisionRule::three_percent_rule)
      return decision == Decision::non_covid && (infected_fraction < threshold_used || slices_selected == 0);
    return decision == apply_cutoff(patient_prob, cutoff_used) && infected_fraction >= threshold_used;
  }
};

inline nlohmann::json to_json(const PatientVerdict& v) {
  nlohmann::json probs = nlohmann::json::array();
  for (const auto& s : v.slice_probs) {
    nlohmann::json e{{"slice", s.slice_index}, {"p_infected", s.p_infected}};
    e["p_covid"] = s.p_covid ? nlohmann::json(*s.p_covid) : nlohmann::json(nullptr);
    probs.push_back(std::move(e));
  }
  return {{"patient_id", v.patient_id},
          {"slice_probs", probs},
          {"slices_examined", v.slices_examined},
          {"slices_selected", v.slices_selected},
          {"infected_fraction", v.infected_fraction},
          {"patient_prob", v.patient_prob},
          {"decision", to_string(v.decision)},
          {"decision_rule", to_string(v.decision_rule)},
          {"cutoff_used", v.cutoff_used},
          {"threshold_used", v.threshold_used}};
}

// Stage-1 filter -> 3% rule -> stage-2 on selected slices -> vote -> cutoff,
// on an already preprocessed volume.
inline PatientVerdict classify_volume(const Volume& v, const SliceScorer& stage1, const SliceScorer& stage2,
                                      const PipelineConfig& cfg = {}) {
  const Stage1Result s1 = stage1_filter(v, stage1, cfg);
  PatientVerdict out;
  out.patient_id = v.patient_id;
  out.slices_examined = v.slices.size();
  out.slices_selected = s1.selected.size();
  out.infected_fraction = s1.infected_fraction;
  out.cutoff_used = cfg.cutoff;
  out.threshold_used = cfg.threshold;
  for (std::size_t k = 0; k < v.slices.size(); ++k) out.slice_probs.push_back({v.slices[k].source_index, s1.p_infected[k], {}});
  // with threshold 0 an empty selection would otherwise reach the vote
  if (s1.selected.empty() || three_percent_rule(s1.infected_fraction, cfg.threshold)) {
    out.decision = Decision::non_covid;
    out.decision_rule = DecisionRule::three_percent_rule;
    out.patient_prob = 0.0;
    return out;
  }
  Volume chosen{v.patient_id, {}, v.label, v.original_slice_count};
  for (std::size_t k : s1.selected) chosen.slices.push_back(v.slices[k]);
  const Tensor lens = score_volume(chosen, stage2, cfg.batch_size);
  std::vector<double> p_covid;
  for (std::size_t m = 0; m < s1.selected.size(); ++m) {
    const double p = class_probability(lens[m * 2 + kPositiveClass], lens[m * 2 + kNegativeClass], cfg.probability_mode);
    p_covid.push_back(p);
    out.slice_probs[s1.selected[m]].p_covid = p;
  }
  out.patient_prob = vote(p_covid);
  out.decision = apply_cutoff(out.patient_prob, cfg.cutoff);
  out.decision_rule = DecisionRule::vote;
  return out;
}

// Full pipeline from a raw (windowed, unpreprocessed) volume.
inline PatientVerdict predict_patient(const Volume& raw, const SliceScorer& stage1, const SliceScorer& stage2,
                                      const PipelineConfig& cfg = {}) {
  return classify_volume(preprocess(raw, cfg.input_h, cfg.input_w), stage1, stage2, cfg);
}

inline PatientVerdict predict_patient(const Volume& raw, const ModelBundle& m1, const ModelBundle& m2,
                                      const PipelineConfig& cfg = {}) {
  return predict_patient(raw, scorer_for(m1), scorer_for(m2), cfg);
}

}  // namespace covidfact
