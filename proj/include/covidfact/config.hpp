#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "covidfact/data_io.hpp"
#include "covidfact/gradcam.hpp"
#include "covidfact/metrics.hpp"
#include "covidfact/models.hpp"
#include "covidfact/pipeline.hpp"
#include "covidfact/training.hpp"
#include "json.hpp"

namespace covidfact {

struct MetricsConfig {
  double ci_level = 0.95;
  ProportionInterval interval = ProportionInterval::wilson;
  std::vector<double> cutoffs{std::begin(kDefaultSweep), std::end(kDefaultSweep)};
};

struct RunConfig {
  std::string data_dir = "data";
  std::string manifest;  // empty: <data_dir>/manifest.json
  std::string run_dir = "run";
  SynthConfig synth;
  NetworkSpec stage1 = NetworkSpec::stage1_default();
  NetworkSpec stage2 = NetworkSpec::stage2_default();
  TrainingConfig training;
  SplitSpec split;
  PipelineConfig pipeline;
  HuWindow window;
  MetricsConfig metrics;
  CamNormalization cam_normalization = CamNormalization::spatial;

  std::string manifest_path() const { return manifest.empty() ? (fs::path(data_dir) / "manifest.json").string() : manifest; }

  // The pipeline feeds both stages with the same slices.
  void validate() const {
    stage1.validate();
    stage2.validate();
    synth.validate();
    if (stage1.hidden_caps.size() != 2) throw ConfigError("stage1 needs exactly 2 hidden capsule layers");
    if (!stage2.hidden_caps.empty()) throw ConfigError("stage2 takes no hidden capsule layers");
    if (stage1.input_h != stage2.input_h || stage1.input_w != stage2.input_w)
      throw ConfigError("stage1 and stage2 input sizes differ");
    if (training.epochs < 1) throw ConfigError("training.epochs must be >= 1");
    if (training.batch_size < 2) throw ConfigError("training.batch_size must be >= 2");
    if (!(training.learning_rate > 0.0)) throw ConfigError("training.learning_rate must be positive");
    training.margin.validate();
    if (!(pipeline.cutoff >= 0.0 && pipeline.cutoff <= 1.0)) throw ConfigError("pipeline.cutoff must be in [0,1]");
    if (!(pipeline.threshold >= 0.0 && pipeline.threshold <= 1.0)) throw ConfigError("pipeline.threshold must be in [0,1]");
    if (pipeline.batch_size == 0) throw ConfigError("pipeline.batch_size must be positive");
    if (!(metrics.ci_level > 0.0 && metrics.ci_level < 1.0)) throw ConfigError("metrics.ci_level must be in (0,1)");
    if (!(window.width > 0.0)) throw ConfigError("preprocess.hu_window width must be positive");
  }

  PipelineConfig pipeline_config() const {
    PipelineConfig p = pipeline;
    p.input_h = stage1.input_h;
    p.input_w = stage1.input_w;
    return p;
  }
};

namespace detail {

template <class E>
E parse_enum(const nlohmann::json& j, const char* what, std::initializer_list<std::pair<const char*, E>> names) {
  const auto s = j.get<std::string>();
  for (const auto& [n, e] : names)
    if (s == n) return e;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "'");
}

inline void reject_unknown(const nlohmann::json& j, const char* section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError(std::string(section) + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
}

inline const char* name_of(ProbabilityMode m) { return m == ProbabilityMode::raw ? "raw" : "normalized"; }
inline const char* name_of(FractionDenominator d) { return d == FractionDenominator::surviving ? "surviving" : "all"; }
inline const char* name_of(SelectionMode s) { return s == SelectionMode::argmax ? "argmax" : "threshold"; }
inline const char* name_of(ProportionInterval k) { return k == ProportionInterval::wilson ? "wilson" : "agresti_coull"; }
inline const char* name_of(CamNormalization n) { return n == CamNormalization::spatial ? "spatial" : "feature_maps"; }

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  using detail::name_of;
  return {{"paths", {{"data_dir", c.data_dir}, {"manifest", c.manifest}, {"run_dir", c.run_dir}}},
          {"synth", c.synth},
          {"stage1", c.stage1},
          {"stage2", c.stage2},
          {"training",
           {{"epochs", c.training.epochs},
            {"batch_size", c.training.batch_size},
            {"learning_rate", c.training.learning_rate},
            {"seed", c.training.seed},
            {"margin", {{"m_plus", c.training.margin.m_plus}, {"m_minus", c.training.margin.m_minus}, {"lambda", c.training.margin.lambda}}}}},
          {"split",
           {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test}, {"seed", c.split.seed}, {"stratify", c.split.stratify}}},
          {"pipeline",
           {{"cutoff", c.pipeline.cutoff},
            {"threshold", c.pipeline.threshold},
            {"probability", name_of(c.pipeline.probability_mode)},
            {"fraction_denominator", name_of(c.pipeline.fraction_denominator)},
            {"selection", name_of(c.pipeline.selection)},
            {"selection_threshold", c.pipeline.selection_threshold},
            {"batch_size", c.pipeline.batch_size}}},
          {"preprocess", {{"hu_window", {{"center", c.window.center}, {"width", c.window.width}}}}},
          {"metrics", {{"ci_level", c.metrics.ci_level}, {"interval", name_of(c.metrics.interval)}, {"cutoffs", c.metrics.cutoffs}}},
          {"gradcam", {{"normalization", name_of(c.cam_normalization)}}}};
}

// Missing keys keep defaults; unknown keys are errors.
inline RunConfig parse_config(const nlohmann::json& j) {
  using detail::reject_unknown;
  RunConfig c;
  try {
    reject_unknown(j, "config", {"paths", "synth", "stage1", "stage2", "training", "split", "pipeline", "preprocess", "metrics", "gradcam"});
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      reject_unknown(p, "paths", {"data_dir", "manifest", "run_dir"});
      if (p.contains("data_dir")) c.data_dir = p["data_dir"].get<std::string>();
      if (p.contains("manifest")) c.manifest = p["manifest"].get<std::string>();
      if (p.contains("run_dir")) c.run_dir = p["run_dir"].get<std::string>();
    }
    if (j.contains("synth")) {
      reject_unknown(j["synth"], "synth",
                     {"seed", "patients_per_class", "slices_per_volume", "image_size", "infected_fraction", "peripheral_sigma",
                      "central_sigma", "peripheral_lesions", "central_lesions", "lesion_hu", "lung_hu"});
      from_json(j["synth"], c.synth);
    }
    if (j.contains("stage1")) from_json(j["stage1"], c.stage1);
    if (j.contains("stage2")) from_json(j["stage2"], c.stage2);
    if (j.contains("training")) {
      const auto& t = j["training"];
      reject_unknown(t, "training", {"epochs", "batch_size", "learning_rate", "seed", "margin"});
      if (t.contains("epochs")) c.training.epochs = t["epochs"].get<int>();
      if (t.contains("batch_size")) c.training.batch_size = t["batch_size"].get<std::size_t>();
      if (t.contains("learning_rate")) c.training.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("seed")) c.training.seed = t["seed"].get<std::uint64_t>();
      if (t.contains("margin")) {
        const auto& m = t["margin"];
        reject_unknown(m, "training.margin", {"m_plus", "m_minus", "lambda"});
        if (m.contains("m_plus")) c.training.margin.m_plus = m["m_plus"].get<double>();
        if (m.contains("m_minus")) c.training.margin.m_minus = m["m_minus"].get<double>();
        if (m.contains("lambda")) c.training.margin.lambda = m["lambda"].get<double>();
      }
    }
    if (j.contains("split")) {
      const auto& s = j["split"];
      reject_unknown(s, "split", {"train", "val", "test", "seed", "stratify"});
      if (s.contains("train")) c.split.train = s["train"].get<double>();
      if (s.contains("val")) c.split.val = s["val"].get<double>();
      if (s.contains("test")) c.split.test = s["test"].get<double>();
      if (s.contains("seed")) c.split.seed = s["seed"].get<std::uint64_t>();
      if (s.contains("stratify")) c.split.stratify = s["stratify"].get<bool>();
    }
    if (j.contains("pipeline")) {
      const auto& p = j["pipeline"];
      reject_unknown(p, "pipeline",
                     {"cutoff", "threshold", "probability", "fraction_denominator", "selection", "selection_threshold", "batch_size"});
      if (p.contains("cutoff")) c.pipeline.cutoff = p["cutoff"].get<double>();
      if (p.contains("threshold")) c.pipeline.threshold = p["threshold"].get<double>();
      if (p.contains("probability"))
        c.pipeline.probability_mode = detail::parse_enum<ProbabilityMode>(
            p["probability"], "probability mode", {{"raw", ProbabilityMode::raw}, {"normalized", ProbabilityMode::normalized}});
      if (p.contains("fraction_denominator"))
        c.pipeline.fraction_denominator = detail::parse_enum<FractionDenominator>(
            p["fraction_denominator"], "fraction denominator",
            {{"surviving", FractionDenominator::surviving}, {"all", FractionDenominator::all}});
      if (p.contains("selection"))
        c.pipeline.selection = detail::parse_enum<SelectionMode>(
            p["selection"], "selection mode", {{"argmax", SelectionMode::argmax}, {"threshold", SelectionMode::threshold}});
      if (p.contains("selection_threshold")) c.pipeline.selection_threshold = p["selection_threshold"].get<double>();
      if (p.contains("batch_size")) c.pipeline.batch_size = p["batch_size"].get<std::size_t>();
    }
    if (j.contains("preprocess")) {
      const auto& p = j["preprocess"];
      reject_unknown(p, "preprocess", {"hu_window"});
      if (p.contains("hu_window")) {
        reject_unknown(p["hu_window"], "preprocess.hu_window", {"center", "width"});
        if (p["hu_window"].contains("center")) c.window.center = p["hu_window"]["center"].get<double>();
        if (p["hu_window"].contains("width")) c.window.width = p["hu_window"]["width"].get<double>();
      }
    }
    if (j.contains("metrics")) {
      const auto& m = j["metrics"];
      reject_unknown(m, "metrics", {"ci_level", "interval", "cutoffs"});
      if (m.contains("ci_level")) c.metrics.ci_level = m["ci_level"].get<double>();
      if (m.contains("interval"))
        c.metrics.interval = detail::parse_enum<ProportionInterval>(
            m["interval"], "interval", {{"wilson", ProportionInterval::wilson}, {"agresti_coull", ProportionInterval::agresti_coull}});
      if (m.contains("cutoffs")) c.metrics.cutoffs = m["cutoffs"].get<std::vector<double>>();
    }
    if (j.contains("gradcam")) {
      reject_unknown(j["gradcam"], "gradcam", {"normalization"});
      if (j["gradcam"].contains("normalization"))
        c.cam_normalization = detail::parse_enum<CamNormalization>(
            j["gradcam"]["normalization"], "CAM normalisation",
            {{"spatial", CamNormalization::spatial}, {"feature_maps", CamNormalization::feature_maps}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace covidfact
