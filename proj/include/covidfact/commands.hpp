#pragma once

#include <fstream>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "covidfact/config.hpp"

namespace covidfact {

// Everything below the command layer talks to the file system only through
// these paths, all rooted in the run directory.
struct RunPaths {
  fs::path root;
  fs::path checkpoint(Stage s) const { return root / (s == Stage::one ? "stage1.ckpt" : "stage2.ckpt"); }
  fs::path loss_log(Stage s) const { return root / (s == Stage::one ? "stage1_loss.csv" : "stage2_loss.csv"); }
  fs::path config_echo() const { return root / "config_echo.json"; }
  fs::path split() const { return root / "split.json"; }
  fs::path metrics() const { return root / "metrics.json"; }
  fs::path roc() const { return root / "roc.csv"; }
  fs::path sweep() const { return root / "cutoff_sweep.csv"; }
  fs::path verdicts() const { return root / "verdicts.jsonl"; }
  fs::path cam_dir() const { return root / "cam"; }
};

inline void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

// Loaded, preprocessed and split data set.
struct Workspace {
  std::vector<Volume> volumes;  // preprocessed
  Split split;

  std::vector<Volume> subset(const std::vector<std::size_t>& idx) const {
    std::vector<Volume> out;
    for (auto i : idx) out.push_back(volumes[i]);
    return out;
  }
};

inline Workspace load_workspace(const RunConfig& cfg) {
  const auto raw = load_dataset(cfg.manifest_path(), cfg.window);
  if (raw.empty()) throw DataError("manifest " + cfg.manifest_path() + " lists no patients");
  Workspace ws;
  for (const auto& v : raw) ws.volumes.push_back(preprocess(v, cfg.stage1.input_h, cfg.stage1.input_w));
  ws.split = split(ws.volumes, cfg.split);
  return ws;
}

inline nlohmann::json split_json(const Workspace& ws) {
  auto ids = [&](const std::vector<std::size_t>& idx) {
    nlohmann::json a = nlohmann::json::array();
    for (auto i : idx) a.push_back(ws.volumes[i].patient_id);
    return a;
  };
  return {{"train", ids(ws.split.train)}, {"val", ids(ws.split.val)}, {"test", ids(ws.split.test)}};
}

inline ModelBundle load_checkpoint_for(const RunConfig& cfg, const fs::path& path, Stage expected) {
  if (!fs::exists(path)) throw DataError("missing checkpoint " + path.string() + " (train stage " + to_string(expected) + " first)");
  ModelBundle m = checkpoint::load(path.string());
  if (m.stage != expected) throw DataError(path.string() + " holds a stage " + to_string(m.stage) + " model");
  if (m.spec.input_h != cfg.stage1.input_h || m.spec.input_w != cfg.stage1.input_w)
    throw ConfigError(path.string() + ": model input size differs from the configured input size");
  return m;
}

// ---------------------------------------------------------------------------

inline SynthSummary cmd_synth(const RunConfig& cfg, std::ostream& out) {
  const auto s = generate_synthetic(cfg.synth, cfg.data_dir);
  out << "wrote " << s.patients << " patients, " << s.slices << " slices (" << s.infected_slices << " infected) to "
      << cfg.data_dir << "\n";
  for (const auto& [label, n] : s.per_label) out << "  " << label << ": " << n << "\n";
  return s;
}

inline TrainResult cmd_train(const RunConfig& cfg, Stage stage, std::ostream& out) {
  const RunPaths paths{cfg.run_dir};
  write_text(paths.config_echo(), to_json(cfg).dump(2) + "\n");
  const Workspace ws = load_workspace(cfg);
  write_text(paths.split(), split_json(ws).dump(2) + "\n");
  const auto train_v = ws.subset(ws.split.train), val_v = ws.subset(ws.split.val);

  std::vector<LabeledSlice> train, val;
  ModelBundle model;
  if (stage == Stage::one) {
    train = stage1_samples(train_v);
    val = stage1_samples(val_v);
    if (train.empty()) throw DataError("no slice infection labels in the training split; stage one needs them");
    model = build_stage1(cfg.stage1);
  } else {
    const ModelBundle s1 = load_checkpoint_for(cfg, paths.checkpoint(Stage::one), Stage::one);
    const auto pc = cfg.pipeline_config();
    train = stage2_samples(train_v, scorer_for(s1), pc);
    val = stage2_samples(val_v, scorer_for(s1), pc);
    model = build_stage2(cfg.stage2);
  }
  long pos = 0;
  for (const auto& s : train) pos += s.positive ? 1 : 0;
  if (pos == 0 || pos == static_cast<long>(train.size()))
    throw DataError("stage " + to_string(stage) + " training set has a single class (" + std::to_string(train.size()) + " slices)");
  out << "stage " << to_string(stage) << ": " << train.size() << " training slices (" << pos << " positive), " << val.size()
      << " validation slices, " << count_parameters(model) << " parameters\n";

  char line[200];
  const TrainResult res = train_model(model, train, val, cfg.training, [&](const EpochLog& e) {
    std::snprintf(line, sizeof(line), "epoch %3d  train %.6f  val %.6f  val_acc %.4f\n", e.epoch, e.train_loss, e.val_loss,
                  e.val_accuracy);
    out << line << std::flush;
  });
  checkpoint::save(model, paths.checkpoint(stage).string());
  write_text(paths.loss_log(stage), loss_log_csv(res.log));
  out << "kept epoch " << res.best_epoch << " (val loss " << res.best_val_loss << ") -> " << paths.checkpoint(stage).string() << "\n";
  return res;
}

struct EvalReport {
  std::vector<PatientVerdict> verdicts;
  std::vector<ScoredLabel> scores;  // patient_prob vs COVID label, labelled test patients only
  ConfusionCounts counts;
  BasicMetrics metrics;
  RocCurve roc;
  ConfusionCounts slice_counts;  // stage one, argmax, test slices with infection labels
  nlohmann::json json;
};

namespace detail {

inline nlohmann::json with_ci(double value, std::size_t successes, std::size_t n, const MetricsConfig& mc) {
  const Interval ci = proportion_ci(successes, n, mc.ci_level, mc.interval);
  return {{"value", value}, {"ci", {ci.lo, ci.hi}}, {"successes", successes}, {"n", n}};
}

inline nlohmann::json metric_block(const ConfusionCounts& c, const MetricsConfig& mc) {
  const BasicMetrics m = basic_metrics(c);
  return {{"confusion", {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}}},
          {"accuracy", with_ci(m.accuracy, c.tp + c.tn, c.total(), mc)},
          {"sensitivity", with_ci(m.sensitivity, c.tp, c.tp + c.fn, mc)},
          {"specificity", with_ci(m.specificity, c.tn, c.tn + c.fp, mc)}};
}

// Per-patient classification, optionally over several threads; results land
// at their patient's index so the output order never depends on scheduling.
inline std::vector<PatientVerdict> classify_all(const std::vector<const Volume*>& vols, const ModelBundle& s1, const ModelBundle& s2,
                                                const PipelineConfig& pc, unsigned threads) {
  std::vector<PatientVerdict> out(vols.size());
  auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < vols.size(); i += step) out[i] = classify_volume(*vols[i], scorer_for(s1), scorer_for(s2), pc);
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(vols.size())));
  if (threads == 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        work(t, threads);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace detail

inline EvalReport cmd_eval(const RunConfig& cfg, std::ostream& out, unsigned threads = 1) {
  const RunPaths paths{cfg.run_dir};
  const ModelBundle s1 = load_checkpoint_for(cfg, paths.checkpoint(Stage::one), Stage::one);
  const ModelBundle s2 = load_checkpoint_for(cfg, paths.checkpoint(Stage::two), Stage::two);
  const Workspace ws = load_workspace(cfg);
  if (ws.split.test.empty()) throw DataError("test split is empty");
  const auto pc = cfg.pipeline_config();

  std::vector<const Volume*> test;
  for (auto i : ws.split.test) test.push_back(&ws.volumes[i]);
  EvalReport r;
  r.verdicts = detail::classify_all(test, s1, s2, pc, threads);

  std::string lines;
  for (std::size_t k = 0; k < test.size(); ++k) {
    nlohmann::json j = to_json(r.verdicts[k]);
    j["label"] = to_string(test[k]->label);
    lines += j.dump() + "\n";
    if (test[k]->label != Label::unknown) r.scores.push_back({r.verdicts[k].patient_prob, test[k]->label == Label::covid});
  }
  write_text(paths.verdicts(), lines);

  std::size_t n_pos = 0;
  for (const auto& s : r.scores) n_pos += s.positive ? 1 : 0;
  if (n_pos == 0 || n_pos == r.scores.size())
    throw DataError("test split holds a single class (" + std::to_string(r.scores.size()) + " labelled patients); ROC undefined");

  r.counts = confusion_at(r.scores, pc.cutoff);
  r.metrics = basic_metrics(r.counts);
  r.roc = roc_curve(r.scores);
  const Interval auc_ci = hanley_mcneil_ci(r.roc.auc, r.roc.n_pos, r.roc.n_neg, cfg.metrics.ci_level);
  std::size_t short_circuited = 0;
  for (const auto& v : r.verdicts) short_circuited += v.decision_rule == DecisionRule::three_percent_rule ? 1 : 0;

  nlohmann::json sweep = nlohmann::json::array();
  std::string sweep_csv = "cutoff,tp,fp,tn,fn,accuracy,sensitivity,specificity\n";
  char buf[256];
  for (const auto& row : cutoff_sweep(r.scores, cfg.metrics.cutoffs)) {
    nlohmann::json e = detail::metric_block(row.counts, cfg.metrics);
    e["cutoff"] = row.cutoff;
    sweep.push_back(std::move(e));
    std::snprintf(buf, sizeof(buf), "%.17g,%zu,%zu,%zu,%zu,%.17g,%.17g,%.17g\n", row.cutoff, row.counts.tp, row.counts.fp,
                  row.counts.tn, row.counts.fn, row.metrics.accuracy, row.metrics.sensitivity, row.metrics.specificity);
    sweep_csv += buf;
  }

  // Stage one on its own: argmax over the test slices that carry labels.
  std::vector<ScoredLabel> slice_scores;
  for (const Volume* v : test) {
    const Tensor lens = score_volume(*v, scorer_for(s1), pc.batch_size);
    for (std::size_t k = 0; k < v->slices.size(); ++k) {
      if (!v->slices[k].infection_label) continue;
      const bool truth = *v->slices[k].infection_label;
      const double pos = lens[k * 2 + kPositiveClass], neg = lens[k * 2 + kNegativeClass];
      if (truth) (pos > neg ? r.slice_counts.tp : r.slice_counts.fn)++;
      else (pos > neg ? r.slice_counts.fp : r.slice_counts.tn)++;
      slice_scores.push_back({class_probability(pos, neg, pc.probability_mode), truth});
    }
  }
  nlohmann::json stage1 = nullptr;
  if (r.slice_counts.tp + r.slice_counts.fn > 0 && r.slice_counts.tn + r.slice_counts.fp > 0) {
    stage1 = detail::metric_block(r.slice_counts, cfg.metrics);
    stage1["auc"] = roc_curve(slice_scores).auc;
  }

  nlohmann::json patients = detail::metric_block(r.counts, cfg.metrics);
  patients["n"] = r.scores.size();
  patients["n_covid"] = n_pos;
  patients["n_non_covid"] = r.scores.size() - n_pos;
  patients["cutoff"] = pc.cutoff;
  patients["auc"] = {{"value", r.roc.auc}, {"ci", {auc_ci.lo, auc_ci.hi}}, {"method", "hanley_mcneil"}};
  patients["three_percent_rule_decisions"] = short_circuited;
  r.json = {{"patients", patients},
            {"cutoff_sweep", sweep},
            {"stage1_slices", stage1},
            {"ci_level", cfg.metrics.ci_level},
            {"interval", detail::name_of(cfg.metrics.interval)}};
  write_text(paths.metrics(), r.json.dump(2) + "\n");
  write_text(paths.roc(), roc_csv(r.roc));
  write_text(paths.sweep(), sweep_csv);

  std::snprintf(buf, sizeof(buf), "test patients %zu  accuracy %.4f  sensitivity %.4f  specificity %.4f  AUC %.4f [%.4f, %.4f]\n",
                r.scores.size(), r.metrics.accuracy, r.metrics.sensitivity, r.metrics.specificity, r.roc.auc, auc_ci.lo, auc_ci.hi);
  out << buf;
  if (!stage1.is_null()) {
    const BasicMetrics sm = basic_metrics(r.slice_counts);
    std::snprintf(buf, sizeof(buf), "stage one slices %zu  accuracy %.4f\n", r.slice_counts.total(), sm.accuracy);
    out << buf;
  }
  return r;
}

inline const Volume& find_patient(const std::vector<Volume>& vols, const std::string& id) {
  for (const auto& v : vols)
    if (v.patient_id == id) return v;
  throw DataError("patient '" + id + "' not in manifest");
}

// `manifest` overrides the configured one, e.g. for a single new scan.
inline PatientVerdict cmd_predict(const RunConfig& cfg, const std::string& patient, const std::string& manifest, std::ostream& out) {
  const RunPaths paths{cfg.run_dir};
  const ModelBundle s1 = load_checkpoint_for(cfg, paths.checkpoint(Stage::one), Stage::one);
  const ModelBundle s2 = load_checkpoint_for(cfg, paths.checkpoint(Stage::two), Stage::two);
  const auto vols = load_dataset(manifest.empty() ? cfg.manifest_path() : manifest, cfg.window);
  const PatientVerdict v = predict_patient(find_patient(vols, patient), s1, s2, cfg.pipeline_config());
  const std::string line = to_json(v).dump() + "\n";
  write_text(paths.root / ("predict_" + patient + ".jsonl"), line);
  out << line;
  return v;
}

struct ExplainRequest {
  std::string patient;
  std::size_t slice = 0;  // index in the original scan
  int layer = 4;
  int target = static_cast<int>(kPositiveClass);
  Stage stage = Stage::one;
  std::string checkpoint;  // empty: the run directory's checkpoint for `stage`
  std::string manifest;
};

struct ExplainResult {
  Explanation explanation;
  fs::path cam_path, overlay_path;
};

inline ExplainResult cmd_explain(const RunConfig& cfg, const ExplainRequest& req, std::ostream& out) {
  if (req.layer < 1 || req.layer > 4) throw ConfigError("--layer must be 1..4, got " + std::to_string(req.layer));
  if (req.target < 0 || req.target > 1) throw ConfigError("--class must be 0 or 1, got " + std::to_string(req.target));
  const RunPaths paths{cfg.run_dir};
  ModelBundle m = load_checkpoint_for(cfg, req.checkpoint.empty() ? paths.checkpoint(req.stage) : fs::path(req.checkpoint), req.stage);
  const auto vols = load_dataset(req.manifest.empty() ? cfg.manifest_path() : req.manifest, cfg.window);
  const Volume& raw = find_patient(vols, req.patient);
  if (req.slice >= raw.slices.size())
    throw ConfigError("--slice " + std::to_string(req.slice) + " out of range (scan has " + std::to_string(raw.slices.size()) + ")");
  const Volume v = preprocess(raw, cfg.stage1.input_h, cfg.stage1.input_w);
  const SliceRecord* s = nullptr;
  for (const auto& r : v.slices)
    if (r.source_index == req.slice) s = &r;
  if (!s) throw DataError("slice " + std::to_string(req.slice) + " of " + req.patient + " has no lung tissue");

  ExplainResult res;
  res.explanation = explain_slice(m, s->pixels, req.layer, req.target, cfg.cam_normalization);
  char stem[160];
  std::snprintf(stem, sizeof(stem), "%s_s%03zu_l%d_c%d", req.patient.c_str(), req.slice, req.layer, req.target);
  res.cam_path = paths.cam_dir() / (std::string(stem) + "_cam.pgm");
  res.overlay_path = paths.cam_dir() / (std::string(stem) + "_overlay.pgm");
  std::error_code ec;
  fs::create_directories(paths.cam_dir(), ec);
  write_pgm(res.cam_path, to_pgm8(normalize_max(res.explanation.cam.upsampled)));
  write_pgm(res.overlay_path, to_pgm8(res.explanation.overlay));
  out << nlohmann::json{{"patient_id", req.patient},
                        {"slice", req.slice},
                        {"layer", req.layer},
                        {"class", req.target},
                        {"score", res.explanation.score},
                        {"cam", res.cam_path.string()},
                        {"overlay", res.overlay_path.string()}}
             .dump()
      << "\n";
  return res;
}

}  // namespace covidfact
