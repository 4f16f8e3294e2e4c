#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "covidfact/commands.hpp"

namespace covidfact {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Parses `args` (without the program name), runs one subcommand and maps
// failures onto exit codes. Diagnostics go to `err`.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-stage capsule network pipeline for chest CT volumes"};
  app.require_subcommand(1);
  std::string config_path;
  std::string data_dir, run_dir, manifest;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr, cutoff;
  unsigned threads = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON run configuration");
    sub->add_option("--data-dir", data_dir, "data set directory (overrides paths.data_dir)");
    sub->add_option("--run-dir", run_dir, "output directory (overrides paths.run_dir)");
    sub->add_option("--manifest", manifest, "manifest path (overrides paths.manifest)");
  };
  auto* synth = app.add_subcommand("synth", "generate a synthetic data set");
  common(synth);
  synth->add_option("--seed", seed, "generator seed");

  auto* train = app.add_subcommand("train", "train one stage");
  common(train);
  std::string stage_name;
  train->add_option("--stage", stage_name, "one|two")->required()->check(CLI::IsMember({"one", "two", "1", "2"}));
  train->add_option("--seed", seed, "training seed");
  train->add_option("--epochs", epochs, "epochs");
  train->add_option("--batch-size", batch_size, "mini-batch size");
  train->add_option("--lr", lr, "Adam learning rate");

  auto* eval = app.add_subcommand("eval", "evaluate both stages on the test split");
  common(eval);
  eval->add_option("--cutoff", cutoff, "patient probability cut-off");
  eval->add_option("--threads", threads, "patients evaluated in parallel")->check(CLI::Range(1u, 256u));

  auto* predict = app.add_subcommand("predict", "classify one patient");
  common(predict);
  std::string patient;
  predict->add_option("--patient", patient, "patient id in the manifest")->required();
  predict->add_option("--cutoff", cutoff, "patient probability cut-off");

  auto* explain = app.add_subcommand("explain", "Grad-CAM heat map for one slice");
  common(explain);
  ExplainRequest req;
  std::string explain_stage = "one";
  explain->add_option("--patient", req.patient, "patient id in the manifest")->required();
  explain->add_option("--slice", req.slice, "slice index in the scan")->required();
  explain->add_option("--layer", req.layer, "convolutional layer 1..4");
  explain->add_option("--class", req.target, "class capsule: 0 positive, 1 negative");
  explain->add_option("--stage", explain_stage, "model to explain")->check(CLI::IsMember({"one", "two", "1", "2"}));
  explain->add_option("--checkpoint", req.checkpoint, "checkpoint (default: the run directory's)");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    for (auto* sub : app.get_subcommands()) out << sub->help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    RunConfig cfg = config_path.empty() ? parse_config(nlohmann::json::object()) : load_config(config_path);
    if (!data_dir.empty()) cfg.data_dir = data_dir;
    if (!run_dir.empty()) cfg.run_dir = run_dir;
    if (!manifest.empty()) cfg.manifest = manifest;
    if (epochs) cfg.training.epochs = *epochs;
    if (batch_size) cfg.training.batch_size = *batch_size;
    if (lr) cfg.training.learning_rate = *lr;
    if (cutoff) cfg.pipeline.cutoff = *cutoff;
    if (seed) (*synth ? cfg.synth.seed : cfg.training.seed) = *seed;
    cfg.validate();

    if (*synth) cmd_synth(cfg, out);
    else if (*train) cmd_train(cfg, parse_stage(stage_name), out);
    else if (*eval) cmd_eval(cfg, out, threads);
    else if (*predict) cmd_predict(cfg, patient, "", out);
    else if (*explain) {
      req.stage = parse_stage(explain_stage);
      cmd_explain(cfg, req, out);
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const MetricError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace covidfact
