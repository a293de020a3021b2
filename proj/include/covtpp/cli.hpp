#pragma once

// Command-line front end: simulate, train, evaluate, rank-features, ablate,
// gradcheck. Exit codes: 0 ok, 1 usage, 2 data/validation, 3 numerical.
// Failures print one JSON object {"error":kind,"message":text} on stderr.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "covtpp/config.hpp"
#include "covtpp/data.hpp"
#include "covtpp/errors.hpp"
#include "covtpp/fisan.hpp"
#include "covtpp/model_check.hpp"
#include "covtpp/parallel.hpp"
#include "covtpp/serialize.hpp"
#include "covtpp/simulator.hpp"
#include "covtpp/train.hpp"

namespace covtpp {

enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_data = 2, exit_numerical = 3 };

namespace cli_detail {

struct Options {
  std::string config;
  std::string data;
  std::string model;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string split;
};

inline std::string pick(const std::string& flag, const std::string& from_config) {
  return flag.empty() ? from_config : flag;
}

inline std::string require_path(const std::string& value, const char* what) {
  if (value.empty()) throw UsageError(std::string("missing ") + what);
  return value;
}

inline void require_input(const std::string& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("input file '" + path + "' does not exist");
}

inline void require_output(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent)) {
    throw DataError("output directory '" + parent.string() + "' does not exist");
  }
}

inline std::uint64_t require_seed(const Options& o) {
  if (!o.seed) throw UsageError("--seed is required for this command");
  return *o.seed;
}

inline RunConfig config_for(const Options& o) { return o.config.empty() ? RunConfig{} : load_config(o.config); }

/// Writes `text` to `path`, or stdout when the path is empty.
inline void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
}

/// Dataset as the model sees it: split when the file carries no held-out
/// sequences, covariates standardized with `st` (or fitted on train when
/// `st` is empty). Files that already carry statistics are taken as
/// standardized.
inline Dataset prepare(Dataset d, std::uint64_t split_seed, const std::array<double, 3>& ratios,
                       const std::optional<Standardization>& st) {
  if (d.count(Split::val) == 0 && d.count(Split::test) == 0) d = split_dataset(std::move(d), ratios, split_seed);
  if (d.standardization) return d;
  if (!st) return standardize_covariates(std::move(d));
  if (st->mean.size() != d.num_features) throw DataError("model and dataset differ in covariate dimension");
  for (auto& s : d.sequences) st->apply(s);
  d.standardization = st;
  return d;
}

inline Dataset dataset_for_model(const std::string& path, const TransFeatModel& model, const RunConfig& cfg) {
  Dataset d = load_dataset(path);
  if (d.num_features != model.hyperparams().num_features || d.num_types > model.hyperparams().num_types) {
    throw DataError("dataset shape (K=" + std::to_string(d.num_types) + ", F=" + std::to_string(d.num_features) +
                    ") does not match the model");
  }
  d.num_types = model.hyperparams().num_types;
  return prepare(std::move(d), model.split_seed.value_or(0), cfg.split_ratios, model.standardization);
}

inline Split split_or(const Options& o, Split fallback) { return o.split.empty() ? fallback : parse_split(o.split); }

inline int run_simulate(const Options& o) {
  RunConfig cfg = config_for(o);
  const std::string out = require_path(pick(o.out, cfg.paths.out), "--out");
  const std::uint64_t seed = require_seed(o);
  require_output(out);
  cfg.sim.validate();
  const Dataset d = generate_dataset(cfg.sim, cfg.sim.num_sequences, seed, worker_count());
  save_dataset(out, d);
  nlohmann::json truth = {{"ground_truth_importance", d.ground_truth_importance}};
  emit(out + ".truth.json", truth.dump(2) + "\n");
  std::cout << "simulated " << d.size() << " sequences (" << d.count(Split::train) << "/" << d.count(Split::val) << "/"
            << d.count(Split::test) << ") -> " << out << "\n";
  return exit_ok;
}

inline int run_train(const Options& o) {
  RunConfig cfg = config_for(o);
  const std::string data = require_path(pick(o.data, cfg.paths.data), "--data");
  const std::string out = require_path(pick(o.out, pick(o.model, cfg.paths.model)), "--out");
  const std::uint64_t seed = require_seed(o);
  require_input(data);
  require_output(out);
  cfg.model.validate();
  cfg.train.seed = seed;
  Dataset d = prepare(load_dataset(data), seed, cfg.split_ratios, std::nullopt);
  std::ostringstream log;
  TrainResult r = train(d, cfg.model, cfg.train, &log);
  r.model.split_seed = seed;
  save_model(out, r.model);
  emit(out + ".log.jsonl", log.str());
  std::cout << "trained " << r.log.size() << " epochs, best epoch " << r.best_epoch << ", best val NLL "
            << r.log[r.best_epoch - 1].val_loss << " -> " << out << "\n";
  return exit_ok;
}

inline int run_evaluate(const Options& o) {
  RunConfig cfg = config_for(o);
  const std::string model_path = require_path(pick(o.model, cfg.paths.model), "--model");
  const std::string data = require_path(pick(o.data, cfg.paths.data), "--data");
  require_input(model_path);
  require_input(data);
  if (!o.out.empty()) require_output(o.out);
  TransFeatModel model = load_model(model_path);
  const Dataset d = dataset_for_model(data, model, cfg);
  const Split split = split_or(o, Split::test);
  nlohmann::json j = to_json(evaluate(model, d, split));
  j["split"] = split_name(split);
  j["majority_baseline"] = majority_baseline(d, split);
  emit(o.out, j.dump(2) + "\n");
  return exit_ok;
}

inline int run_rank_features(const Options& o) {
  RunConfig cfg = config_for(o);
  const std::string model_path = require_path(pick(o.model, cfg.paths.model), "--model");
  const std::string data = require_path(pick(o.data, cfg.paths.data), "--data");
  require_input(model_path);
  require_input(data);
  if (!o.out.empty()) require_output(o.out);
  TransFeatModel model = load_model(model_path);
  const Dataset d = dataset_for_model(data, model, cfg);
  const Split split = split_or(o, Split::test);
  const ImportanceReport r = importance_report(d, split, model.params(), model.hyperparams());
  nlohmann::json j = importance_to_json(r.corpus, split, d.feature_names, d.ground_truth_importance);
  j["per_sequence"] = r.per_sequence;
  emit(o.out, j.dump(2) + "\n");
  return exit_ok;
}

inline int run_ablate(const Options& o) {
  RunConfig cfg = config_for(o);
  const std::string model_path = require_path(pick(o.model, cfg.paths.model), "--model");
  const std::string data = require_path(pick(o.data, cfg.paths.data), "--data");
  const std::uint64_t seed = require_seed(o);
  require_input(model_path);
  require_input(data);
  if (!o.out.empty()) require_output(o.out);
  TransFeatModel model = load_model(model_path);
  const Dataset d = dataset_for_model(data, model, cfg);
  const auto ranking = importance_ranking(
      corpus_importance(d, split_or(o, Split::test), model.params(), model.hyperparams()));
  cfg.train.seed = seed;
  HyperParams hp = cfg.model;
  hp.time_scale = model.hyperparams().time_scale;
  const auto curve = ablation_study(d, hp, cfg.train, ranking, worker_count());
  std::ostringstream tsv;
  tsv << "k\tremoved_feature\ttest_accuracy\n";
  for (const auto& p : curve) {
    tsv << p.removed_count << '\t' << (p.removed_feature ? std::to_string(*p.removed_feature) : "-") << '\t'
        << nlohmann::json(p.test_accuracy).dump() << '\n';
  }
  emit(o.out, tsv.str());
  return exit_ok;
}

inline int run_gradcheck(const Options& o) {
  const RunConfig cfg = o.config.empty() ? tiny_preset() : load_config(o.config);
  const ModelCheckResult r = check_model_gradients(cfg.model, cfg.gradcheck, o.seed.value_or(0));
  nlohmann::json j = {{"max_rel_error", r.check.max_rel_error},
                      {"worst_param", r.check.worst_param},
                      {"worst_index", r.check.worst_index},
                      {"analytic", r.check.analytic},
                      {"numeric", r.check.numeric},
                      {"checked", r.check.checked},
                      {"attempts", r.attempts}};
  std::cout << j.dump() << "\n";
  if (!(r.check.max_rel_error <= cfg.gradcheck.tolerance)) {
    throw NumericalError("gradient check failed: max relative error " + std::to_string(r.check.max_rel_error) +
                         " > " + std::to_string(cfg.gradcheck.tolerance));
  }
  return exit_ok;
}

inline void report(const char* kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace cli_detail

/// Parses argv, runs one subcommand and maps failures to exit codes.
inline int cli_dispatch(int argc, const char* const* argv) {
  using namespace cli_detail;
  CLI::App app{"Covariate temporal point process toolkit", "covtpp"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "covtpp 1.0");
  Options o;
  std::uint64_t seed = 0;

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Command commands[] = {
      {"simulate", "Generate a synthetic dataset", run_simulate},
      {"train", "Fit a model and write the model container and epoch log", run_train},
      {"evaluate", "Write metrics of a trained model on one split", run_evaluate},
      {"rank-features", "Write the feature-importance report", run_rank_features},
      {"ablate", "Cumulative feature ablation with retraining", run_ablate},
      {"gradcheck", "Finite-difference check of model gradients", run_gradcheck},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", o.config, "Config file (INI) or preset name 'tiny'");
    sub->add_option("--data", o.data, "Dataset file (JSON lines)");
    sub->add_option("--model", o.model, "Model container (JSON)");
    sub->add_option("--out", o.out, "Output path");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_option("--split", o.split, "Split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report("usage", e.what());
    std::cerr << app.help();
    return exit_usage;
  }

  for (auto [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    if (sub->count("--seed") > 0) o.seed = seed;
    try {
      return cmd->run(o);
    } catch (const UsageError& e) {
      report("usage", e.what());
      std::cerr << sub->help();
      return exit_usage;
    } catch (const NumericalError& e) {
      report("numerical", e.what());
      return exit_numerical;
    } catch (const DataError& e) {
      report("data", e.what());
      return exit_data;
    } catch (const std::invalid_argument& e) {
      report("data", e.what());
      return exit_data;
    } catch (const nlohmann::json::exception& e) {
      report("data", e.what());
      return exit_data;
    } catch (const std::exception& e) {
      report("internal", e.what());
      return exit_numerical;
    }
  }
  return exit_usage;
}

}  // namespace covtpp
