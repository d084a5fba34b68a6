// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "stproph/error.hpp"
#include "stproph/lora/memory_report.hpp"
#include "stproph/numerics/tape.hpp"
#include "stproph/trainer/checkpoint.hpp"
#include "stproph/trainer/config_io.hpp"
#include "stproph/trainer/gradcheck_suite.hpp"
#include "stproph/trainer/pipeline.hpp"

#ifndef STPROPH_VERSION
#define STPROPH_VERSION "0.0.0"
#endif

namespace stproph::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stproph::trainer;

constexpr const char* kCheckpointFile = "checkpoint.bin";
constexpr const char* kHistoryFile = "history.csv";
constexpr const char* kSummaryFile = "summary.json";
constexpr const char* kHorizonFile = "horizon_metrics.csv";
constexpr const char* kMetricsFile = "metrics.json";
constexpr const char* kAblationFile = "ablations.csv";

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

json metrics_json(const Metrics& m) {
  json j = json::object();
  for (const auto& [k, v] : m.values) j[k] = v;
  return j;
}

std::vector<std::size_t> all_horizons(std::size_t nu) {
  std::vector<std::size_t> h(nu);
  for (std::size_t i = 0; i < nu; ++i) h[i] = i + 1;
  return h;
}

/// horizon,mae,rmse,mape with one row per step and a final "avg" row.
std::string horizon_csv(const PredictionSet& p) {
  const std::size_t nu = p.mu.cols();
  const Metrics m = compute_metrics(p.mu, p.target, p.mask, all_horizons(nu));
  std::ostringstream out;
  out << std::setprecision(17) << "horizon,mae,rmse,mape\n";
  for (std::size_t h = 1; h <= nu; ++h) {
    const std::string s = std::to_string(h);
    out << h << ',' << m.at("mae@" + s) << ',' << m.at("rmse@" + s) << ',' << m.at("mape@" + s) << '\n';
  }
  out << "avg," << m.at("mae@avg") << ',' << m.at("rmse@avg") << ',' << m.at("mape@avg") << '\n';
  return out.str();
}

json provenance(const RunConfig& cfg, const std::string& command) {
  return {{"version", STPROPH_VERSION}, {"config_hash", config_hash(cfg)}, {"command", command}};
}

/// Loads the configured data and fixes the sensor count in the model section.
PreparedData load_prepared(RunConfig& cfg) {
  data::SeriesMatrix raw = load_dataset(cfg);
  if (cfg.model.sensors == 0) cfg.model.sensors = raw.sensors();
  if (cfg.model.sensors != raw.sensors()) {
    throw ConfigError("model.sensors is " + std::to_string(cfg.model.sensors) + " but the dataset has " +
                      std::to_string(raw.sensors()) + " sensors");
  }
  cfg.validate();
  return prepare(raw, cfg.dataset.split, cfg.model.window, cfg.model.horizon);
}

struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::vector<std::string> ablate;
  bool ablate_set = false;
  std::size_t runs = 1;
  std::string out;
  std::optional<std::size_t> epochs;
};

RunConfig resolve_config(const RunFlags& f, const EnvLookup& env) {
  RunConfig cfg = load_run_config(f.config);
  apply_environment(cfg, env);
  if (f.seed) cfg.train.seed = *f.seed;
  if (!f.variant.empty()) cfg.model.variant = parse_variant(f.variant);
  if (f.ablate_set) cfg.model.ablations = {f.ablate.begin(), f.ablate.end()};
  if (!f.out.empty()) cfg.output.dir = f.out;
  if (f.epochs) cfg.train.epochs = *f.epochs;
  cfg.model.validate();
  return cfg;
}

CheckpointMeta make_meta(const RunConfig& cfg, const Model& model, const Session& session, const TrainHistory& h) {
  CheckpointMeta meta;
  meta.model = model.config();
  meta.model_seed = model.seed();
  meta.train = cfg.train;
  meta.standardizer = session.data().standardizer;
  meta.rng_seed = h.rng_seed;
  meta.rng_state = h.rng_state;
  meta.run_config = to_json(cfg);
  return meta;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunFlags& flags, const EnvLookup& env, std::ostream& out) {
  if (flags.runs == 0) throw ConfigError("--runs must be at least 1");
  RunConfig cfg = resolve_config(flags, env);
  PreparedData prepared = load_prepared(cfg);
  const fs::path dir = cfg.output.dir;

  json summary = provenance(cfg, "train");
  summary["seed"] = cfg.train.seed;
  summary["variant"] = to_string(cfg.model.variant);
  summary["ablations"] = cfg.model.ablations;
  summary["runs"] = flags.runs;
  summary["warnings"] = prepared.warnings;

  std::map<std::string, std::vector<double>> per_metric;
  json runs = json::array();
  for (std::size_t run = 0; run < flags.runs; ++run) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + run;
    Session session(prepared, make_provider(cfg));
    Model model(cfg.model, tc.seed);
    const TrainHistory history = train(model, session.train_data(), tc, [&](const EpochRecord& e) {
      out << "run " << run + 1 << " epoch " << e.epoch << " train_loss " << e.train_loss << " val_mae " << e.val_mae
          << " lr " << e.lr << '\n';
    });
    const EvalData test = session.eval(Split::test);
    const PredictionSet pred = predict(model, test);
    Metrics metrics = evaluate(model, test);

    const std::string suffix = run == 0 ? "" : "_run" + std::to_string(run + 1);
    write_file(dir / ("history" + suffix + ".csv"), history.to_csv());
    write_file(dir / ("horizon_metrics" + suffix + ".csv"), horizon_csv(pred));
    save_checkpoint((dir / ("checkpoint" + suffix + ".bin")).string(), model, make_meta(cfg, model, session, history));

    for (const auto& [k, v] : metrics.values) per_metric[k].push_back(v);
    json r = {{"seed", tc.seed},
              {"best_epoch", history.best_epoch},
              {"best_val_mae", history.best_val_mae},
              {"epochs_run", history.epochs.size()},
              {"stopped_early", history.stopped_early},
              {"test_samples", metrics.samples},
              {"metrics", metrics_json(metrics)}};
    if (session.provider()) r["text_warnings"] = session.provider()->warnings();
    runs.push_back(r);
    if (run == 0) {
      summary["parameters"] = model.parameter_count();
      json breakdown = json::object();
      for (const auto& [name, count] : model.parameter_breakdown()) breakdown[name] = count;
      summary["parameter_breakdown"] = breakdown;
      summary["ha_baseline"] = metrics_json(evaluate_ha(test, cfg.model.horizon));
    }
  }
  summary["run_results"] = runs;
  json aggregate = json::object();
  for (const auto& [k, values] : per_metric) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    aggregate[k] = {{"mean", mean}, {"std", sd}};
  }
  summary["metrics"] = aggregate;
  summary["files"] = {{"checkpoint", kCheckpointFile}, {"history", kHistoryFile}, {"horizon_metrics", kHorizonFile}};
  write_file(dir / kSummaryFile, summary.dump(2) + "\n");
  out << "test mae@avg " << aggregate["mae@avg"]["mean"].get<double>() << "; outputs in " << dir.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// finetune

int cmd_finetune(const RunFlags& flags, const std::string& checkpoint, const EnvLookup& env, std::ostream& out) {
  RunConfig cfg = resolve_config(flags, env);
  LoadedCheckpoint loaded = load_checkpoint(checkpoint);
  Model& model = *loaded.model;
  cfg.model = model.config();
  PreparedData prepared = load_prepared(cfg);
  Session session(std::move(prepared), make_provider(cfg));
  const fs::path dir = cfg.output.dir;

  const Metrics before = evaluate(model, session.eval(Split::val));
  const FinetuneReport report = adapter_finetune(model, session.train_data(), cfg.train, [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_mae " << e.val_mae << '\n';
  });
  const Metrics after = evaluate(model, session.eval(Split::val));

  write_file(dir / kHistoryFile, report.history.to_csv());
  save_checkpoint((dir / kCheckpointFile).string(), model, make_meta(cfg, model, session, report.history));
  json summary = provenance(cfg, "finetune");
  summary["pretrained"] = checkpoint;
  summary["trainable_parameters"] = report.trainable;
  summary["total_parameters"] = report.total;
  summary["frozen_hash_before"] = report.frozen_hash_before;
  summary["frozen_hash_after"] = report.frozen_hash_after;
  summary["val_before"] = metrics_json(before);
  summary["val_after"] = metrics_json(after);
  summary["best_epoch"] = report.history.best_epoch;
  write_file(dir / kSummaryFile, summary.dump(2) + "\n");
  out << "val mae@avg " << before.at("mae@avg") << " -> " << after.at("mae@avg") << "; trainable " << report.trainable
      << " of " << report.total << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalFlags {
  std::string checkpoint;
  std::string split = "test";
  std::string mask;
  double ratio = 0.0;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_eval(const EvalFlags& f, const EnvLookup& env, std::ostream& out) {
  if (!fs::exists(f.checkpoint)) throw DataError("checkpoint " + f.checkpoint + " does not exist");
  LoadedCheckpoint loaded = load_checkpoint(f.checkpoint);
  RunConfig cfg = parse_run_config(loaded.meta.run_config, f.checkpoint + " (run config)");
  apply_environment(cfg, env);
  cfg.model = loaded.meta.model;
  const Split split = parse_split(f.split);
  if (!f.mask.empty() && f.mask != "point" && f.mask != "block") {
    throw ConfigError("--mask must be point or block");
  }
  if (f.ratio < 0.0 || f.ratio >= 1.0) throw ConfigError("--ratio must lie in [0, 1)");
  const std::uint64_t seed = f.seed.value_or(loaded.meta.rng_seed);

  const data::SeriesMatrix raw = load_dataset(cfg);
  Session session(prepare(raw, cfg.dataset.split, cfg.model.window, cfg.model.horizon, loaded.meta.standardizer),
                  make_provider(cfg));
  std::vector<data::WindowSample> samples = session.data().samples(split);
  if (!f.mask.empty()) {
    const auto& z = session.data().standardized;
    const data::SeriesMatrix masked =
        f.mask == "point" ? data::mask_point_mcar(z, f.ratio, seed) : data::mask_block_mcar(z, f.ratio, {}, seed);
    samples = mask_inputs(samples, masked);
  }
  const EvalData data = session.eval(samples);
  const PredictionSet pred = predict(*loaded.model, data);
  const Metrics metrics = evaluate(*loaded.model, data);

  json doc = provenance(cfg, "eval");
  doc["checkpoint"] = f.checkpoint;
  doc["split"] = f.split;
  doc["mask"] = f.mask.empty() ? json(nullptr) : json(f.mask);
  doc["ratio"] = f.mask.empty() ? 0.0 : f.ratio;
  doc["seed"] = seed;
  doc["samples"] = metrics.samples;
  doc["metrics"] = metrics_json(metrics);
  out << doc.dump(2) << '\n';
  const std::string dir = !f.out.empty() ? f.out : cfg.output.dir;
  write_file(fs::path(dir) / kMetricsFile, doc.dump(2) + "\n");
  write_file(fs::path(dir) / kHorizonFile, horizon_csv(pred));
  return kOk;
}

// ---------------------------------------------------------------------------
// ablate

int cmd_ablate(const RunFlags& flags, const EnvLookup& env, std::ostream& out) {
  RunConfig cfg = resolve_config(flags, env);
  PreparedData prepared = load_prepared(cfg);
  Session session(std::move(prepared), make_provider(cfg));
  const auto rows = run_ablations(cfg.model, cfg.train, session.train_data(), session.eval(Split::test));
  const std::vector<std::string> keys{"mae@3", "rmse@3", "mape@3", "mae@6",   "rmse@6",
                                      "mape@6", "mae@12", "rmse@12", "mape@12", "mae@avg",
                                      "rmse@avg", "mape@avg"};
  std::ostringstream csv;
  csv << std::setprecision(17) << "variant,parameters";
  for (const auto& k : keys) csv << ',' << k;
  csv << '\n';
  for (const auto& r : rows) {
    csv << r.variant << ',' << r.parameters;
    for (const auto& k : keys) {
      auto it = r.metrics.values.find(k);
      csv << ',';
      if (it != r.metrics.values.end()) csv << it->second;
    }
    csv << '\n';
    out << std::left << std::setw(12) << r.variant << " params " << std::setw(8) << r.parameters << " mae@avg "
        << r.metrics.at("mae@avg") << '\n';
  }
  write_file(fs::path(cfg.output.dir) / kAblationFile, csv.str());
  return kOk;
}

// ---------------------------------------------------------------------------
// mask, synth

int cmd_mask(const RunFlags& flags, const std::string& kind, double ratio, const std::string& output,
             const EnvLookup& env, std::ostream& out) {
  RunConfig cfg = resolve_config(flags, env);
  const data::SeriesMatrix raw = load_dataset(cfg);
  if (kind != "point" && kind != "block") throw ConfigError("--mask must be point or block");
  if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("--ratio must lie in [0, 1)");
  const std::uint64_t seed = cfg.train.seed;
  const data::SeriesMatrix masked =
      kind == "point" ? data::mask_point_mcar(raw, ratio, seed) : data::mask_block_mcar(raw, ratio, {}, seed);
  if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  data::save_csv(output, masked);
  out << "masked " << raw.observed_count() - masked.observed_count() << " of " << raw.observed_count()
      << " observed entries -> " << output << '\n';
  return kOk;
}

int cmd_synth(const std::string& kind, std::size_t steps, std::uint64_t seed, const std::string& output,
              const std::string& sigma_output, std::ostream& out) {
  data::SeriesMatrix x;
  num::Tensor sigma;
  if (kind == "coupled") {
    x = data::synthetic_coupled(steps, seed);
  } else if (kind == "heteroscedastic") {
    x = data::synthetic_heteroscedastic(steps, seed, &sigma);
  } else if (kind == "toy_sine") {
    x = data::toy_sine(steps);
  } else {
    throw ConfigError("--kind must be coupled, heteroscedastic or toy_sine");
  }
  if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  data::save_csv(output, x);
  if (!sigma_output.empty()) {
    data::SeriesMatrix s(x.sensors(), x.steps());
    s.values = sigma;
    s.sensor_names = x.sensor_names;
    data::save_csv(sigma_output, s);
  }
  out << "wrote " << x.sensors() << " x " << x.steps() << " series to " << output << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// adapter-report, gradcheck

int cmd_adapter_report(std::uint64_t d, std::uint64_t r, std::uint64_t batch, std::uint64_t tokens, std::ostream& out) {
  out << lora::to_json(lora::memory_report(d, r, batch, tokens)) << '\n';
  return kOk;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, const std::string& fault, std::ostream& out,
                  std::ostream& err) {
  if (scope != "layer" && scope != "model" && scope != "all") throw ConfigError("--scope must be layer, model or all");
  num::set_fault_injection(fault);
  std::vector<GradCheckEntry> entries;
  try {
    if (scope != "model") entries = check_all_ops(seed);
    if (scope != "layer") {
      auto model = check_model(seed);
      entries.insert(entries.end(), model.begin(), model.end());
    }
  } catch (...) {
    num::set_fault_injection("");
    throw;
  }
  num::set_fault_injection("");
  std::vector<std::string> failed;
  out << std::left << std::setw(20) << "component" << std::setw(14) << "max_rel_error" << std::setw(11) << "tolerance"
      << "status\n";
  for (const auto& e : entries) {
    out << std::left << std::setw(20) << e.component << std::setw(14) << std::setprecision(3) << e.max_rel_error
        << std::setw(11) << e.tolerance << (e.passed() ? "ok" : "FAIL") << '\n';
    if (!e.passed()) failed.push_back(e.component);
  }
  if (failed.empty()) return kOk;
  err << "gradient check failed for:";
  for (const auto& f : failed) err << ' ' << f;
  err << '\n';
  return kGradCheckFailed;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, const EnvLookup& env) {
  CLI::App app{"Spatio-temporal forecasting with prompt retrieval, grouped attention and text fusion", "stproph"};
  app.require_subcommand(1);
  app.set_version_flag("--version", STPROPH_VERSION);

  RunFlags rf;
  const auto add_run_flags = [&rf](CLI::App* c, bool needs_runs) {
    c->add_option("--config", rf.config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
    c->add_option("--seed", rf.seed, "Seed for initialization, batching and masking");
    c->add_option("--variant", rf.variant, "point or uncertainty");
    c->add_option("--ablate", rf.ablate, "Components to remove: LLMs, DP, IntraS, InterS, CMA");
    c->add_option("--out", rf.out, "Output directory");
    c->add_option("--epochs", rf.epochs, "Override train.epochs");
    if (needs_runs) c->add_option("--runs", rf.runs, "Independent runs with consecutive seeds");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and summary");
  add_run_flags(train_cmd, true);

  std::string pretrained;
  auto* finetune_cmd = app.add_subcommand("finetune", "Adapter fine-tuning of a pretrained checkpoint");
  add_run_flags(finetune_cmd, false);
  finetune_cmd->add_option("--checkpoint", pretrained, "Pretrained checkpoint")->required();

  EvalFlags ef;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint, optionally on masked inputs");
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", ef.split, "train, val or test");
  eval_cmd->add_option("--mask", ef.mask, "point or block");
  eval_cmd->add_option("--ratio", ef.ratio, "Share of observed inputs to mask");
  eval_cmd->add_option("--seed", ef.seed, "Masking seed");
  eval_cmd->add_option("--out", ef.out, "Output directory");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train the full model and every single-component ablation");
  add_run_flags(ablate_cmd, false);

  std::string mask_kind = "point", mask_output;
  double mask_ratio = 0.0;
  auto* mask_cmd = app.add_subcommand("mask", "Write a copy of the dataset with simulated missing values");
  add_run_flags(mask_cmd, false);
  mask_cmd->add_option("--mask", mask_kind, "point or block");
  mask_cmd->add_option("--ratio", mask_ratio, "Share of observed entries to mask")->required();
  mask_cmd->add_option("--output", mask_output, "CSV to write")->required();

  std::string synth_kind = "coupled", synth_output, synth_sigma;
  std::size_t synth_steps = 2000;
  std::uint64_t synth_seed = 7;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset as CSV");
  synth_cmd->add_option("--kind", synth_kind, "coupled, heteroscedastic or toy_sine");
  synth_cmd->add_option("--steps", synth_steps, "Number of timesteps");
  synth_cmd->add_option("--seed", synth_seed, "Generator seed");
  synth_cmd->add_option("--output", synth_output, "CSV to write")->required();
  synth_cmd->add_option("--sigma-output", synth_sigma, "CSV of the true noise level (heteroscedastic)");

  std::uint64_t rep_d = 4096, rep_r = 16, rep_batch = 1, rep_tokens = 1;
  auto* report_cmd = app.add_subcommand("adapter-report", "Parameter and activation accounting for LoRA variants");
  report_cmd->add_option("--d", rep_d, "Layer width");
  report_cmd->add_option("--r", rep_r, "Adapter rank (even)");
  report_cmd->add_option("--batch", rep_batch, "Batch size");
  report_cmd->add_option("--tokens", rep_tokens, "Tokens per sample");

  std::string gc_scope = "all", gc_fault;
  std::uint64_t gc_seed = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full model");
  gc_cmd->add_option("--scope", gc_scope, "layer, model or all");
  gc_cmd->add_option("--seed", gc_seed, "Seed for inputs");
  gc_cmd->add_option("--inject-fault", gc_fault, "Scale the backward of this op (test hook)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }
  rf.ablate_set = !rf.ablate.empty();

  try {
    if (*train_cmd) return cmd_train(rf, env, out);
    if (*finetune_cmd) return cmd_finetune(rf, pretrained, env, out);
    if (*eval_cmd) return cmd_eval(ef, env, out);
    if (*ablate_cmd) return cmd_ablate(rf, env, out);
    if (*mask_cmd) return cmd_mask(rf, mask_kind, mask_ratio, mask_output, env, out);
    if (*synth_cmd) return cmd_synth(synth_kind, synth_steps, synth_seed, synth_output, synth_sigma, out);
    if (*report_cmd) return cmd_adapter_report(rep_d, rep_r, rep_batch, rep_tokens, out);
    if (*gc_cmd) return cmd_gradcheck(gc_scope, gc_seed, gc_fault, out, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace stproph::cli
