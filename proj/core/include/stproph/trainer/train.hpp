// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "stproph/data/dataset.hpp"
#include "stproph/text/text_embed.hpp"
#include "stproph/trainer/model.hpp"

namespace stproph::trainer {

struct AdapterConfig {
  bool enabled = false;
  std::size_t rank = 16;
  std::optional<double> alpha;  // 1/r when unset
  double dropout = 0.05;
  double lr = 2e-4;
  double weight_decay = 1e-3;
  std::size_t epochs = 15;
  std::size_t batch = 16;
  bool train_heads = false;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 48;
  double lr = 1e-3;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.5;
  std::size_t early_stop_patience = 10;
  std::uint64_t seed = 0;
  AdapterConfig adapter;

  void validate() const;
};

/// Halves (by `factor`) the learning rate after `patience` consecutive epochs
/// without a strictly better validation score.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, std::size_t patience, double factor);
  /// Feeds one epoch's validation score; returns the rate for the next epoch.
  double step(double score);
  double lr() const { return lr_; }
  double best() const { return best_; }

 private:
  double lr_;
  std::size_t patience_;
  double factor_;
  double best_;
  std::size_t bad_epochs_ = 0;
};

/// Signals a stop once `patience` epochs pass without a new best score.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
  /// Returns true when the score is a new best.
  bool update(double score);
  bool should_stop() const { return since_best_ >= patience_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  double best_ = 1e300;
  std::size_t since_best_ = 0;
};

/// Caches provider output per (sensor, window start, window contents).
class TextSource {
 public:
  TextSource(text::TextProvider& provider, const data::Standardizer& standardizer,
             std::vector<std::string> sensor_names = {});
  const text::WindowTokens& tokens(const data::WindowSample& sample, std::size_t sensor);
  text::TextProvider& provider() { return provider_; }

 private:
  text::TextProvider& provider_;
  const data::Standardizer& standardizer_;
  std::vector<std::string> names_;
  std::map<std::tuple<std::size_t, std::size_t, std::uint64_t>, text::WindowTokens> cache_;
};

Batch make_batch(const std::vector<const data::WindowSample*>& samples, TextSource* text);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
  double val_rmse = 0.0;
  double val_mape = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based
  double best_val_mae = 0.0;
  bool stopped_early = false;
  std::uint64_t rng_seed = 0;
  std::string rng_state;  // training generator, for checkpoints

  /// epoch,train_loss,val_mae,val_rmse,val_mape,lr
  std::string to_csv() const;
};

/// Metrics in original units. Keys: mae@3, rmse@6, mape@12, mae@avg, ...
/// and, for the uncertainty variant, sigma_mean and coverage95.
struct Metrics {
  std::map<std::string, double> values;
  std::size_t samples = 0;
  double at(const std::string& key) const;
};

/// Metrics of already de-standardized predictions (rows are sensor series,
/// columns horizon steps). MAPE skips |y| < 1e-3 and is in percent.
Metrics compute_metrics(const num::Tensor& pred, const num::Tensor& target, const num::Tensor& mask,
                        const std::vector<std::size_t>& horizons = {3, 6, 12});

/// Everything needed to evaluate a model on one split.
struct EvalData {
  const std::vector<data::WindowSample>* samples = nullptr;
  const data::Standardizer* standardizer = nullptr;
  TextSource* text = nullptr;
};

struct PredictionSet {
  num::Tensor mu;      // (S*N) x nu, original units
  num::Tensor sigma;   // same shape, empty for the point variant
  num::Tensor target;  // original units
  num::Tensor mask;
};

PredictionSet predict(Model& model, const EvalData& data, std::size_t batch = 64);
Metrics evaluate(Model& model, const EvalData& data);

/// Per-sensor mean of the observed inputs, repeated over the horizon, in
/// original units; a sensor with no observed input uses its training mean.
num::Tensor ha_forecast(const data::WindowSample& sample, const data::Standardizer& standardizer, std::size_t horizon);
Metrics evaluate_ha(const EvalData& data, std::size_t horizon);

struct TrainData {
  EvalData train;
  EvalData val;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on mae (point) or mean Gaussian NLL (uncertainty); plateau schedule on
/// validation MAE, early stopping, best-epoch parameters restored at the end.
TrainHistory train(Model& model, const TrainData& data, const TrainConfig& config, const EpochCallback& on_epoch = {});

struct FinetuneReport {
  TrainHistory history;
  std::size_t trainable = 0;
  std::size_t total = 0;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

/// Attaches zero-initialized adapters to every backbone layer and trains only
/// the C factors with decoupled weight decay.
FinetuneReport adapter_finetune(Model& model, const TrainData& data, const TrainConfig& config,
                                const EpochCallback& on_epoch = {});

struct AblationRow {
  std::string variant;  // "full" or "w/o <name>"
  std::size_t parameters = 0;
  Metrics metrics;
};

/// Trains the full model and each single-component ablation with the same seed and data.
std::vector<AblationRow> run_ablations(const ModelConfig& base, const TrainConfig& config, const TrainData& data,
                                       const EvalData& test);

}  // namespace stproph::trainer
