// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/train.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "stproph/error.hpp"
#include "stproph/fusion/fusion_head.hpp"
#include "stproph/numerics/ops.hpp"
#include "stproph/numerics/optim.hpp"

namespace stproph::trainer {

void TrainConfig::validate() const {
  if (epochs == 0 || batch == 0) throw ConfigError("train.epochs and train.batch must be positive");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (plateau_patience == 0 || early_stop_patience == 0) throw ConfigError("train patience values must be positive");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("train.plateau_factor must lie in (0, 1)");
  if (adapter.enabled) {
    if (adapter.epochs == 0 || adapter.batch == 0) throw ConfigError("adapter epochs and batch must be positive");
    if (!(adapter.lr > 0.0) || adapter.weight_decay < 0.0) throw ConfigError("adapter lr must be positive, weight decay >= 0");
    if (adapter.dropout < 0.0 || adapter.dropout >= 1.0) throw ConfigError("adapter dropout must lie in [0, 1)");
  }
}

PlateauScheduler::PlateauScheduler(double lr, std::size_t patience, double factor)
    : lr_(lr), patience_(patience), factor_(factor), best_(INFINITY) {}

double PlateauScheduler::step(double score) {
  if (score < best_) {
    best_ = score;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    bad_epochs_ = 0;
  }
  return lr_;
}

bool EarlyStopping::update(double score) {
  if (score < best_) {
    best_ = score;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

// ---------------------------------------------------------------------------
// Batches

TextSource::TextSource(text::TextProvider& provider, const data::Standardizer& standardizer,
                       std::vector<std::string> sensor_names)
    : provider_(provider), standardizer_(standardizer), names_(std::move(sensor_names)) {}

const text::WindowTokens& TextSource::tokens(const data::WindowSample& sample, std::size_t sensor) {
  const std::size_t W = sample.input.cols();
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t w = 0; w < W; ++w) {
    const double cell[2] = {sample.input(sensor, w), sample.input_mask(sensor, w)};
    h = num::fnv1a(std::string_view(reinterpret_cast<const char*>(cell), sizeof(cell)), h);
  }
  const auto key = std::make_tuple(sensor, sample.anchor, h);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  std::vector<double> raw(W);
  for (std::size_t w = 0; w < W; ++w) {
    raw[w] = sample.input_mask(sensor, w) != 0.0 ? standardizer_.inverse(sensor, sample.input(sensor, w)) : NAN;
  }
  text::WindowContext ctx;
  ctx.values = std::span<const double>(sample.input.row_ptr(sensor), W);
  ctx.raw = raw;
  ctx.sensor = sensor;
  ctx.sensor_name = sensor < names_.size() ? names_[sensor] : std::string();
  ctx.start = sample.anchor - W;
  auto tokens = provider_.embed(ctx);
  if (tokens.counts.size() != W) throw DataError("text provider returned tokens for the wrong number of steps");
  return cache_.emplace(key, std::move(tokens)).first->second;
}

Batch make_batch(const std::vector<const data::WindowSample*>& samples, TextSource* text) {
  if (samples.empty()) throw DataError("empty batch");
  const std::size_t N = samples.front()->input.rows(), W = samples.front()->input.cols();
  const std::size_t nu = samples.front()->target.cols(), B = samples.size();
  Batch b;
  b.samples = B;
  b.features = num::Tensor({B * N * W, 2});
  b.target = num::Tensor({B * N, nu});
  b.target_mask = num::Tensor({B * N, nu});
  std::vector<double> text_data;
  std::size_t dt = 0;
  if (text) b.text_offsets.push_back(0);
  for (std::size_t s = 0; s < B; ++s) {
    const auto& smp = *samples[s];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t r = s * N + n;
      for (std::size_t w = 0; w < W; ++w) {
        b.features((r * W) + w, 0) = smp.input(n, w);
        b.features((r * W) + w, 1) = smp.input_mask(n, w);
      }
      std::copy_n(smp.target.row_ptr(n), nu, b.target.row_ptr(r));
      std::copy_n(smp.target_mask.row_ptr(n), nu, b.target_mask.row_ptr(r));
      if (!text) continue;
      const auto& tok = text->tokens(smp, n);
      if (dt == 0) dt = tok.rows.cols();
      if (tok.rows.cols() != dt) throw DataError("text provider changed embedding width within a batch");
      text_data.insert(text_data.end(), tok.rows.storage().begin(), tok.rows.storage().end());
      for (std::size_t c : tok.counts) b.text_offsets.push_back(b.text_offsets.back() + c);
    }
  }
  if (text) b.text_rows = num::Tensor({b.text_offsets.back(), dt}, std::move(text_data));
  return b;
}

// ---------------------------------------------------------------------------
// Metrics

std::string TrainHistory::to_csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,val_mae,val_rmse,val_mape,lr\n";
  out << std::setprecision(17);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_mae << ',' << e.val_rmse << ',' << e.val_mape << ',' << e.lr
        << '\n';
  }
  return out.str();
}

double Metrics::at(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw Error("metric '" + key + "' was not computed");
  return it->second;
}

namespace {

struct Accum {
  double abs = 0.0, sq = 0.0, pct = 0.0;
  std::size_t n = 0, npct = 0;
  void add(double p, double y) {
    const double e = p - y;
    abs += std::abs(e);
    sq += e * e;
    ++n;
    if (std::abs(y) >= 1e-3) {
      pct += std::abs(e / y);
      ++npct;
    }
  }
  void emit(Metrics& m, const std::string& suffix) const {
    m.values["mae@" + suffix] = n ? abs / static_cast<double>(n) : 0.0;
    m.values["rmse@" + suffix] = n ? std::sqrt(sq / static_cast<double>(n)) : 0.0;
    m.values["mape@" + suffix] = npct ? 100.0 * pct / static_cast<double>(npct) : 0.0;
  }
};

}  // namespace

Metrics compute_metrics(const num::Tensor& pred, const num::Tensor& target, const num::Tensor& mask,
                        const std::vector<std::size_t>& horizons) {
  if (pred.shape() != target.shape() || (!mask.empty() && mask.shape() != target.shape())) {
    throw ShapeError("metrics: prediction, target and mask shapes differ");
  }
  if (pred.empty()) throw DataError("metrics: nothing to evaluate");
  const std::size_t rows = pred.rows(), nu = pred.cols();
  Metrics m;
  Accum all;
  std::vector<Accum> per(nu);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < nu; ++h) {
      if (!mask.empty() && mask(r, h) == 0.0) continue;
      per[h].add(pred(r, h), target(r, h));
      all.add(pred(r, h), target(r, h));
    }
  for (std::size_t h : horizons)
    if (h >= 1 && h <= nu) per[h - 1].emit(m, std::to_string(h));
  all.emit(m, "avg");
  return m;
}

PredictionSet predict(Model& model, const EvalData& data, std::size_t batch) {
  if (!data.samples || data.samples->empty()) throw DataError("evaluation split has no windows");
  if (!data.standardizer) throw ConfigError("evaluation needs a fitted standardizer");
  TextSource* text = model.uses_text() ? data.text : nullptr;
  if (model.uses_text() && !text) throw ConfigError("model uses text embeddings but no text provider is configured");
  const auto& samples = *data.samples;
  const std::size_t N = model.config().sensors, nu = model.config().horizon, S = samples.size();
  PredictionSet out{num::Tensor({S * N, nu}), {}, num::Tensor({S * N, nu}), num::Tensor({S * N, nu})};
  const bool unc = model.config().variant == Variant::uncertainty;
  if (unc) out.sigma = num::Tensor({S * N, nu});
  const auto& sd = data.standardizer->stddev();
  for (std::size_t begin = 0; begin < S; begin += batch) {
    const std::size_t end = std::min(S, begin + batch);
    std::vector<const data::WindowSample*> chunk;
    for (std::size_t i = begin; i < end; ++i) chunk.push_back(&samples[i]);
    Batch b = make_batch(chunk, text);
    num::Tape tape;
    tape.set_grad_enabled(false);
    Prediction p = model.forward(tape, b);
    const num::Tensor mu = data.standardizer->inverse_rows(p.mu.value());
    const num::Tensor y = data.standardizer->inverse_rows(b.target);
    const std::size_t row0 = begin * N;
    std::copy(mu.storage().begin(), mu.storage().end(), out.mu.row_ptr(row0));
    std::copy(y.storage().begin(), y.storage().end(), out.target.row_ptr(row0));
    std::copy(b.target_mask.storage().begin(), b.target_mask.storage().end(), out.mask.row_ptr(row0));
    if (unc) {
      const num::Tensor& s2 = p.sigma2->value();
      for (std::size_t r = 0; r < s2.rows(); ++r)
        for (std::size_t h = 0; h < nu; ++h) out.sigma(row0 + r, h) = std::sqrt(s2(r, h)) * sd[r % N];
    }
  }
  return out;
}

Metrics evaluate(Model& model, const EvalData& data) {
  const PredictionSet p = predict(model, data);
  Metrics m = compute_metrics(p.mu, p.target, p.mask);
  m.samples = data.samples->size();
  if (!p.sigma.empty()) {
    double sigma_sum = 0.0;
    std::size_t inside = 0, count = 0;
    for (std::size_t i = 0; i < p.mu.size(); ++i) {
      if (p.mask[i] == 0.0) continue;
      sigma_sum += p.sigma[i];
      inside += std::abs(p.target[i] - p.mu[i]) <= 1.96 * p.sigma[i];
      ++count;
    }
    m.values["sigma_mean"] = count ? sigma_sum / static_cast<double>(count) : 0.0;
    m.values["coverage95"] = count ? static_cast<double>(inside) / static_cast<double>(count) : 0.0;
  }
  return m;
}

num::Tensor ha_forecast(const data::WindowSample& sample, const data::Standardizer& standardizer, std::size_t horizon) {
  const std::size_t N = sample.input.rows(), W = sample.input.cols();
  num::Tensor out({N, horizon});
  for (std::size_t n = 0; n < N; ++n) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t w = 0; w < W; ++w) {
      if (sample.input_mask(n, w) == 0.0) continue;
      sum += standardizer.inverse(n, sample.input(n, w));
      ++count;
    }
    const double v = count ? sum / static_cast<double>(count) : standardizer.mean()[n];
    for (std::size_t h = 0; h < horizon; ++h) out(n, h) = v;
  }
  return out;
}

Metrics evaluate_ha(const EvalData& data, std::size_t horizon) {
  if (!data.samples || data.samples->empty()) throw DataError("evaluation split has no windows");
  const auto& samples = *data.samples;
  const std::size_t N = samples.front().input.rows(), S = samples.size();
  num::Tensor pred({S * N, horizon}), y({S * N, horizon}), mask({S * N, horizon});
  for (std::size_t s = 0; s < S; ++s) {
    const num::Tensor f = ha_forecast(samples[s], *data.standardizer, horizon);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t h = 0; h < horizon; ++h) {
        pred(s * N + n, h) = f(n, h);
        y(s * N + n, h) = data.standardizer->inverse(n, samples[s].target(n, h));
        mask(s * N + n, h) = samples[s].target_mask(n, h);
      }
  }
  Metrics m = compute_metrics(pred, y, mask);
  m.samples = S;
  return m;
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Schedule {
  std::size_t epochs;
  std::size_t batch;
  double lr;
  double weight_decay;
  std::size_t plateau_patience;
  double plateau_factor;
  std::size_t early_stop_patience;
  std::uint64_t seed;
  bool dropout;
};

TrainHistory run_training(Model& model, const TrainData& data, const Schedule& sc, const EpochCallback& on_epoch) {
  if (!data.train.samples || data.train.samples->empty()) throw DataError("training split has no windows");
  if (!data.val.samples || data.val.samples->empty()) throw DataError("validation split has no windows");
  TextSource* text = model.uses_text() ? data.train.text : nullptr;
  if (model.uses_text() && !text) throw ConfigError("model uses text embeddings but no text provider is configured");

  num::ParameterList params = model.parameters();
  num::Adam adam(params, {sc.lr, 0.9, 0.999, 1e-8, sc.weight_decay});
  PlateauScheduler scheduler(sc.lr, sc.plateau_patience, sc.plateau_factor);
  EarlyStopping stopper(sc.early_stop_patience);
  num::Rng rng = num::Rng(sc.seed).split("train");
  num::Rng dropout_rng = rng.split("dropout");

  const auto& samples = *data.train.samples;
  std::vector<std::size_t> order(samples.size());
  std::vector<num::Tensor> best_values;
  const bool unc = model.config().variant == Variant::uncertainty;

  TrainHistory history;
  history.rng_seed = sc.seed;
  history.rng_state = rng.state();
  for (std::size_t epoch = 1; epoch <= sc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    num::Rng epoch_rng = rng.split("epoch" + std::to_string(epoch));
    epoch_rng.shuffle(order);
    const double lr = adam.lr();
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += sc.batch) {
      const std::size_t end = std::min(order.size(), begin + sc.batch);
      std::vector<const data::WindowSample*> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(&samples[order[i]]);
      Batch b = make_batch(chunk, text);
      num::Tape tape;
      if (sc.dropout) tape.set_dropout_rng(&dropout_rng);
      Prediction p = model.forward(tape, b);
      num::Var loss;
      if (unc) {
        double used = 0.0;
        for (double v : b.target_mask.storage()) used += v != 0.0;
        loss = num::scale(fusion::gaussian_nll(p.mu, *p.sigma2, b.target, b.target_mask), used > 0.0 ? 1.0 / used : 0.0);
      } else {
        loss = fusion::mae_loss(p.mu, b.target, b.target_mask);
      }
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batches + 1));
      }
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += value;
      ++batches;
    }
    const Metrics val = evaluate(model, data.val);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_mae = val.at("mae@avg");
    rec.val_rmse = val.at("rmse@avg");
    rec.val_mape = val.at("mape@avg");
    rec.lr = lr;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (stopper.update(rec.val_mae)) {
      history.best_epoch = epoch;
      history.best_val_mae = rec.val_mae;
      best_values.clear();
      for (auto* p : params) best_values.push_back(p->value);
    }
    adam.set_lr(scheduler.step(rec.val_mae));
    if (stopper.should_stop()) {
      history.stopped_early = epoch < sc.epochs;
      break;
    }
  }
  for (std::size_t i = 0; i < params.size() && i < best_values.size(); ++i) params[i]->value = best_values[i];
  adam.zero_grad();
  return history;
}

}  // namespace

TrainHistory train(Model& model, const TrainData& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const Schedule sc{config.epochs, config.batch, config.lr, 0.0, config.plateau_patience, config.plateau_factor,
                    config.early_stop_patience, config.seed, false};
  return run_training(model, data, sc, on_epoch);
}

FinetuneReport adapter_finetune(Model& model, const TrainData& data, const TrainConfig& config,
                                const EpochCallback& on_epoch) {
  config.validate();
  const AdapterConfig& ac = config.adapter;
  if (!model.has_adapters()) model.attach_adapters(ac.rank, ac.alpha, ac.dropout, config.seed);
  model.freeze_for_adapters(ac.train_heads);
  FinetuneReport report;
  report.frozen_hash_before = model.frozen_hash();
  for (auto* p : model.parameters()) {
    report.total += p->value.size();
    if (p->trainable) report.trainable += p->value.size();
  }
  const Schedule sc{ac.epochs, ac.batch, ac.lr, ac.weight_decay, config.plateau_patience, config.plateau_factor,
                    config.early_stop_patience, config.seed ^ 0xada9u, ac.dropout > 0.0};
  report.history = run_training(model, data, sc, on_epoch);
  report.frozen_hash_after = model.frozen_hash();
  return report;
}

std::vector<AblationRow> run_ablations(const ModelConfig& base, const TrainConfig& config, const TrainData& data,
                                       const EvalData& test) {
  std::vector<std::string> variants{""};
  for (const auto& a : ablation_names()) variants.push_back(a);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ModelConfig cfg = base;
    cfg.ablations.clear();
    if (!v.empty()) cfg.ablations.insert(v);
    Model model(cfg, config.seed);
    train(model, data, config);
    AblationRow row;
    row.variant = v.empty() ? "full" : "w/o " + v;
    row.parameters = model.parameter_count();
    row.metrics = evaluate(model, test);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace stproph::trainer
