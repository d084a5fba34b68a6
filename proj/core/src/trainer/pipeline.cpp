// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/pipeline.hpp"

#include "stproph/error.hpp"

namespace stproph::trainer {

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'; expected train, val or test");
}

const std::vector<data::WindowSample>& PreparedData::samples(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    default: return test;
  }
}

PreparedData prepare(const data::SeriesMatrix& raw, const data::SplitSpec& split, std::size_t window,
                     std::size_t horizon) {
  const auto ranges = data::split_chrono(raw.steps(), split);
  return prepare(raw, split, window, horizon, data::Standardizer::fit(raw, ranges.train));
}

PreparedData prepare(const data::SeriesMatrix& raw, const data::SplitSpec& split, std::size_t window,
                     std::size_t horizon, const data::Standardizer& standardizer) {
  if (standardizer.sensors() != raw.sensors()) {
    throw DataError("standardizer has " + std::to_string(standardizer.sensors()) + " sensors, data has " +
                    std::to_string(raw.sensors()));
  }
  PreparedData p;
  p.raw = raw;
  p.ranges = data::split_chrono(raw.steps(), split);
  p.standardizer = standardizer;
  p.standardized = standardizer.transform(raw);
  p.window = window;
  p.horizon = horizon;
  p.train = data::make_windows(p.standardized, p.ranges.train, window, horizon, &p.warnings);
  p.val = data::make_windows(p.standardized, p.ranges.val, window, horizon, &p.warnings);
  p.test = data::make_windows(p.standardized, p.ranges.test, window, horizon, &p.warnings);
  if (p.train.empty() || p.val.empty()) {
    throw DataError("dataset of " + std::to_string(raw.steps()) + " steps is too short for W=" +
                    std::to_string(window) + ", nu=" + std::to_string(horizon) + " in the train or val split");
  }
  return p;
}

std::vector<data::WindowSample> mask_inputs(const std::vector<data::WindowSample>& samples,
                                            const data::SeriesMatrix& masked) {
  std::vector<data::WindowSample> out = samples;
  for (auto& s : out) {
    const std::size_t N = s.input.rows(), W = s.input.cols();
    if (masked.sensors() != N || s.anchor > masked.steps() || s.anchor < W) {
      throw DataError("masked series does not cover the evaluation windows");
    }
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t t = s.anchor - W + w;
        s.input(n, w) = masked.values(n, t);
        s.input_mask(n, w) = masked.mask(n, t);
      }
  }
  return out;
}

Session::Session(PreparedData data, std::unique_ptr<text::TextProvider> provider)
    : data_(std::move(data)), provider_(std::move(provider)) {
  if (provider_) text_.emplace(*provider_, data_.standardizer, data_.raw.sensor_names);
}

EvalData Session::eval(Split s) { return eval(data_.samples(s)); }

EvalData Session::eval(const std::vector<data::WindowSample>& samples) {
  return {&samples, &data_.standardizer, text()};
}

TrainData Session::train_data() { return {eval(Split::train), eval(Split::val)}; }

}  // namespace stproph::trainer
