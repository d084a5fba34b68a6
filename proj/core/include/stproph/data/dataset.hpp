// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "stproph/error.hpp"
#include "stproph/numerics/tensor.hpp"

namespace stproph::data {

/// N sensors x T timesteps with an observation mask (1 = observed).
struct SeriesMatrix {
  num::Tensor values;  // N x T, 0 where missing
  num::Tensor mask;    // N x T, 1 observed / 0 missing
  std::vector<std::string> sensor_names;
  std::string name;
  std::string granularity;

  SeriesMatrix() = default;
  SeriesMatrix(std::size_t sensors, std::size_t steps);

  std::size_t sensors() const { return values.empty() ? 0 : values.rows(); }
  std::size_t steps() const { return values.empty() ? 0 : values.cols(); }
  bool observed(std::size_t n, std::size_t t) const { return mask(n, t) != 0.0; }
  std::size_t observed_count() const;
  void set_missing(std::size_t n, std::size_t t) {
    mask(n, t) = 0.0;
    values(n, t) = 0.0;
  }
};

class CsvError : public DataError {
 public:
  enum class Kind { unreadable, empty, ragged, non_numeric };
  CsvError(Kind kind, std::size_t line, const std::string& what)
      : DataError(line ? "line " + std::to_string(line) + ": " + what : what), kind_(kind), line_(line) {}
  Kind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

/// Header row with sensor names, then one row per timestep. Empty cells and
/// "nan" (any case) are missing.
SeriesMatrix load_csv(const std::string& path);
void save_csv(const std::string& path, const SeriesMatrix& x);

struct Range {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const Range&) const = default;
};

struct SplitSpec {
  double train = 0.7;
  double val = 0.1;
  double test = 0.2;
};

struct SplitRanges {
  Range train, val, test;
};

/// Boundaries at floor(cumulative fraction * T).
SplitRanges split_chrono(std::size_t steps, const SplitSpec& spec);

/// Per-sensor z-score statistics fitted on observed entries of a range.
class Standardizer {
 public:
  static constexpr double kStdFloor = 1e-8;

  Standardizer() = default;
  Standardizer(std::vector<double> mean, std::vector<double> stddev);

  static Standardizer fit(const SeriesMatrix& x, Range train);

  /// Standardized copy; missing entries become 0.
  SeriesMatrix transform(const SeriesMatrix& x) const;
  SeriesMatrix inverse(const SeriesMatrix& z) const;
  double inverse(std::size_t sensor, double z) const { return z * stddev_[sensor] + mean_[sensor]; }
  double forward(std::size_t sensor, double x) const { return (x - mean_[sensor]) / stddev_[sensor]; }
  /// Rows of `z` are sensors (repeated every `sensors` rows for a batch).
  num::Tensor inverse_rows(const num::Tensor& z) const;

  const std::vector<double>& mean() const { return mean_; }
  const std::vector<double>& stddev() const { return stddev_; }
  std::size_t sensors() const { return mean_.size(); }

 private:
  std::vector<double> mean_;
  std::vector<double> stddev_;
};

struct WindowSample {
  num::Tensor input;        // N x W
  num::Tensor input_mask;   // N x W
  num::Tensor target;       // N x horizon
  num::Tensor target_mask;  // N x horizon
  std::size_t anchor = 0;   // first target timestep
};

/// One sample per anchor t with t - W >= range.begin and t + horizon <= range.end.
/// A range that is too short yields no samples and appends a warning.
std::vector<WindowSample> make_windows(const SeriesMatrix& x, Range range, std::size_t window, std::size_t horizon,
                                       std::vector<std::string>* warnings = nullptr);
std::size_t window_count(std::size_t length, std::size_t window, std::size_t horizon);

/// Marks exactly round(ratio * observed) observed entries as missing, taken as
/// a prefix of one seeded permutation, so larger ratios mask supersets.
SeriesMatrix mask_point_mcar(const SeriesMatrix& x, double ratio, std::uint64_t seed);

struct BlockLengths {
  std::size_t min = 4;
  std::size_t max = 8;
};

/// Draws (sensor, start, length) blocks from one seeded sequence and masks them
/// until the newly missing share of the originally observed entries reaches
/// `ratio`. Blocks that would touch an already missing entry are skipped so
/// every introduced run keeps its sampled length (clipped at the series end).
SeriesMatrix mask_block_mcar(const SeriesMatrix& x, double ratio, BlockLengths lengths, std::uint64_t seed);

// Synthetic generators.

/// Four sensors: two phase-coupled sines, a copy of sensor 0 lagged by 12
/// steps, and a noise-dominated sensor.
SeriesMatrix synthetic_coupled(std::size_t steps = 2000, std::uint64_t seed = 7);

/// Sines with additive Gaussian noise whose standard deviation alternates
/// between two levels in blocks of `block` steps. `true_sigma` (N x T)
/// receives the noise level of every entry.
SeriesMatrix synthetic_heteroscedastic(std::size_t steps, std::uint64_t seed, num::Tensor* true_sigma,
                                       double low = 0.1, double high = 0.6, std::size_t block = 250,
                                       std::size_t sensors = 2);

/// Clean sines with period 24 and a sensor-dependent phase.
SeriesMatrix toy_sine(std::size_t steps, std::size_t sensors = 1, double amplitude = 1.0, double offset = 0.0);

struct Manifest {
  std::string name;
  std::string path;
  std::string granularity;
  SplitSpec split;
  std::size_t window = 12;
  std::size_t horizon = 12;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const Manifest& m);

}  // namespace stproph::data
