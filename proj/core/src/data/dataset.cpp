// SPDX-License-Identifier: Apache-2.0
#include "stproph/data/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "stproph/numerics/rng.hpp"

namespace stproph::data {

SeriesMatrix::SeriesMatrix(std::size_t sensors, std::size_t steps)
    : values({sensors, steps}), mask({sensors, steps}, 1.0) {
  for (std::size_t n = 0; n < sensors; ++n) sensor_names.push_back("s" + std::to_string(n));
}

std::size_t SeriesMatrix::observed_count() const {
  std::size_t c = 0;
  for (double m : mask.storage()) c += m != 0.0;
  return c;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto issp = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), issp));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), issp).base(), s.end());
  return s;
}

bool is_missing_token(const std::string& s) {
  if (s.empty()) return true;
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  return lower == "nan";
}

}  // namespace

SeriesMatrix load_csv(const std::string& path) {
  using K = CsvError::Kind;
  std::ifstream in(path);
  if (!in) throw CsvError(K::unreadable, 0, "cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!trim(line).empty()) {
      header = split_line(line);
      break;
    }
  }
  if (header.empty()) throw CsvError(K::empty, 0, path + " is empty");
  for (auto& h : header) h = trim(h);

  std::vector<std::vector<double>> cols(header.size());
  std::vector<std::vector<double>> obs(header.size());
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw CsvError(K::ragged, lineno, "expected " + std::to_string(header.size()) + " cells, found " +
                                            std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = trim(cells[c]);
      if (is_missing_token(cell)) {
        cols[c].push_back(0.0);
        obs[c].push_back(0.0);
        continue;
      }
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw CsvError(K::non_numeric, lineno, "column '" + header[c] + "': '" + cell + "' is not a number");
      }
      cols[c].push_back(v);
      obs[c].push_back(1.0);
    }
  }
  const std::size_t T = cols.front().size();
  if (T == 0) throw CsvError(K::empty, lineno, path + " has a header but no data rows");
  SeriesMatrix x(header.size(), T);
  x.sensor_names = header;
  x.name = std::filesystem::path(path).stem().string();
  for (std::size_t n = 0; n < header.size(); ++n) {
    std::copy(cols[n].begin(), cols[n].end(), x.values.row_ptr(n));
    std::copy(obs[n].begin(), obs[n].end(), x.mask.row_ptr(n));
  }
  return x;
}

void save_csv(const std::string& path, const SeriesMatrix& x) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out.precision(17);
  for (std::size_t n = 0; n < x.sensors(); ++n) out << (n ? "," : "") << x.sensor_names.at(n);
  out << '\n';
  for (std::size_t t = 0; t < x.steps(); ++t) {
    for (std::size_t n = 0; n < x.sensors(); ++n) {
      if (n) out << ',';
      if (x.observed(n, t)) {
        out << x.values(n, t);
      } else {
        out << "nan";
      }
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits and standardization

SplitRanges split_chrono(std::size_t steps, const SplitSpec& spec) {
  if (!(spec.train > 0.0 && spec.val > 0.0 && spec.test > 0.0)) {
    throw ConfigError("split fractions must all be positive");
  }
  if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions sum to " + std::to_string(spec.train + spec.val + spec.test) + ", not 1");
  }
  // The small slack keeps e.g. (0.7 + 0.1) * 10 from flooring to 7.
  const auto boundary = [steps](double frac) {
    return std::min(steps, static_cast<std::size_t>(std::floor(frac * static_cast<double>(steps) + 1e-9)));
  };
  const std::size_t a = boundary(spec.train), b = boundary(spec.train + spec.val);
  return {{0, a}, {a, b}, {b, steps}};
}

Standardizer::Standardizer(std::vector<double> mean, std::vector<double> stddev)
    : mean_(std::move(mean)), stddev_(std::move(stddev)) {
  if (mean_.size() != stddev_.size()) throw ShapeError("standardizer: mean and stddev sizes differ");
}

Standardizer Standardizer::fit(const SeriesMatrix& x, Range train) {
  if (train.end > x.steps() || train.begin >= train.end) throw DataError("standardizer: empty training range");
  std::vector<double> mean(x.sensors()), sd(x.sensors());
  for (std::size_t n = 0; n < x.sensors(); ++n) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = train.begin; t < train.end; ++t) {
      if (!x.observed(n, t)) continue;
      sum += x.values(n, t);
      ++count;
    }
    if (count < 2) {
      throw DataError("sensor '" + x.sensor_names.at(n) + "' has " + std::to_string(count) +
                      " observed training values; at least 2 are needed");
    }
    const double m = sum / static_cast<double>(count);
    double ss = 0.0;
    for (std::size_t t = train.begin; t < train.end; ++t) {
      if (x.observed(n, t)) ss += (x.values(n, t) - m) * (x.values(n, t) - m);
    }
    mean[n] = m;
    sd[n] = std::max(std::sqrt(ss / static_cast<double>(count)), kStdFloor);
  }
  return Standardizer(std::move(mean), std::move(sd));
}

SeriesMatrix Standardizer::transform(const SeriesMatrix& x) const {
  if (x.sensors() != sensors()) throw ShapeError("standardizer fitted for " + std::to_string(sensors()) + " sensors");
  SeriesMatrix z = x;
  for (std::size_t n = 0; n < x.sensors(); ++n)
    for (std::size_t t = 0; t < x.steps(); ++t) z.values(n, t) = x.observed(n, t) ? forward(n, x.values(n, t)) : 0.0;
  return z;
}

SeriesMatrix Standardizer::inverse(const SeriesMatrix& z) const {
  if (z.sensors() != sensors()) throw ShapeError("standardizer fitted for " + std::to_string(sensors()) + " sensors");
  SeriesMatrix x = z;
  for (std::size_t n = 0; n < z.sensors(); ++n)
    for (std::size_t t = 0; t < z.steps(); ++t) x.values(n, t) = z.observed(n, t) ? inverse(n, z.values(n, t)) : 0.0;
  return x;
}

num::Tensor Standardizer::inverse_rows(const num::Tensor& z) const {
  num::require_rank2(z, "standardizer inverse");
  if (sensors() == 0 || z.rows() % sensors() != 0) {
    throw ShapeError("standardizer: " + std::to_string(z.rows()) + " rows are not a multiple of " +
                     std::to_string(sensors()) + " sensors");
  }
  num::Tensor out(z.shape());
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < z.cols(); ++c) out(r, c) = inverse(r % sensors(), z(r, c));
  return out;
}

// ---------------------------------------------------------------------------
// Windows

std::size_t window_count(std::size_t length, std::size_t window, std::size_t horizon) {
  return length >= window + horizon ? length - window - horizon + 1 : 0;
}

std::vector<WindowSample> make_windows(const SeriesMatrix& x, Range range, std::size_t window, std::size_t horizon,
                                       std::vector<std::string>* warnings) {
  if (window == 0 || horizon == 0) throw ConfigError("window and horizon must be at least 1");
  if (range.end > x.steps() || range.begin > range.end) throw ShapeError("window range exceeds the series");
  const std::size_t count = window_count(range.size(), window, horizon);
  std::vector<WindowSample> out;
  if (count == 0) {
    if (warnings) {
      warnings->push_back("range [" + std::to_string(range.begin) + ", " + std::to_string(range.end) + ") of length " +
                          std::to_string(range.size()) + " is shorter than W + horizon = " +
                          std::to_string(window + horizon) + "; no windows");
    }
    return out;
  }
  const std::size_t N = x.sensors();
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = range.begin + window + i;
    WindowSample s{num::Tensor({N, window}), num::Tensor({N, window}), num::Tensor({N, horizon}),
                   num::Tensor({N, horizon}), t};
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t w = 0; w < window; ++w) {
        s.input(n, w) = x.values(n, t - window + w);
        s.input_mask(n, w) = x.mask(n, t - window + w);
      }
      for (std::size_t h = 0; h < horizon; ++h) {
        s.target(n, h) = x.values(n, t + h);
        s.target_mask(n, h) = x.mask(n, t + h);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Missingness

namespace {
void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("missing ratio must lie in [0, 1), got " + std::to_string(ratio));
}
}  // namespace

SeriesMatrix mask_point_mcar(const SeriesMatrix& x, double ratio, std::uint64_t seed) {
  check_ratio(ratio);
  SeriesMatrix out = x;
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < x.mask.size(); ++i)
    if (x.mask[i] != 0.0) candidates.push_back(i);
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(candidates.size())));
  if (k == 0) return out;
  num::Rng rng = num::Rng(seed).split("mask_point");
  rng.shuffle(candidates);
  for (std::size_t i = 0; i < k; ++i) {
    out.mask[candidates[i]] = 0.0;
    out.values[candidates[i]] = 0.0;
  }
  return out;
}

SeriesMatrix mask_block_mcar(const SeriesMatrix& x, double ratio, BlockLengths lengths, std::uint64_t seed) {
  check_ratio(ratio);
  const std::size_t N = x.sensors(), T = x.steps();
  if (lengths.min < 1 || lengths.min > lengths.max || lengths.max > T) {
    throw ConfigError("block lengths [" + std::to_string(lengths.min) + ", " + std::to_string(lengths.max) +
                      "] are not satisfiable for a series of " + std::to_string(T) + " steps");
  }
  SeriesMatrix out = x;
  const std::size_t observed = x.observed_count();
  const double target = ratio * static_cast<double>(observed);
  if (ratio == 0.0 || observed == 0) return out;
  num::Rng rng = num::Rng(seed).split("mask_block");
  std::size_t masked = 0;
  const std::size_t max_draws = 1000 * (N * T / lengths.min + 1);
  for (std::size_t draw = 0; static_cast<double>(masked) < target; ++draw) {
    if (draw == max_draws) {
      throw ConfigError("block masking could not reach ratio " + std::to_string(ratio) + " with blocks of " +
                        std::to_string(lengths.min) + "-" + std::to_string(lengths.max) + " steps");
    }
    const std::size_t n = rng.below(N);
    const std::size_t start = rng.below(T);
    const std::size_t len = rng.between(lengths.min, lengths.max);
    const std::size_t end = std::min(T, start + len);
    // Reject blocks that touch missing entries, including the neighbours, so
    // runs never merge.
    const std::size_t lo = start == 0 ? 0 : start - 1, hi = std::min(T, end + 1);
    bool clear = true;
    for (std::size_t t = lo; t < hi && clear; ++t) clear = out.observed(n, t);
    if (!clear) continue;
    for (std::size_t t = start; t < end; ++t) out.set_missing(n, t);
    masked += end - start;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

SeriesMatrix synthetic_coupled(std::size_t steps, std::uint64_t seed) {
  constexpr std::size_t kLag = 12;
  num::Rng rng(seed);
  num::Rng phase_rng = rng.split("phase"), noise_rng = rng.split("noise");
  const std::size_t total = steps + kLag;
  std::vector<double> base(total), coupled(total);
  double phase = 0.0;
  for (std::size_t i = 0; i < total; ++i) {
    phase += phase_rng.normal(0.0, 0.08);
    const double t = static_cast<double>(i);
    const double amp = 1.0 + 0.3 * std::sin(kTwoPi * t / 173.0);
    base[i] = amp * std::sin(kTwoPi * t / 24.0 + phase);
    coupled[i] = 0.8 * std::sin(kTwoPi * t / 36.0 + 1.5 * phase + std::numbers::pi / 3.0);
  }
  SeriesMatrix x(4, steps);
  x.name = "coupled";
  x.granularity = "1 step";
  x.sensor_names = {"base", "coupled", "lagged", "noisy"};
  for (std::size_t t = 0; t < steps; ++t) {
    const std::size_t i = t + kLag;
    x.values(0, t) = base[i] + noise_rng.normal(0.0, 0.05);
    x.values(1, t) = coupled[i] + noise_rng.normal(0.0, 0.05);
    x.values(2, t) = base[i - kLag] + noise_rng.normal(0.0, 0.05);
    x.values(3, t) = 0.2 * std::sin(kTwoPi * static_cast<double>(t) / 24.0) + noise_rng.normal(0.0, 1.0);
  }
  return x;
}

SeriesMatrix synthetic_heteroscedastic(std::size_t steps, std::uint64_t seed, num::Tensor* true_sigma, double low,
                                       double high, std::size_t block, std::size_t sensors) {
  if (block == 0) throw ConfigError("noise schedule block length must be positive");
  num::Rng noise = num::Rng(seed).split("noise");
  SeriesMatrix x(sensors, steps);
  x.name = "heteroscedastic";
  x.granularity = "1 step";
  num::Tensor sigma({sensors, steps});
  for (std::size_t n = 0; n < sensors; ++n) {
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t shifted = t + n * block / 2;
      const double s = (shifted / block) % 2 == 0 ? low : high;
      sigma(n, t) = s;
      const double clean = std::sin(kTwoPi * static_cast<double>(t) / 24.0 + static_cast<double>(n) * std::numbers::pi / 3.0);
      x.values(n, t) = clean + noise.normal(0.0, s);
    }
  }
  if (true_sigma) *true_sigma = std::move(sigma);
  return x;
}

SeriesMatrix toy_sine(std::size_t steps, std::size_t sensors, double amplitude, double offset) {
  SeriesMatrix x(sensors, steps);
  x.name = "toy_sine";
  x.granularity = "1 step";
  for (std::size_t n = 0; n < sensors; ++n)
    for (std::size_t t = 0; t < steps; ++t)
      x.values(n, t) = offset + amplitude * std::sin(kTwoPi * static_cast<double>(t) / 24.0 + 0.7 * static_cast<double>(n));
  return x;
}

// ---------------------------------------------------------------------------
// Manifest

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  Manifest m;
  try {
    m.name = doc.at("name").get<std::string>();
    m.path = doc.at("path").get<std::string>();
    m.granularity = doc.value("granularity", std::string());
    if (doc.contains("split")) {
      const auto split = doc["split"].get<std::vector<double>>();
      if (split.size() != 3) throw ConfigError("manifest " + path + ": split needs three fractions");
      m.split = {split[0], split[1], split[2]};
    }
    m.window = doc.value("W", m.window);
    m.horizon = doc.value("nu", m.horizon);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path + ": " + e.what());
  }
  const std::filesystem::path data_path(m.path);
  if (data_path.is_relative()) m.path = (std::filesystem::path(path).parent_path() / data_path).string();
  return m;
}

void save_manifest(const std::string& path, const Manifest& m) {
  nlohmann::ordered_json doc;
  doc["name"] = m.name;
  doc["path"] = m.path;
  doc["granularity"] = m.granularity;
  doc["split"] = {m.split.train, m.split.val, m.split.test};
  doc["W"] = m.window;
  doc["nu"] = m.horizon;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  out << doc.dump(2) << '\n';
}

}  // namespace stproph::data
