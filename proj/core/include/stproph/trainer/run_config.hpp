// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>

#include "stproph/data/dataset.hpp"
#include "stproph/text/text_embed.hpp"
#include "stproph/trainer/train.hpp"

namespace stproph::trainer {

/// Exactly one of manifest, csv or synthetic names the source.
struct DatasetConfig {
  std::string manifest;
  std::string csv;
  std::string synthetic;  // coupled | heteroscedastic | toy_sine
  std::size_t steps = 2000;
  std::uint64_t seed = 7;
  std::size_t sensors = 1;  // toy_sine only
  double amplitude = 1.0;   // toy_sine only
  double offset = 0.0;      // toy_sine only
  data::SplitSpec split;
};

struct TextProviderConfig {
  std::string kind = "stub";  // stub | fixture | http
  std::string fixture;
  std::string endpoint;
  std::string prompt_template;
  std::string model = "stub-lm";
  std::size_t max_tokens = 64;
  std::size_t timeout_ms = 2000;
  std::size_t retries = 0;
  bool fallback_to_stub = true;
  std::uint64_t seed = 0;
};

struct OutputConfig {
  std::string dir = "out";
};

/// The run configuration document: sections dataset, model, train,
/// text_provider and output.
struct RunConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  TextProviderConfig text_provider;
  OutputConfig output;

  void validate() const;
};

/// Unknown keys throw ConfigError naming the path. Relative dataset and
/// fixture paths are resolved against `base_dir` when it is non-empty.
RunConfig parse_run_config(const std::string& json, const std::string& origin, const std::string& base_dir = {});
RunConfig load_run_config(const std::string& path);
/// Canonical JSON of every field.
std::string to_json(const RunConfig& c);
/// FNV-1a of the canonical JSON, as 16 hex digits.
std::string config_hash(const RunConfig& c);

using EnvLookup = std::function<const char*(const char*)>;
/// STPROPH_OUT_DIR -> output.dir, STPROPH_EMBED_ENDPOINT -> text_provider.endpoint.
void apply_environment(RunConfig& c, const EnvLookup& env);

/// Loads or generates the configured series. A manifest also supplies the
/// split; its window and horizon must match the model section.
data::SeriesMatrix load_dataset(RunConfig& c);

/// Provider for the model's text branch; null when LLMs is ablated. The
/// provider width must equal model.d_text.
std::unique_ptr<text::TextProvider> make_provider(const RunConfig& c);

}  // namespace stproph::trainer
