// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stproph/error.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::text {

/// Softmax attention pooling over ragged token groups.
/// tokens: T x d_t rows; offsets: cells + 1 boundaries into the rows; u: 1 x d_t.
/// For each cell, q_i = u . h_i, alpha = softmax(q), out = sum_i alpha_i h_i.
/// op: "attention_pool"
num::Var attention_pool(num::Var tokens, num::Var u, const std::vector<std::size_t>& offsets);

/// Value-level pooling of an N x W x m x d_t tensor into N x W x d_t.
num::Tensor attention_pool(const num::Tensor& tokens, const num::Tensor& u);
/// The pooling weights of every cell (N*W x m), for inspection.
num::Tensor pooling_weights(const num::Tensor& tokens, const num::Tensor& u);

/// Holds the trainable pooling vector u.
class TextPooling {
 public:
  TextPooling() = default;
  explicit TextPooling(std::size_t d_text);
  num::Var forward(num::Tape& tape, num::Var tokens, const std::vector<std::size_t>& offsets);
  num::Parameter& u() { return u_; }
  void collect(num::ParameterList& out) { out.push_back(&u_); }
  std::size_t parameter_count() const { return u_.value.size(); }

 private:
  num::Parameter u_;
};

/// Deterministic offline stand-in for language-model token embeddings.
/// Window statistics (mean, slope sign, argmin/argmax, variance bucket) are
/// folded into an integer code together with per-step features, and the code
/// is expanded by a seeded hash into m x d_t values in [-1, 1].
/// Returns a W x m x d_t tensor.
num::Tensor stub_embed(std::span<const double> window, std::size_t d_text, std::size_t tokens, std::uint64_t seed);

class FixtureError : public DataError {
 public:
  enum class Kind { missing_file, malformed, shape_mismatch };
  FixtureError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Reads {"shape": [N, W, m, d_t], "data": [...]} or the per-cell form
/// {"shape": [...], "cells": [{"sensor", "step", "embeddings": [[...], ...]}]}.
num::Tensor load_fixture(const std::string& path);
/// Writes the flat form with round-trip exact number formatting.
void save_fixture(const std::string& path, const num::Tensor& tokens);

class ProviderError : public Error {
 public:
  enum class Kind { unreachable, timeout, status, malformed, ragged, empty };
  ProviderError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct HttpRequestOptions {
  std::string model = "stub-lm";
  int max_tokens = 64;
  int timeout_ms = 2000;
  int retries = 0;
};

/// POSTs {model, prompt, max_tokens} as JSON to `endpoint` and expects
/// {tokens: [string], embeddings: [[float]]}. Returns an m x d_t matrix.
num::Tensor http_embed(const std::string& endpoint, const std::string& prompt, const HttpRequestOptions& options);

/// What a provider sees for one sensor window.
struct WindowContext {
  std::span<const double> values;  // standardized, zero where missing
  std::span<const double> raw;     // original scale, NaN where missing
  std::size_t sensor = 0;
  std::string sensor_name;
  std::size_t start = 0;           // first timestep of the window
};

/// Token embeddings of the W cells of one sensor window: rows are the tokens
/// of cell 0, then cell 1, ...; counts[w] tokens belong to cell w.
struct WindowTokens {
  num::Tensor rows;
  std::vector<std::size_t> counts;
};

class TextProvider {
 public:
  virtual ~TextProvider() = default;
  virtual WindowTokens embed(const WindowContext& ctx) = 0;
  virtual std::size_t dim() const = 0;
  /// Warnings gathered so far (fallbacks etc.).
  const std::vector<std::string>& warnings() const { return warnings_; }

 protected:
  std::vector<std::string> warnings_;
};

class StubProvider : public TextProvider {
 public:
  StubProvider(std::size_t d_text, std::size_t tokens, std::uint64_t seed);
  WindowTokens embed(const WindowContext& ctx) override;
  std::size_t dim() const override { return d_text_; }

 private:
  std::size_t d_text_;
  std::size_t tokens_;
  std::uint64_t seed_;
};

/// Serves cells from a loaded fixture. When the fixture's step axis equals the
/// window length, cells are indexed relative to the window; otherwise by
/// absolute timestep.
class FixtureProvider : public TextProvider {
 public:
  explicit FixtureProvider(num::Tensor tokens);
  WindowTokens embed(const WindowContext& ctx) override;
  std::size_t dim() const override { return tokens_.shape()[3]; }

 private:
  num::Tensor tokens_;
};

struct HttpProviderOptions {
  std::string endpoint;
  /// Placeholders: {sensor}, {step}, {start}, {end}, {value}, {values}.
  std::string prompt_template =
      "Describe the trend of sensor {sensor} over steps {start}-{end} at step {step}: {values}";
  HttpRequestOptions request;
  bool fallback_to_stub = true;
  std::size_t stub_dim = 32;
  std::size_t stub_tokens = 8;
  std::uint64_t seed = 0;
};

/// One request per cell. On any provider error the whole window falls back to
/// the stub (when enabled) and a warning is recorded.
class HttpProvider : public TextProvider {
 public:
  explicit HttpProvider(HttpProviderOptions options);
  WindowTokens embed(const WindowContext& ctx) override;
  std::size_t dim() const override;

  static std::string render(const std::string& tmpl, const WindowContext& ctx, std::size_t step);

 private:
  HttpProviderOptions options_;
  StubProvider stub_;
  std::optional<std::size_t> dim_;
  std::unordered_map<std::string, num::Tensor> cache_;
};

}  // namespace stproph::text
