// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stproph/lora/linear.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::prompt {

struct PromptPoolConfig {
  std::size_t window = 12;       // W, rows of every prompt value
  std::size_t d = 64;            // embedding width
  std::size_t pool_size = 15;    // M
  std::size_t top_k = 4;         // K, 1 <= K <= M
  std::size_t input_features = 2;  // value + observed-mask channel
};

struct RetrievalResult {
  std::vector<std::size_t> indices;  // descending score, ties by lower index
  std::vector<double> scores;
  std::vector<num::Tensor> values;   // the selected W x d prompts
};

/// Hard top-K selection for a batch of queries, plus the scores it was based on.
struct Selection {
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // S x K, row-major
  num::Tensor reference_scores;      // S x K, the selected scores as constants
};

/// score(s, m) = mean_w  w_v . tanh(q_{s,w} + k_m)
/// where q rows are the already-projected queries (S*L x d), k rows the
/// projected keys (M x d), w_v a 1 x d row. Output is S x M.   op: "additive_score"
num::Var additive_score(num::Var query_proj, num::Var key_proj, num::Var wv, std::size_t seg_len);

/// Row s*L + w of the output is
///   [g(s,0) * V_{i(s,0)}[w], ..., g(s,K-1) * V_{i(s,K-1)}[w], query[s*L + w]]
/// with values stored as M*L x d and gates S x K.   op: "prompt_concat"
num::Var prompt_concat(num::Var values, num::Var gates, num::Var query, const std::vector<std::size_t>& indices,
                       std::size_t k, std::size_t seg_len);

/// Indices of the k largest entries, sorted by descending score; equal scores
/// keep the lower index first.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);

/// Shared pool of M (key, value) prompts with additive-attention retrieval.
///
/// Retrieval is a hard choice. Each selected value is multiplied by the gate
/// 1 + s - sg(s), where s is the prompt's score and sg(s) the same score held
/// constant: the forward result is exactly the plain concatenation while the
/// score parameters, keys and query still receive the straight-through
/// gradient of the selected entries.
class PromptPool {
 public:
  PromptPool(const PromptPoolConfig& config, num::Rng& rng);

  /// Shared input projection mapping raw per-step features to width d.
  num::Var embed(num::Tape& tape, num::Var features);
  /// S x M scores for S query windows stacked as (S*W) x d rows.
  num::Var scores(num::Tape& tape, num::Var query);
  Selection select(const num::Tensor& scores) const;
  num::Var assemble(num::Tape& tape, num::Var query, num::Var scores, const Selection& selection);
  /// scores -> select -> assemble. A `fixed` selection (indices and reference
  /// scores) is reused instead of selecting afresh; this is what the gradient
  /// check relies on.
  num::Var forward(num::Tape& tape, num::Var query, const Selection* fixed = nullptr,
                   Selection* selection_out = nullptr);

  /// Value-level helpers on a single W x d query window.
  double score(const num::Tensor& query, std::size_t key_index);
  RetrievalResult retrieve_top_k(const num::Tensor& query);
  num::Tensor assemble(const num::Tensor& query, const RetrievalResult& result);

  const PromptPoolConfig& config() const { return config_; }
  num::Parameter& keys() { return keys_; }
  num::Parameter& values() { return values_; }
  num::Parameter& score_vector() { return wv_; }
  lora::Linear& query_weight() { return wq_; }
  lora::Linear& key_weight() { return wk_; }
  lora::Linear& output() { return wo_; }
  lora::Linear& input_projection() { return input_proj_; }

  void collect(num::ParameterList& out);
  /// Layers eligible for adapters (the input projection is excluded).
  std::vector<lora::Linear*> linears() { return {&wq_, &wk_, &wo_}; }
  /// Parameters owned by the retrieval machinery (everything except the input projection).
  std::size_t retrieval_parameter_count() const;
  std::size_t input_parameter_count() const { return input_proj_.parameter_count(); }

 private:
  PromptPoolConfig config_;
  lora::Linear input_proj_;
  num::Parameter keys_;    // M x d
  num::Parameter values_;  // M*W x d
  lora::Linear wq_;        // d x d
  lora::Linear wk_;        // d x d
  num::Parameter wv_;      // 1 x d
  lora::Linear wo_;        // (K+1)d x d
};

}  // namespace stproph::prompt
