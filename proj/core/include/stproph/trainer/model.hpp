// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "stproph/attention/gq_mha.hpp"
#include "stproph/fusion/fusion_head.hpp"
#include "stproph/lora/linear.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"
#include "stproph/prompt/prompt_pool.hpp"
#include "stproph/text/text_embed.hpp"

namespace stproph::trainer {

enum class Variant { point, uncertainty };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

/// Components that can be removed for ablation studies.
inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"LLMs", "DP", "IntraS", "InterS", "CMA"};
  return names;
}

struct ModelConfig {
  std::size_t sensors = 0;  // N, taken from the data when 0
  std::size_t window = 12;  // W
  std::size_t horizon = 12; // nu
  std::size_t d = 64;
  std::size_t pool_size = 15;   // M
  std::size_t top_k = 4;        // K
  std::size_t groups = 3;       // G
  std::size_t heads = 4;        // H
  std::size_t d_k = 0;          // d / H; 0 derives it
  std::size_t fusion_heads = 4; // H_f
  std::size_t depth = 1;        // intra/inter blocks stacked
  std::size_t d_text = 64;      // d_t
  std::size_t text_tokens = 8;  // m, for the stub provider
  bool per_head_width = false;
  bool residual = false;
  double sigma2_floor = fusion::kSigma2Floor;
  Variant variant = Variant::point;
  std::set<std::string> ablations;

  bool uses(const std::string& component) const { return ablations.count(component) == 0; }
  /// Throws ConfigError on inconsistent values or unknown ablation names.
  void validate() const;
};

/// One mini-batch in the model's row layout: rows are (sample, sensor, step).
struct Batch {
  std::size_t samples = 0;
  num::Tensor features;      // (B*N*W) x 2: standardized value, observed flag
  num::Tensor target;        // (B*N) x nu, standardized
  num::Tensor target_mask;   // (B*N) x nu
  num::Tensor text_rows;     // token embeddings, all cells back to back
  std::vector<std::size_t> text_offsets;  // B*N*W + 1 boundaries; empty without text
};

struct Prediction {
  num::Var mu;
  std::optional<num::Var> sigma2;
};

/// The assembled forecaster:
/// embed -> prompt assemble -> (intra -> inter) x depth -> fuse -> head.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  /// `fixed` reuses a prompt selection (gradient checks); the selection that
  /// was used is written to `selection_out` when given.
  Prediction forward(num::Tape& tape, const Batch& batch, const prompt::Selection* fixed = nullptr,
                     prompt::Selection* selection_out = nullptr);

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  bool uses_text() const { return config_.uses("LLMs"); }

  num::ParameterList parameters();
  std::size_t parameter_count();
  /// (component, parameter count) per module; sums to parameter_count().
  std::vector<std::pair<std::string, std::size_t>> parameter_breakdown();

  /// Backbone layers that take adapters: prompt retrieval projections,
  /// attention blocks and the fusion layers. Input embedding and heads excluded.
  std::vector<lora::Linear*> adaptable_linears();
  std::vector<lora::Linear*> head_linears();

  /// Wraps every adaptable layer; throws ConfigError naming the first layer
  /// whose width does not admit the rank.
  void attach_adapters(std::size_t rank, std::optional<double> alpha, double dropout, std::uint64_t seed);
  bool has_adapters() const { return adapters_attached_; }
  /// Marks only adapter C factors (and optionally the heads) trainable.
  void freeze_for_adapters(bool train_heads);
  void merge_adapters();
  /// FNV-1a over names and bytes of every non-trainable parameter.
  std::uint64_t frozen_hash();

  prompt::PromptPool* pool() { return pool_ ? &*pool_ : nullptr; }
  std::vector<attn::GQMHABlock>& intra_blocks() { return intra_; }
  std::vector<attn::GQMHABlock>& inter_blocks() { return inter_; }

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  std::optional<prompt::PromptPool> pool_;  // present unless DP is ablated
  std::optional<lora::Linear> embed_;       // used when DP is ablated
  std::vector<attn::GQMHABlock> intra_, inter_;
  std::optional<text::TextPooling> pooling_;
  std::optional<fusion::FusionBlock> fusion_;
  std::optional<fusion::ConcatFusion> concat_;
  std::optional<fusion::PointHead> point_head_;
  std::optional<fusion::GaussianHead> gaussian_head_;
  bool adapters_attached_ = false;
};

}  // namespace stproph::trainer
