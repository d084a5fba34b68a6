// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/model.hpp"

#include <algorithm>
#include <cstring>

#include "stproph/error.hpp"
#include "stproph/numerics/ops.hpp"

namespace stproph::trainer {

std::string to_string(Variant v) { return v == Variant::point ? "point" : "uncertainty"; }

Variant parse_variant(const std::string& s) {
  if (s == "point") return Variant::point;
  if (s == "uncertainty") return Variant::uncertainty;
  throw ConfigError("unknown variant '" + s + "'; expected point or uncertainty");
}

void ModelConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("model.") + name + " must be positive");
  };
  positive(window, "window");
  positive(horizon, "horizon");
  positive(d, "d");
  positive(pool_size, "pool_size");
  positive(top_k, "top_k");
  positive(groups, "groups");
  positive(heads, "heads");
  positive(fusion_heads, "fusion_heads");
  positive(depth, "depth");
  positive(d_text, "d_text");
  positive(text_tokens, "text_tokens");
  if (top_k > pool_size) throw ConfigError("model.top_k must not exceed model.pool_size");
  if (d % heads != 0) throw ConfigError("model.heads must divide model.d");
  if (d_k != 0 && d_k != d / heads) {
    throw ConfigError("model.d_k (" + std::to_string(d_k) + ") must equal d / heads = " + std::to_string(d / heads));
  }
  if (d % fusion_heads != 0) throw ConfigError("model.fusion_heads must divide model.d");
  if (!(sigma2_floor > 0.0)) throw ConfigError("model.sigma2_floor must be positive");
  for (const auto& a : ablations) {
    const auto& names = ablation_names();
    if (std::find(names.begin(), names.end(), a) == names.end()) {
      std::string valid;
      for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
      throw ConfigError("unknown ablation '" + a + "'; valid names: " + valid);
    }
  }
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  if (config_.sensors == 0) throw ConfigError("model.sensors must be set before building the model");
  const std::size_t d = config_.d;
  num::Rng rng(seed);
  num::Rng init = rng.split("model");

  if (config_.uses("DP")) {
    prompt::PromptPoolConfig pc{config_.window, d, config_.pool_size, config_.top_k, 2};
    pool_.emplace(pc, init);
  } else {
    num::Rng r = init.split("prompt_pool").split("input_projection");
    embed_.emplace("prompt.input", 2, d, true, r);
  }

  attn::GQMHAConfig gc;
  gc.groups = config_.groups;
  gc.heads = config_.heads;
  gc.d = d;
  gc.per_head_width = config_.per_head_width;
  gc.residual = config_.residual;
  for (std::size_t l = 0; l < config_.depth; ++l) {
    if (config_.uses("IntraS")) intra_.emplace_back("intra" + std::to_string(l), gc, init);
    if (config_.uses("InterS")) inter_.emplace_back("inter" + std::to_string(l), gc, init);
  }

  if (uses_text()) {
    pooling_.emplace(config_.d_text);
    if (config_.uses("CMA")) {
      fusion_.emplace("fusion", d, config_.d_text, config_.fusion_heads, init);
    } else {
      concat_.emplace("fusion_concat", d, config_.d_text, init);
    }
  }

  if (config_.variant == Variant::point) {
    point_head_.emplace("head", config_.window, d, config_.horizon, init);
  } else {
    gaussian_head_.emplace("head", config_.window, d, config_.horizon, init, config_.sigma2_floor);
  }
}

Prediction Model::forward(num::Tape& tape, const Batch& batch, const prompt::Selection* fixed,
                          prompt::Selection* selection_out) {
  const std::size_t N = config_.sensors, W = config_.window;
  const std::size_t rows = batch.samples * N * W;
  if (batch.features.rows() != rows || batch.features.cols() != 2) {
    throw ShapeError("model: features " + num::shape_string(batch.features.shape()) + ", expected " +
                     std::to_string(rows) + " x 2");
  }
  num::Var x = tape.constant(batch.features);
  num::Var s;
  if (pool_) {
    num::Var e = pool_->embed(tape, x);
    s = pool_->forward(tape, e, fixed, selection_out);
  } else {
    s = embed_->forward(tape, x);
  }
  for (std::size_t l = 0; l < config_.depth; ++l) {
    if (l < intra_.size()) s = attn::intra_series(tape, s, intra_[l], W);
    if (l < inter_.size()) s = attn::inter_series(tape, s, inter_[l], N, W);
  }
  if (uses_text()) {
    if (batch.text_offsets.size() != rows + 1) {
      throw ShapeError("model: text branch needs token offsets for " + std::to_string(rows) + " cells");
    }
    num::Var tokens = tape.constant(batch.text_rows);
    num::Var h_text = pooling_->forward(tape, tokens, batch.text_offsets);
    s = fusion_ ? fusion_->fuse(tape, h_text, s, W) : concat_->fuse(tape, h_text, s);
  }
  if (point_head_) return {point_head_->forward(tape, s), std::nullopt};
  auto out = gaussian_head_->forward(tape, s);
  return {out.mu, out.sigma2};
}

num::ParameterList Model::parameters() {
  num::ParameterList out;
  if (pool_) pool_->collect(out);
  if (embed_) embed_->collect(out);
  for (auto& b : intra_) b.collect(out);
  for (auto& b : inter_) b.collect(out);
  if (pooling_) pooling_->collect(out);
  if (fusion_) fusion_->collect(out);
  if (concat_) concat_->collect(out);
  if (point_head_) point_head_->collect(out);
  if (gaussian_head_) gaussian_head_->collect(out);
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

std::vector<std::pair<std::string, std::size_t>> Model::parameter_breakdown() {
  std::vector<std::pair<std::string, std::size_t>> out;
  if (pool_) {
    out.emplace_back("input_projection", pool_->input_parameter_count());
    out.emplace_back("prompt_pool", pool_->retrieval_parameter_count());
  } else {
    out.emplace_back("input_projection", embed_->parameter_count());
  }
  std::size_t intra = 0, inter = 0;
  for (const auto& b : intra_) intra += b.parameter_count();
  for (const auto& b : inter_) inter += b.parameter_count();
  if (!intra_.empty()) out.emplace_back("intra_series", intra);
  if (!inter_.empty()) out.emplace_back("inter_series", inter);
  if (pooling_) out.emplace_back("text_pooling", pooling_->parameter_count());
  if (fusion_) out.emplace_back("fusion", fusion_->parameter_count());
  if (concat_) out.emplace_back("fusion", concat_->parameter_count());
  if (point_head_) out.emplace_back("head", point_head_->parameter_count());
  if (gaussian_head_) out.emplace_back("head", gaussian_head_->parameter_count());
  return out;
}

std::vector<lora::Linear*> Model::adaptable_linears() {
  std::vector<lora::Linear*> out;
  const auto append = [&out](std::vector<lora::Linear*> more) { out.insert(out.end(), more.begin(), more.end()); };
  if (pool_) append(pool_->linears());
  for (auto& b : intra_) append(b.linears());
  for (auto& b : inter_) append(b.linears());
  if (fusion_) append(fusion_->linears());
  if (concat_) append(concat_->linears());
  return out;
}

std::vector<lora::Linear*> Model::head_linears() {
  if (point_head_) return {&point_head_->linear()};
  return {&gaussian_head_->mean().linear(), &gaussian_head_->variance().linear()};
}

void Model::attach_adapters(std::size_t rank, std::optional<double> alpha, double dropout, std::uint64_t seed) {
  if (adapters_attached_) throw ConfigError("adapters are already attached");
  auto layers = adaptable_linears();
  // Validate all layers first so a failure leaves the model untouched.
  for (auto* l : layers) {
    const std::size_t narrow = std::min(l->in_features(), l->out_features());
    if (rank < 2 || rank % 2 != 0 || rank >= narrow) {
      throw ConfigError("adapter rank " + std::to_string(rank) + " does not fit layer '" + l->name() + "' (" +
                        std::to_string(l->in_features()) + " x " + std::to_string(l->out_features()) +
                        "); need an even rank with 2 <= r < " + std::to_string(narrow));
    }
  }
  num::Rng rng = num::Rng(seed).split("adapters");
  for (auto* l : layers) {
    num::Rng r = rng.split(l->name());
    l->attach_adapter(rank, r, alpha, dropout);
  }
  adapters_attached_ = true;
}

void Model::freeze_for_adapters(bool train_heads) {
  for (auto* p : parameters()) p->trainable = false;
  for (auto* l : adaptable_linears())
    if (l->adapted()) l->adapter().up().trainable = true;
  if (train_heads) {
    for (auto* l : head_linears()) {
      l->weight().trainable = true;
      if (auto* b = l->bias()) b->trainable = true;
    }
  }
}

void Model::merge_adapters() {
  for (auto* l : adaptable_linears()) l->merge_adapter();
  adapters_attached_ = false;
  for (auto* p : parameters()) p->trainable = true;
}

std::uint64_t Model::frozen_hash() {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto* p : parameters()) {
    if (p->trainable) continue;
    h = num::fnv1a(p->name, h);
    const auto& data = p->value.storage();
    h = num::fnv1a(std::string_view(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double)), h);
  }
  return h;
}

}  // namespace stproph::trainer
