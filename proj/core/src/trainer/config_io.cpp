// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/config_io.hpp"

#include <json.hpp>

#include "stproph/error.hpp"
#include "json_reader.hpp"

namespace stproph::trainer {

using nlohmann::json;

namespace {

json model_json(const ModelConfig& c) {
  json j;
  j["sensors"] = c.sensors;
  j["window"] = c.window;
  j["horizon"] = c.horizon;
  j["d"] = c.d;
  j["pool_size"] = c.pool_size;
  j["top_k"] = c.top_k;
  j["groups"] = c.groups;
  j["heads"] = c.heads;
  j["d_k"] = c.d_k;
  j["fusion_heads"] = c.fusion_heads;
  j["depth"] = c.depth;
  j["d_text"] = c.d_text;
  j["text_tokens"] = c.text_tokens;
  j["per_head_width"] = c.per_head_width;
  j["residual"] = c.residual;
  j["sigma2_floor"] = c.sigma2_floor;
  j["variant"] = to_string(c.variant);
  j["ablations"] = c.ablations;
  return j;
}

json train_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lr"] = c.lr;
  j["plateau_patience"] = c.plateau_patience;
  j["plateau_factor"] = c.plateau_factor;
  j["early_stop_patience"] = c.early_stop_patience;
  j["seed"] = c.seed;
  json a;
  a["enabled"] = c.adapter.enabled;
  a["rank"] = c.adapter.rank;
  a["alpha"] = c.adapter.alpha ? json(*c.adapter.alpha) : json(nullptr);
  a["dropout"] = c.adapter.dropout;
  a["lr"] = c.adapter.lr;
  a["weight_decay"] = c.adapter.weight_decay;
  a["epochs"] = c.adapter.epochs;
  a["batch"] = c.adapter.batch;
  a["train_heads"] = c.adapter.train_heads;
  j["adapter"] = a;
  return j;
}

}  // namespace

std::string to_json(const ModelConfig& c) { return model_json(c).dump(); }
std::string to_json(const TrainConfig& c) { return train_json(c).dump(); }

ModelConfig parse_model_config(const std::string& text, const std::string& path, const ModelConfig& base) {
  ModelConfig c = base;
  JsonReader r(parse_json(text, path), path);
  r.read("sensors", c.sensors);
  r.read("window", c.window);
  r.read("horizon", c.horizon);
  r.read("d", c.d);
  r.read("pool_size", c.pool_size);
  r.read("top_k", c.top_k);
  r.read("groups", c.groups);
  r.read("heads", c.heads);
  r.read("d_k", c.d_k);
  r.read("fusion_heads", c.fusion_heads);
  r.read("depth", c.depth);
  r.read("d_text", c.d_text);
  r.read("text_tokens", c.text_tokens);
  r.read("per_head_width", c.per_head_width);
  r.read("residual", c.residual);
  r.read("sigma2_floor", c.sigma2_floor);
  std::string variant;
  if (r.read("variant", variant)) c.variant = parse_variant(variant);
  std::vector<std::string> ablations;
  if (r.read("ablations", ablations)) c.ablations = {ablations.begin(), ablations.end()};
  r.finish();
  return c;
}

TrainConfig parse_train_config(const std::string& text, const std::string& path, const TrainConfig& base) {
  TrainConfig c = base;
  JsonReader r(parse_json(text, path), path);
  r.read("epochs", c.epochs);
  r.read("batch", c.batch);
  r.read("lr", c.lr);
  r.read("plateau_patience", c.plateau_patience);
  r.read("plateau_factor", c.plateau_factor);
  r.read("early_stop_patience", c.early_stop_patience);
  r.read("seed", c.seed);
  if (auto a = r.object("adapter")) {
    a->read("enabled", c.adapter.enabled);
    a->read("rank", c.adapter.rank);
    a->read("alpha", c.adapter.alpha);
    a->read("dropout", c.adapter.dropout);
    a->read("lr", c.adapter.lr);
    a->read("weight_decay", c.adapter.weight_decay);
    a->read("epochs", c.adapter.epochs);
    a->read("batch", c.adapter.batch);
    a->read("train_heads", c.adapter.train_heads);
    a->finish();
  }
  r.finish();
  return c;
}

}  // namespace stproph::trainer
