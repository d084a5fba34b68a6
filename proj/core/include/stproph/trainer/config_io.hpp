// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "stproph/trainer/train.hpp"

namespace stproph::trainer {

/// Canonical JSON (sorted keys, every field present).
std::string to_json(const ModelConfig& c);
std::string to_json(const TrainConfig& c);

/// Parses a JSON object, overriding only the keys present. Unknown keys and
/// wrong types throw ConfigError naming the offending path (e.g. "model.top_k").
ModelConfig parse_model_config(const std::string& json, const std::string& path = "model",
                               const ModelConfig& base = {});
TrainConfig parse_train_config(const std::string& json, const std::string& path = "train",
                               const TrainConfig& base = {});

}  // namespace stproph::trainer
