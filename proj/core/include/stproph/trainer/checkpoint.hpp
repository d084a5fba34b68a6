// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "stproph/data/dataset.hpp"
#include "stproph/trainer/model.hpp"
#include "stproph/trainer/train.hpp"

namespace stproph::trainer {

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'P', 'R', 'O', 'P', 'H', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything besides parameter values that a checkpoint records.
struct CheckpointMeta {
  ModelConfig model;
  std::uint64_t model_seed = 0;
  TrainConfig train;
  data::Standardizer standardizer;
  std::uint64_t rng_seed = 0;
  std::string rng_state;
  std::string run_config = "{}";  // JSON document of the producing run
};

/// Layout: 8-byte magic, uint32 version, uint64 header length, JSON header,
/// then every parameter's values as little-endian doubles in header order.
void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<Model> model;
};

/// Rebuilds the model (attaching any recorded adapters) and restores every
/// parameter by name. Throws DataError on a missing, truncated or foreign file.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace stproph::trainer
