// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "stproph/lora/linear.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/numerics/tape.hpp"

namespace stproph::attn {

/// softmax(Q K^T * scale + offset) V computed independently on consecutive
/// blocks of `seg_len` rows. Q, K: R x d_qk, V: R x d_v. `logit_offset` is
/// added to every logit and exists for testing shift invariance.
/// op: "segment_attention"
num::Var segment_attention(num::Var q, num::Var k, num::Var v, std::size_t seg_len, double scale,
                           double logit_offset = 0.0);

/// Attention weights of one block, for inspection in tests.
num::Tensor attention_weights(const num::Tensor& q, const num::Tensor& k, double scale);

enum class Axis { window, sensor };

struct GQMHAConfig {
  std::size_t groups = 3;   // G
  std::size_t heads = 4;    // H, per group
  std::size_t d = 64;
  /// false: every head projects to the full width d and W_o is (H*d) x d.
  /// true: heads project to d/H and W_o is d x d.
  bool per_head_width = false;
  /// Adds the block input to its output.
  bool residual = false;
  double logit_offset = 0.0;

  /// Scaling denominator d_k = d / H.
  std::size_t d_k() const { return d / heads; }
  std::size_t head_width() const { return per_head_width ? d / heads : d; }
  void validate() const;
};

/// Grouped-query multi-head attention. Each group owns one key and one value
/// projection shared by its H heads; every head has its own query projection.
/// Head outputs are concatenated and projected by the group's W_o, and the
/// group results are averaged.
class GQMHABlock {
 public:
  GQMHABlock() = default;
  GQMHABlock(const std::string& name, const GQMHAConfig& config, num::Rng& rng);

  /// rows = S * seg_len; every consecutive block of seg_len rows is one sequence.
  num::Var attend(num::Tape& tape, num::Var seq, std::size_t seg_len);
  /// Single L x d sequence on plain values.
  num::Tensor attend(const num::Tensor& seq);

  const GQMHAConfig& config() const { return config_; }
  GQMHAConfig& config() { return config_; }

  struct Group {
    lora::Linear key;
    lora::Linear value;
    std::vector<lora::Linear> queries;
    lora::Linear out;
  };
  std::vector<Group>& groups() { return groups_; }

  void collect(num::ParameterList& out);
  std::vector<lora::Linear*> linears();
  std::size_t parameter_count() const;

 private:
  GQMHAConfig config_;
  std::vector<Group> groups_;
};

/// Row permutation taking sensor-major rows (sample, sensor, step) to
/// step-major rows (sample, step, sensor); apply the inverse to go back.
std::vector<std::size_t> sensor_major_to_step_major(std::size_t samples, std::size_t sensors, std::size_t window);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

/// Attention over the window axis, independently per sensor. Input rows are
/// (sample, sensor, step) ordered.
num::Var intra_series(num::Tape& tape, num::Var x, GQMHABlock& block, std::size_t window);
/// Attention over the sensor axis, independently per window step.
num::Var inter_series(num::Tape& tape, num::Var x, GQMHABlock& block, std::size_t sensors, std::size_t window);

/// Value-level versions for an N x W x d tensor (stored as (N*W) x d or {N, W, d}).
num::Tensor intra_series(const num::Tensor& x, GQMHABlock& block, std::size_t sensors, std::size_t window);
num::Tensor inter_series(const num::Tensor& x, GQMHABlock& block, std::size_t sensors, std::size_t window);

}  // namespace stproph::attn
