// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "stproph/data/dataset.hpp"
#include "stproph/text/text_embed.hpp"
#include "stproph/trainer/train.hpp"

namespace stproph::trainer {

enum class Split { train, val, test };

Split parse_split(const std::string& s);

/// A dataset split chronologically, standardized on the training range and
/// cut into windows.
struct PreparedData {
  data::SeriesMatrix raw;
  data::SeriesMatrix standardized;
  data::Standardizer standardizer;
  data::SplitRanges ranges;
  std::size_t window = 0;
  std::size_t horizon = 0;
  std::vector<data::WindowSample> train, val, test;
  std::vector<std::string> warnings;

  const std::vector<data::WindowSample>& samples(Split s) const;
};

/// Throws DataError when the train or validation split yields no windows.
PreparedData prepare(const data::SeriesMatrix& raw, const data::SplitSpec& split, std::size_t window,
                     std::size_t horizon);
/// Same windows, with the standardizer supplied (e.g. from a checkpoint).
PreparedData prepare(const data::SeriesMatrix& raw, const data::SplitSpec& split, std::size_t window,
                     std::size_t horizon, const data::Standardizer& standardizer);

/// Replaces window inputs with those of `masked` (standardized, same shape);
/// targets keep their original values.
std::vector<data::WindowSample> mask_inputs(const std::vector<data::WindowSample>& samples,
                                            const data::SeriesMatrix& masked);

/// Owns the text provider and its cache for one prepared dataset.
class Session {
 public:
  Session(PreparedData data, std::unique_ptr<text::TextProvider> provider);

  const PreparedData& data() const { return data_; }
  TextSource* text() { return text_ ? &*text_ : nullptr; }
  text::TextProvider* provider() { return provider_.get(); }

  EvalData eval(Split s);
  EvalData eval(const std::vector<data::WindowSample>& samples);
  TrainData train_data();

 private:
  PreparedData data_;
  std::unique_ptr<text::TextProvider> provider_;
  std::optional<TextSource> text_;
};

}  // namespace stproph::trainer
