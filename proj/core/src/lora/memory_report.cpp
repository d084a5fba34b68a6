// SPDX-License-Identifier: Apache-2.0
#include "stproph/lora/memory_report.hpp"

#include <json.hpp>

#include "stproph/error.hpp"

namespace stproph::lora {

MemoryReport memory_report(std::uint64_t d, std::uint64_t r, std::uint64_t batch, std::uint64_t tokens) {
  if (d == 0 || batch == 0 || tokens == 0) throw ConfigError("memory_report: sizes must be positive");
  if (r < 2 || r % 2 != 0) throw ConfigError("memory_report: rank must be even and >= 2, got " + std::to_string(r));
  if (r >= d) throw ConfigError("memory_report: rank must be below d");

  const std::uint64_t n = batch * tokens;
  MemoryReport rep;
  rep.d = d;
  rep.r = r;
  rep.batch = batch;
  rep.tokens = tokens;

  rep.full = {"full", d * d, 0, n * d, d};
  rep.lora = {"lora", 2 * r * d, d * d, n * d, d};
  rep.amr = {"lora_amr", (r / 2) * d, d * d + d * r + r * (r / 2), n * (r / 2), r / 2};

  rep.full_over_lora = static_cast<double>(rep.full.trainable_params) / static_cast<double>(rep.lora.trainable_params);
  rep.full_over_amr = static_cast<double>(rep.full.trainable_params) / static_cast<double>(rep.amr.trainable_params);
  rep.activation_ratio =
      static_cast<double>(rep.lora.stored_activation_width) / static_cast<double>(rep.amr.stored_activation_width);
  rep.init_note = "B, D ~ N(0, 1/d); C = 0; alpha = 1/r";
  return rep;
}

namespace {
nlohmann::json footprint_json(const MethodFootprint& f) {
  return {{"trainable_params", f.trainable_params},
          {"frozen_params", f.frozen_params},
          {"stored_activation_elems", f.stored_activation_elems},
          {"stored_activation_width", f.stored_activation_width}};
}
}  // namespace

std::string to_json(const MemoryReport& report) {
  nlohmann::ordered_json j;
  j["d"] = report.d;
  j["r"] = report.r;
  j["batch"] = report.batch;
  j["tokens"] = report.tokens;
  j["full"] = footprint_json(report.full);
  j["lora"] = footprint_json(report.lora);
  j["lora_amr"] = footprint_json(report.amr);
  j["ratio_full_over_lora"] = report.full_over_lora;
  j["ratio_full_over_lora_amr"] = report.full_over_amr;
  j["activation_width_ratio"] = report.activation_ratio;
  j["init"] = report.init_note;
  return j.dump(2);
}

}  // namespace stproph::lora
