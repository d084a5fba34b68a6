// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "stproph/error.hpp"
#include "stproph/trainer/config_io.hpp"

namespace stproph::trainer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using nlohmann::json;

namespace {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw DataError("checkpoint " + path + " is truncated");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta) {
  json header;
  header["model"] = json::parse(to_json(meta.model));
  header["model_seed"] = meta.model_seed;
  header["train"] = json::parse(to_json(meta.train));
  header["standardizer"] = {{"mean", meta.standardizer.mean()}, {"stddev", meta.standardizer.stddev()}};
  header["rng"] = {{"seed", meta.rng_seed}, {"state", meta.rng_state}};
  header["run_config"] = json::parse(meta.run_config);

  json adapters = json::array();
  for (auto* l : model.adaptable_linears()) {
    if (!l->adapted()) continue;
    adapters.push_back({{"layer", l->name()},
                        {"rank", l->adapter().rank()},
                        {"alpha", l->adapter().alpha()},
                        {"dropout", l->adapter().dropout_rate()}});
  }
  header["adapters"] = adapters;

  json params = json::array();
  std::size_t offset = 0;
  const auto list = model.parameters();
  for (const auto* p : list) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}, {"trainable", p->trainable}});
    offset += p->value.size();
  }
  header["parameters"] = params;

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod(out, kCheckpointVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* p : list) {
    const auto& v = p->value.storage();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw DataError(path + " is not a checkpoint (bad magic)");
  }
  const auto version = read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint " + path + " has version " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto length = read_pod<std::uint64_t>(in, path);
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw DataError("checkpoint " + path + " is truncated");

  LoadedCheckpoint out;
  try {
    const json header = json::parse(text);
    auto& meta = out.meta;
    meta.model = parse_model_config(header.at("model").dump(), "checkpoint.model");
    meta.model_seed = header.at("model_seed").get<std::uint64_t>();
    meta.train = parse_train_config(header.at("train").dump(), "checkpoint.train");
    meta.standardizer = data::Standardizer(header.at("standardizer").at("mean").get<std::vector<double>>(),
                                           header.at("standardizer").at("stddev").get<std::vector<double>>());
    meta.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
    meta.rng_state = header.at("rng").at("state").get<std::string>();
    meta.run_config = header.at("run_config").dump();

    out.model = std::make_unique<Model>(meta.model, meta.model_seed);
    const json& adapters = header.at("adapters");
    if (!adapters.empty()) {
      const json& a = adapters.front();
      out.model->attach_adapters(a.at("rank").get<std::size_t>(), a.at("alpha").get<double>(),
                                 a.at("dropout").get<double>(), meta.model_seed);
    }

    std::map<std::string, num::Parameter*> by_name;
    for (auto* p : out.model->parameters()) by_name[p->name] = p;
    const json& params = header.at("parameters");
    if (params.size() != by_name.size()) {
      throw DataError("checkpoint " + path + " lists " + std::to_string(params.size()) + " parameters, model has " +
                      std::to_string(by_name.size()));
    }
    for (const auto& entry : params) {
      const auto name = entry.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("checkpoint parameter '" + name + "' does not exist in the model");
      num::Parameter& p = *it->second;
      if (entry.at("shape").get<num::Shape>() != p.value.shape()) {
        throw DataError("checkpoint parameter '" + name + "' has the wrong shape");
      }
      auto& v = p.value.storage();
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
        throw DataError("checkpoint " + path + " is truncated");
      }
      p.trainable = entry.at("trainable").get<bool>();
    }
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path + " has a malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("checkpoint " + path + " has an invalid configuration: " + e.what());
  }
  return out;
}

}  // namespace stproph::trainer
