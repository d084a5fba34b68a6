// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/run_config.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "json_reader.hpp"
#include "stproph/error.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/trainer/config_io.hpp"

namespace stproph::trainer {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

void read_split(JsonReader& r, data::SplitSpec& split) {
  std::vector<double> s;
  if (!r.read("split", s)) return;
  if (s.size() != 3) throw ConfigError("dataset.split: expected [train, val, test] fractions");
  split = {s[0], s[1], s[2]};
}

}  // namespace

void RunConfig::validate() const {
  const int sources = !dataset.manifest.empty() + !dataset.csv.empty() + !dataset.synthetic.empty();
  if (sources != 1) throw ConfigError("dataset: set exactly one of manifest, csv or synthetic");
  if (!dataset.synthetic.empty() && dataset.synthetic != "coupled" && dataset.synthetic != "heteroscedastic" &&
      dataset.synthetic != "toy_sine") {
    throw ConfigError("dataset.synthetic: unknown generator '" + dataset.synthetic +
                      "'; expected coupled, heteroscedastic or toy_sine");
  }
  const auto& s = dataset.split;
  if (s.train <= 0.0 || s.val <= 0.0 || s.test <= 0.0 || std::abs(s.train + s.val + s.test - 1.0) > 1e-9) {
    throw ConfigError("dataset.split: fractions must be positive and sum to 1");
  }
  if (text_provider.kind != "stub" && text_provider.kind != "fixture" && text_provider.kind != "http") {
    throw ConfigError("text_provider.kind: unknown provider '" + text_provider.kind + "'; expected stub, fixture or http");
  }
  if (text_provider.kind == "fixture" && text_provider.fixture.empty()) {
    throw ConfigError("text_provider.fixture: required for the fixture provider");
  }
  if (output.dir.empty()) throw ConfigError("output.dir must not be empty");
  model.validate();
  train.validate();
}

RunConfig parse_run_config(const std::string& text, const std::string& origin, const std::string& base_dir) {
  RunConfig c;
  JsonReader root(parse_json(text, origin), "config");
  if (auto d = root.object("dataset")) {
    d->read("manifest", c.dataset.manifest);
    d->read("csv", c.dataset.csv);
    d->read("synthetic", c.dataset.synthetic);
    d->read("steps", c.dataset.steps);
    d->read("seed", c.dataset.seed);
    d->read("sensors", c.dataset.sensors);
    d->read("amplitude", c.dataset.amplitude);
    d->read("offset", c.dataset.offset);
    read_split(*d, c.dataset.split);
    d->finish();
    c.dataset.manifest = resolve(c.dataset.manifest, base_dir);
    c.dataset.csv = resolve(c.dataset.csv, base_dir);
  }
  if (auto m = root.raw("model")) c.model = parse_model_config(m->dump(), "config.model");
  if (auto t = root.raw("train")) c.train = parse_train_config(t->dump(), "config.train");
  if (auto t = root.object("text_provider")) {
    t->read("kind", c.text_provider.kind);
    t->read("fixture", c.text_provider.fixture);
    t->read("endpoint", c.text_provider.endpoint);
    t->read("prompt_template", c.text_provider.prompt_template);
    t->read("model", c.text_provider.model);
    t->read("max_tokens", c.text_provider.max_tokens);
    t->read("timeout_ms", c.text_provider.timeout_ms);
    t->read("retries", c.text_provider.retries);
    t->read("fallback_to_stub", c.text_provider.fallback_to_stub);
    t->read("seed", c.text_provider.seed);
    t->finish();
    c.text_provider.fixture = resolve(c.text_provider.fixture, base_dir);
  }
  if (auto o = root.object("output")) {
    o->read("dir", c.output.dir);
    o->finish();
  }
  root.finish();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path, fs::path(path).parent_path().string());
}

std::string to_json(const RunConfig& c) {
  json j;
  const auto& d = c.dataset;
  j["dataset"] = {{"manifest", d.manifest}, {"csv", d.csv},           {"synthetic", d.synthetic},
                  {"steps", d.steps},       {"seed", d.seed},         {"sensors", d.sensors},
                  {"amplitude", d.amplitude}, {"offset", d.offset},
                  {"split", {d.split.train, d.split.val, d.split.test}}};
  j["model"] = json::parse(to_json(c.model));
  j["train"] = json::parse(to_json(c.train));
  const auto& t = c.text_provider;
  j["text_provider"] = {{"kind", t.kind},
                        {"fixture", t.fixture},
                        {"endpoint", t.endpoint},
                        {"prompt_template", t.prompt_template},
                        {"model", t.model},
                        {"max_tokens", t.max_tokens},
                        {"timeout_ms", t.timeout_ms},
                        {"retries", t.retries},
                        {"fallback_to_stub", t.fallback_to_stub},
                        {"seed", t.seed}};
  j["output"] = {{"dir", c.output.dir}};
  return j.dump();
}

std::string config_hash(const RunConfig& c) {
  // The output directory does not change results.
  RunConfig copy = c;
  copy.output.dir.clear();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(num::fnv1a(to_json(copy))));
  return buf;
}

void apply_environment(RunConfig& c, const EnvLookup& env) {
  if (const char* v = env("STPROPH_OUT_DIR"); v && *v) c.output.dir = v;
  if (const char* v = env("STPROPH_EMBED_ENDPOINT"); v && *v) c.text_provider.endpoint = v;
}

data::SeriesMatrix load_dataset(RunConfig& c) {
  const auto& d = c.dataset;
  if (!d.manifest.empty()) {
    const data::Manifest m = data::load_manifest(d.manifest);
    if (m.window != c.model.window || m.horizon != c.model.horizon) {
      throw ConfigError("manifest " + d.manifest + " declares W=" + std::to_string(m.window) +
                        ", nu=" + std::to_string(m.horizon) + " but the model uses W=" +
                        std::to_string(c.model.window) + ", nu=" + std::to_string(c.model.horizon));
    }
    c.dataset.split = m.split;
    data::SeriesMatrix x = data::load_csv(m.path);
    x.name = m.name;
    x.granularity = m.granularity;
    return x;
  }
  if (!d.csv.empty()) return data::load_csv(d.csv);
  if (d.synthetic == "coupled") return data::synthetic_coupled(d.steps, d.seed);
  if (d.synthetic == "heteroscedastic") return data::synthetic_heteroscedastic(d.steps, d.seed, nullptr);
  if (d.synthetic == "toy_sine") return data::toy_sine(d.steps, d.sensors, d.amplitude, d.offset);
  throw ConfigError("dataset: no source configured");
}

std::unique_ptr<text::TextProvider> make_provider(const RunConfig& c) {
  if (!c.model.uses("LLMs")) return nullptr;
  const auto& t = c.text_provider;
  std::unique_ptr<text::TextProvider> p;
  if (t.kind == "stub") {
    p = std::make_unique<text::StubProvider>(c.model.d_text, c.model.text_tokens, t.seed);
  } else if (t.kind == "fixture") {
    p = std::make_unique<text::FixtureProvider>(text::load_fixture(t.fixture));
  } else {
    text::HttpProviderOptions o;
    o.endpoint = t.endpoint;
    if (!t.prompt_template.empty()) o.prompt_template = t.prompt_template;
    o.request.model = t.model;
    o.request.max_tokens = static_cast<int>(t.max_tokens);
    o.request.timeout_ms = static_cast<int>(t.timeout_ms);
    o.request.retries = static_cast<int>(t.retries);
    o.fallback_to_stub = t.fallback_to_stub;
    o.stub_dim = c.model.d_text;
    o.stub_tokens = c.model.text_tokens;
    o.seed = t.seed;
    p = std::make_unique<text::HttpProvider>(std::move(o));
  }
  if (t.kind != "http" && p->dim() != c.model.d_text) {
    throw ConfigError("text provider width " + std::to_string(p->dim()) + " does not match model.d_text " +
                      std::to_string(c.model.d_text));
  }
  return p;
}

}  // namespace stproph::trainer
