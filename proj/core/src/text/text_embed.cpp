// SPDX-License-Identifier: Apache-2.0
#include "stproph/text/text_embed.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace stproph::text {

using json = nlohmann::json;

namespace {

void check_offsets(const std::vector<std::size_t>& offsets, std::size_t rows) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
    throw ShapeError("attention_pool: offsets must start at 0 and end at the token count " + std::to_string(rows));
  }
  for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
    if (offsets[c + 1] <= offsets[c]) throw ShapeError("attention_pool: cell " + std::to_string(c) + " has no tokens");
  }
}

// Softmax weights of the tokens in [begin, end) under u.
void cell_weights(const num::Tensor& h, const double* u, std::size_t begin, std::size_t end, double* alpha) {
  const std::size_t dt = h.cols();
  double mx = -INFINITY;
  for (std::size_t i = begin; i < end; ++i) {
    const double* hr = h.row_ptr(i);
    double q = 0.0;
    for (std::size_t j = 0; j < dt; ++j) q += u[j] * hr[j];
    alpha[i - begin] = q;
    mx = std::max(mx, q);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < end - begin; ++i) {
    alpha[i] = std::exp(alpha[i] - mx);
    z += alpha[i];
  }
  for (std::size_t i = 0; i < end - begin; ++i) alpha[i] /= z;
}

}  // namespace

num::Var attention_pool(num::Var tokens, num::Var u, const std::vector<std::size_t>& offsets) {
  num::Tape& t = *tokens.tape;
  const num::Tensor& h = t.value(tokens);
  const num::Tensor& uv = t.value(u);
  num::require_rank2(h, "attention_pool");
  if (uv.size() != h.cols()) {
    throw ShapeError("attention_pool: u has " + std::to_string(uv.size()) + " entries, tokens have width " +
                     std::to_string(h.cols()));
  }
  check_offsets(offsets, h.rows());
  const std::size_t cells = offsets.size() - 1, dt = h.cols();
  auto alpha = std::make_shared<std::vector<double>>(h.rows());
  num::Tensor out({cells, dt});
  for (std::size_t c = 0; c < cells; ++c) {
    cell_weights(h, uv.data().data(), offsets[c], offsets[c + 1], alpha->data() + offsets[c]);
    double* orow = out.row_ptr(c);
    for (std::size_t i = offsets[c]; i < offsets[c + 1]; ++i) {
      const double* hr = h.row_ptr(i);
      for (std::size_t j = 0; j < dt; ++j) orow[j] += (*alpha)[i] * hr[j];
    }
  }
  const bool rg = t.requires_grad(tokens) || t.requires_grad(u);
  return t.record(std::move(out), "attention_pool", rg, [&t, tokens, u, offsets, alpha, cells, dt](const num::Tensor& g) {
    const num::Tensor& h = t.value(tokens);
    const num::Tensor& uv = t.value(u);
    num::Tensor dh(h.shape()), du(uv.shape());
    for (std::size_t c = 0; c < cells; ++c) {
      const double* gr = g.row_ptr(c);
      // out = sum a_i h_i, so d/dh_i gets a_i g and d/dq_i = a_i (g.h_i - g.out).
      double gout = 0.0;
      std::vector<double> gh(offsets[c + 1] - offsets[c]);
      for (std::size_t i = offsets[c]; i < offsets[c + 1]; ++i) {
        const double* hr = h.row_ptr(i);
        double s = 0.0;
        for (std::size_t j = 0; j < dt; ++j) s += gr[j] * hr[j];
        gh[i - offsets[c]] = s;
        gout += (*alpha)[i] * s;
      }
      for (std::size_t i = offsets[c]; i < offsets[c + 1]; ++i) {
        const double a = (*alpha)[i];
        const double dq = a * (gh[i - offsets[c]] - gout);
        const double* hr = h.row_ptr(i);
        double* dhr = dh.row_ptr(i);
        for (std::size_t j = 0; j < dt; ++j) {
          dhr[j] = a * gr[j] + dq * uv[j];
          du[j] += dq * hr[j];
        }
      }
    }
    t.accumulate(tokens, dh, "attention_pool");
    t.accumulate(u, du, "attention_pool");
  });
}

namespace {
struct Dims {
  std::size_t cells, m, dt;
};
Dims pool_dims(const num::Tensor& tokens, const num::Tensor& u) {
  if (tokens.rank() != 4) throw ShapeError("attention_pool: expected N x W x m x d_t, got " + num::shape_string(tokens.shape()));
  const auto& s = tokens.shape();
  if (s[2] == 0) throw ShapeError("attention_pool: m must be at least 1");
  if (u.size() != s[3]) throw ShapeError("attention_pool: u has " + std::to_string(u.size()) + " entries, d_t is " + std::to_string(s[3]));
  return {s[0] * s[1], s[2], s[3]};
}
}  // namespace

num::Tensor attention_pool(const num::Tensor& tokens, const num::Tensor& u) {
  const Dims dm = pool_dims(tokens, u);
  num::Tensor rows = tokens.reshaped({dm.cells * dm.m, dm.dt});
  num::Tensor out({tokens.shape()[0], tokens.shape()[1], dm.dt});
  std::vector<double> alpha(dm.m);
  for (std::size_t c = 0; c < dm.cells; ++c) {
    cell_weights(rows, u.data().data(), c * dm.m, (c + 1) * dm.m, alpha.data());
    for (std::size_t i = 0; i < dm.m; ++i)
      for (std::size_t j = 0; j < dm.dt; ++j) out[c * dm.dt + j] += alpha[i] * rows(c * dm.m + i, j);
  }
  return out;
}

num::Tensor pooling_weights(const num::Tensor& tokens, const num::Tensor& u) {
  const Dims dm = pool_dims(tokens, u);
  num::Tensor rows = tokens.reshaped({dm.cells * dm.m, dm.dt});
  num::Tensor out({dm.cells, dm.m});
  for (std::size_t c = 0; c < dm.cells; ++c) cell_weights(rows, u.data().data(), c * dm.m, (c + 1) * dm.m, out.row_ptr(c));
  return out;
}

TextPooling::TextPooling(std::size_t d_text) : u_("text.pool_u", num::Tensor({1, d_text})) {}

num::Var TextPooling::forward(num::Tape& tape, num::Var tokens, const std::vector<std::size_t>& offsets) {
  return attention_pool(tokens, tape.param(u_), offsets);
}

// ---------------------------------------------------------------------------
// Stub provider

namespace {

std::uint64_t mix(std::uint64_t h, std::uint64_t v) { return num::splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2))); }

std::uint64_t bucket(double x, double width, long lo, long hi) {
  const double b = std::floor(x / width);
  return static_cast<std::uint64_t>(std::clamp(static_cast<long>(std::isfinite(b) ? b : 0.0), lo, hi) - lo);
}

int sign_bucket(double x) { return x > 1e-9 ? 2 : (x < -1e-9 ? 0 : 1); }

std::uint64_t window_code(std::span<const double> x) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0, sxy = 0.0, sxx = 0.0;
  const double tbar = (static_cast<double>(n) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    var += (x[i] - mean) * (x[i] - mean);
    sxy += (static_cast<double>(i) - tbar) * (x[i] - mean);
    sxx += (static_cast<double>(i) - tbar) * (static_cast<double>(i) - tbar);
  }
  var /= static_cast<double>(n);
  const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
  const auto [mn, mx] = std::minmax_element(x.begin(), x.end());
  std::uint64_t h = 0x5f3759df;
  h = mix(h, bucket(mean, 0.5, -8, 8));
  h = mix(h, static_cast<std::uint64_t>(sign_bucket(slope)));
  h = mix(h, static_cast<std::uint64_t>(mn - x.begin()));
  h = mix(h, static_cast<std::uint64_t>(mx - x.begin()));
  h = mix(h, bucket(std::log2(var + 1e-12), 1.0, -40, 10));
  return h;
}

}  // namespace

num::Tensor stub_embed(std::span<const double> window, std::size_t d_text, std::size_t tokens, std::uint64_t seed) {
  if (d_text == 0 || tokens == 0) throw ConfigError("stub_embed: d_t and m must be at least 1");
  const std::size_t W = window.size();
  num::Tensor out({W, tokens, d_text});
  if (W == 0) return out;
  const std::uint64_t code = window_code(window);
  for (std::size_t w = 0; w < W; ++w) {
    const double step = w == 0 ? 0.0 : window[w] - window[w - 1];
    std::uint64_t cell = mix(mix(code, w), bucket(window[w], 0.25, -32, 32));
    cell = mix(cell, static_cast<std::uint64_t>(sign_bucket(step)));
    cell = mix(cell, seed);
    double* dst = out.data().data() + w * tokens * d_text;
    for (std::size_t i = 0; i < tokens * d_text; ++i) {
      const std::uint64_t r = num::splitmix64(cell + i * 0x632be59bd9b4e019ULL);
      dst[i] = 2.0 * (static_cast<double>(r >> 11) * 0x1.0p-53) - 1.0;
    }
  }
  return out;
}

StubProvider::StubProvider(std::size_t d_text, std::size_t tokens, std::uint64_t seed)
    : d_text_(d_text), tokens_(tokens), seed_(seed) {
  if (d_text == 0 || tokens == 0) throw ConfigError("stub provider: d_t and m must be at least 1");
}

WindowTokens StubProvider::embed(const WindowContext& ctx) {
  const std::size_t W = ctx.values.size();
  num::Tensor e = stub_embed(ctx.values, d_text_, tokens_, mix(seed_, ctx.sensor));
  return {e.reshaped({W * tokens_, d_text_}), std::vector<std::size_t>(W, tokens_)};
}

// ---------------------------------------------------------------------------
// Fixtures

namespace {

num::Tensor parse_fixture(const json& doc, const std::string& path) {
  using K = FixtureError::Kind;
  if (!doc.is_object() || !doc.contains("shape")) throw FixtureError(K::malformed, path + ": missing 'shape'");
  const json& js = doc["shape"];
  if (!js.is_array() || js.size() != 4) throw FixtureError(K::malformed, path + ": 'shape' must be [N, W, m, d_t]");
  num::Shape shape;
  for (const auto& v : js) {
    if (!v.is_number_unsigned() || v.get<std::size_t>() == 0) {
      throw FixtureError(K::malformed, path + ": shape entries must be positive integers");
    }
    shape.push_back(v.get<std::size_t>());
  }
  const std::size_t total = num::shape_size(shape);
  if (doc.contains("data")) {
    const json& data = doc["data"];
    if (!data.is_array()) throw FixtureError(K::malformed, path + ": 'data' must be an array");
    if (data.size() != total) {
      throw FixtureError(K::shape_mismatch, path + ": shape " + num::shape_string(shape) + " needs " +
                                                std::to_string(total) + " values, found " + std::to_string(data.size()));
    }
    std::vector<double> values;
    values.reserve(total);
    for (const auto& v : data) {
      if (!v.is_number()) throw FixtureError(K::malformed, path + ": non-numeric entry in 'data'");
      values.push_back(v.get<double>());
    }
    return num::Tensor(shape, std::move(values));
  }
  if (!doc.contains("cells") || !doc["cells"].is_array()) {
    throw FixtureError(K::malformed, path + ": expected 'data' or 'cells'");
  }
  const std::size_t N = shape[0], W = shape[1], m = shape[2], dt = shape[3];
  num::Tensor out(shape);
  std::vector<bool> seen(N * W, false);
  for (const auto& cell : doc["cells"]) {
    if (!cell.is_object() || !cell.contains("sensor") || !cell.contains("step") || !cell.contains("embeddings")) {
      throw FixtureError(K::malformed, path + ": every cell needs sensor, step and embeddings");
    }
    const std::size_t n = cell["sensor"].get<std::size_t>(), w = cell["step"].get<std::size_t>();
    if (n >= N || w >= W) throw FixtureError(K::shape_mismatch, path + ": cell index out of the declared shape");
    const json& rows = cell["embeddings"];
    if (!rows.is_array() || rows.size() != m) {
      throw FixtureError(K::shape_mismatch, path + ": cell (" + std::to_string(n) + ", " + std::to_string(w) +
                                                ") does not have " + std::to_string(m) + " tokens");
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (!rows[i].is_array() || rows[i].size() != dt) {
        throw FixtureError(K::shape_mismatch, path + ": token rows must have d_t = " + std::to_string(dt) + " values");
      }
      for (std::size_t j = 0; j < dt; ++j) out[((n * W + w) * m + i) * dt + j] = rows[i][j].get<double>();
    }
    seen[n * W + w] = true;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw FixtureError(K::shape_mismatch, path + ": not every (sensor, step) cell is present");
  }
  return out;
}

}  // namespace

num::Tensor load_fixture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FixtureError(FixtureError::Kind::missing_file, "cannot open fixture " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw FixtureError(FixtureError::Kind::malformed, path + ": " + e.what());
  }
  try {
    num::Tensor t = parse_fixture(doc, path);
    if (!t.all_finite()) throw FixtureError(FixtureError::Kind::malformed, path + ": non-finite embedding values");
    return t;
  } catch (const json::exception& e) {
    throw FixtureError(FixtureError::Kind::malformed, path + ": " + e.what());
  }
}

void save_fixture(const std::string& path, const num::Tensor& tokens) {
  if (tokens.rank() != 4) throw ShapeError("save_fixture: expected N x W x m x d_t, got " + num::shape_string(tokens.shape()));
  json doc;
  doc["shape"] = tokens.shape();
  doc["data"] = tokens.storage();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write fixture " + path);
  // nlohmann writes doubles with max_digits10, which round-trips exactly.
  out << doc.dump() << '\n';
}

FixtureProvider::FixtureProvider(num::Tensor tokens) : tokens_(std::move(tokens)) {
  if (tokens_.rank() != 4) throw ShapeError("fixture provider: expected N x W x m x d_t");
}

WindowTokens FixtureProvider::embed(const WindowContext& ctx) {
  const auto& s = tokens_.shape();
  const std::size_t N = s[0], steps = s[1], m = s[2], dt = s[3], W = ctx.values.size();
  if (ctx.sensor >= N) throw DataError("fixture has " + std::to_string(N) + " sensors, asked for sensor " + std::to_string(ctx.sensor));
  const bool relative = steps == W;
  if (!relative && ctx.start + W > steps) {
    throw DataError("fixture covers " + std::to_string(steps) + " steps, window ends at " + std::to_string(ctx.start + W));
  }
  WindowTokens out{num::Tensor({W * m, dt}), std::vector<std::size_t>(W, m)};
  for (std::size_t w = 0; w < W; ++w) {
    const std::size_t step = relative ? w : ctx.start + w;
    const double* src = tokens_.data().data() + (ctx.sensor * steps + step) * m * dt;
    std::copy(src, src + m * dt, out.rows.row_ptr(w * m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;
};

Endpoint split_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  const std::size_t host_begin = scheme == std::string::npos ? 0 : scheme + 3;
  const auto slash = url.find('/', host_begin);
  if (slash == std::string::npos) return {url, "/embed"};
  return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

num::Tensor http_embed(const std::string& endpoint, const std::string& prompt, const HttpRequestOptions& options) {
  using K = ProviderError::Kind;
  if (endpoint.empty()) throw ProviderError(K::unreachable, "no embedding endpoint configured");
  const Endpoint ep = split_endpoint(endpoint);
  httplib::Client client(ep.base);
  const auto secs = options.timeout_ms / 1000, usecs = (options.timeout_ms % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  const json body = {{"model", options.model}, {"prompt", prompt}, {"max_tokens", options.max_tokens}};

  httplib::Result res;
  for (int attempt = 0; attempt <= options.retries; ++attempt) {
    res = client.Post(ep.path, body.dump(), "application/json");
    if (res && res->status < 500) break;
  }
  if (!res) {
    const auto err = res.error();
    const K kind = (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read) ? K::timeout : K::unreachable;
    throw ProviderError(kind, "embedding request to " + endpoint + " failed: " + httplib::to_string(err));
  }
  if (res->status < 200 || res->status >= 300) {
    throw ProviderError(K::status, "embedding endpoint " + endpoint + " returned status " + std::to_string(res->status));
  }
  json doc;
  try {
    doc = json::parse(res->body);
  } catch (const json::exception& e) {
    throw ProviderError(K::malformed, std::string("embedding response is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("embeddings") || !doc["embeddings"].is_array()) {
    throw ProviderError(K::malformed, "embedding response lacks an 'embeddings' array");
  }
  const json& rows = doc["embeddings"];
  if (rows.empty() || !rows[0].is_array() || rows[0].empty()) throw ProviderError(K::empty, "embedding matrix is empty");
  const std::size_t dt = rows[0].size();
  num::Tensor out({rows.size(), dt});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].is_array() || rows[i].size() != dt) {
      throw ProviderError(K::ragged, "embedding row " + std::to_string(i) + " has " +
                                         std::to_string(rows[i].is_array() ? rows[i].size() : 0) + " values, row 0 has " +
                                         std::to_string(dt));
    }
    for (std::size_t j = 0; j < dt; ++j) {
      if (!rows[i][j].is_number()) throw ProviderError(K::malformed, "non-numeric embedding value");
      out(i, j) = rows[i][j].get<double>();
    }
  }
  if (!out.all_finite()) throw ProviderError(K::malformed, "non-finite embedding value");
  return out;
}

HttpProvider::HttpProvider(HttpProviderOptions options)
    : options_(std::move(options)), stub_(options_.stub_dim, options_.stub_tokens, options_.seed) {
  if (options_.endpoint.empty()) {
    if (const char* env = std::getenv("STPROPH_EMBED_ENDPOINT")) options_.endpoint = env;
  }
}

std::size_t HttpProvider::dim() const { return dim_.value_or(options_.stub_dim); }

std::string HttpProvider::render(const std::string& tmpl, const WindowContext& ctx, std::size_t step) {
  auto fmt = [](double v) {
    if (std::isnan(v)) return std::string("missing");
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
  };
  std::string values;
  const auto src = ctx.raw.empty() ? ctx.values : ctx.raw;
  for (std::size_t i = 0; i < src.size(); ++i) values += (i ? ", " : "") + fmt(src[i]);
  const std::string sensor = ctx.sensor_name.empty() ? std::to_string(ctx.sensor) : ctx.sensor_name;
  const std::pair<std::string, std::string> subs[] = {
      {"{sensor}", sensor},
      {"{step}", std::to_string(ctx.start + step)},
      {"{start}", std::to_string(ctx.start)},
      {"{end}", std::to_string(ctx.start + src.size() - (src.empty() ? 0 : 1))},
      {"{value}", step < src.size() ? fmt(src[step]) : std::string()},
      {"{values}", values},
  };
  std::string out = tmpl;
  for (const auto& [key, val] : subs) {
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + val.size())) {
      out.replace(pos, key.size(), val);
    }
  }
  return out;
}

WindowTokens HttpProvider::embed(const WindowContext& ctx) {
  const std::size_t W = ctx.values.size();
  try {
    std::vector<num::Tensor> cells;
    cells.reserve(W);
    std::size_t total = 0;
    for (std::size_t w = 0; w < W; ++w) {
      const std::string prompt = render(options_.prompt_template, ctx, w);
      auto it = cache_.find(prompt);
      if (it == cache_.end()) it = cache_.emplace(prompt, http_embed(options_.endpoint, prompt, options_.request)).first;
      const num::Tensor& cell = it->second;
      if (!dim_) dim_ = cell.cols();
      if (cell.cols() != *dim_) {
        throw ProviderError(ProviderError::Kind::ragged, "embedding width changed from " + std::to_string(*dim_) +
                                                             " to " + std::to_string(cell.cols()));
      }
      total += cell.rows();
      cells.push_back(cell);
    }
    WindowTokens out{num::Tensor({total, *dim_}), {}};
    std::size_t row = 0;
    for (const auto& cell : cells) {
      std::copy(cell.data().begin(), cell.data().end(), out.rows.row_ptr(row));
      row += cell.rows();
      out.counts.push_back(cell.rows());
    }
    return out;
  } catch (const ProviderError& e) {
    if (!options_.fallback_to_stub) throw;
    if (dim_ && *dim_ != options_.stub_dim) {
      throw ProviderError(e.kind(), std::string(e.what()) + " (stub fallback width " +
                                        std::to_string(options_.stub_dim) + " differs from provider width " +
                                        std::to_string(*dim_) + ")");
    }
    dim_ = options_.stub_dim;
    warnings_.push_back("sensor " + std::to_string(ctx.sensor) + " window at " + std::to_string(ctx.start) +
                        ": falling back to stub embeddings (" + e.what() + ")");
    return stub_.embed(ctx);
  }
}

}  // namespace stproph::text
