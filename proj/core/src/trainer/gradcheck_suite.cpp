// SPDX-License-Identifier: Apache-2.0
#include "stproph/trainer/gradcheck_suite.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <map>

#include "stproph/attention/gq_mha.hpp"
#include "stproph/error.hpp"
#include "stproph/fusion/fusion_head.hpp"
#include "stproph/numerics/grad_check.hpp"
#include "stproph/numerics/ops.hpp"
#include "stproph/numerics/rng.hpp"
#include "stproph/prompt/prompt_pool.hpp"
#include "stproph/text/text_embed.hpp"
#include "stproph/trainer/model.hpp"

namespace stproph::trainer {

namespace {

using num::Parameter;
using num::Rng;
using num::Shape;
using num::Tape;
using num::Tensor;
using num::Var;

Tensor random(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// sum(out * weights), recorded as a harness node so the reduction itself
/// does not go through any registered op.
Var probe(Var out, const Tensor& weights) {
  Tape& t = *out.tape;
  const Tensor& v = t.value(out);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * weights[i];
  return t.record(Tensor({1, 1}, {s}), "probe", t.requires_grad(out), [&t, out, weights](const Tensor& g) {
    Tensor d(weights.shape());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[0] * weights[i];
    t.accumulate(out, d, "probe");
  });
}

/// Inputs of one op check, owned as parameters so grad_check can perturb them.
struct Inputs {
  std::deque<Parameter> params;
  Var operator()(Tape& tape, std::size_t i) { return tape.param(params[i]); }
  void add(const std::string& name, Tensor value) { params.emplace_back(name, std::move(value)); }
  num::ParameterList list() {
    num::ParameterList out;
    for (auto& p : params) out.push_back(&p);
    return out;
  }
};

using Builder = std::function<Var(Tape&, Inputs&)>;

struct OpCase {
  std::function<void(Inputs&, Rng&)> setup;
  Builder build;
};

std::map<std::string, OpCase> make_cases(Rng& rng) {
  std::map<std::string, OpCase> c;
  const auto two = [](Shape a, Shape b) {
    return [a, b](Inputs& in, Rng& r) {
      in.add("a", random(r, a));
      in.add("b", random(r, b));
    };
  };
  const auto one = [](Shape a) { return [a](Inputs& in, Rng& r) { in.add("a", random(r, a)); }; };

  c["matmul"] = {two({3, 4}, {4, 2}), [](Tape& t, Inputs& in) { return num::matmul(in(t, 0), in(t, 1)); }};
  c["add"] = {two({3, 4}, {3, 4}), [](Tape& t, Inputs& in) { return num::add(in(t, 0), in(t, 1)); }};
  c["sub"] = {two({3, 4}, {3, 4}), [](Tape& t, Inputs& in) { return num::sub(in(t, 0), in(t, 1)); }};
  c["mul"] = {two({3, 4}, {3, 4}), [](Tape& t, Inputs& in) { return num::mul(in(t, 0), in(t, 1)); }};
  c["scale"] = {one({3, 4}), [](Tape& t, Inputs& in) { return num::scale(in(t, 0), -0.7); }};
  c["add_scalar"] = {one({3, 4}), [](Tape& t, Inputs& in) { return num::add_scalar(in(t, 0), 0.3); }};
  c["add_row"] = {two({3, 4}, {1, 4}), [](Tape& t, Inputs& in) { return num::add_row(in(t, 0), in(t, 1)); }};
  c["tanh"] = {one({3, 5}), [](Tape& t, Inputs& in) { return num::tanh(in(t, 0)); }};
  c["softplus"] = {[](Inputs& in, Rng& r) { in.add("a", random(r, {3, 5}, -3.0, 3.0)); },
                   [](Tape& t, Inputs& in) { return num::softplus(in(t, 0)); }};
  c["softmax"] = {[](Inputs& in, Rng& r) { in.add("a", random(r, {3, 5}, -2.0, 2.0)); },
                  [](Tape& t, Inputs& in) { return num::softmax_rows(in(t, 0)); }};
  c["concat_cols"] = {two({3, 2}, {3, 3}),
                      [](Tape& t, Inputs& in) { return num::concat_cols({in(t, 0), in(t, 1)}); }};
  c["gather_rows"] = {one({4, 3}),
                      [](Tape& t, Inputs& in) { return num::gather_rows(in(t, 0), {2, 0, 2, 3, 1}); }};
  c["take_cols"] = {one({3, 5}),
                    [](Tape& t, Inputs& in) { return num::take_cols(in(t, 0), {4, 0, 1, 1, 3, 2}, 2); }};
  c["slice_cols"] = {one({3, 5}), [](Tape& t, Inputs& in) { return num::slice_cols(in(t, 0), 1, 3); }};
  c["reshape"] = {one({3, 4}), [](Tape& t, Inputs& in) { return num::reshape(in(t, 0), {2, 6}); }};
  c["sum"] = {one({3, 4}), [](Tape& t, Inputs& in) { return num::sum(in(t, 0)); }};
  c["mean"] = {one({3, 4}), [](Tape& t, Inputs& in) { return num::mean(in(t, 0)); }};

  Tensor mask({3, 4});
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < 0.3 ? 0.0 : 1.0 / 0.7;
  c["dropout"] = {one({3, 4}), [mask](Tape& t, Inputs& in) { return num::dropout_with_mask(in(t, 0), mask); }};

  c["segment_attention"] = {[](Inputs& in, Rng& r) {
                              in.add("q", random(r, {6, 4}));
                              in.add("k", random(r, {6, 4}));
                              in.add("v", random(r, {6, 3}));
                            },
                            [](Tape& t, Inputs& in) {
                              return attn::segment_attention(in(t, 0), in(t, 1), in(t, 2), 3, 0.5);
                            }};
  c["additive_score"] = {[](Inputs& in, Rng& r) {
                           in.add("query", random(r, {6, 4}));
                           in.add("keys", random(r, {4, 4}));
                           in.add("wv", random(r, {1, 4}));
                         },
                         [](Tape& t, Inputs& in) { return prompt::additive_score(in(t, 0), in(t, 1), in(t, 2), 3); }};
  c["prompt_concat"] = {[](Inputs& in, Rng& r) {
                          in.add("values", random(r, {12, 2}));
                          in.add("gates", random(r, {2, 2}, 0.5, 1.5));
                          in.add("query", random(r, {6, 2}));
                        },
                        [](Tape& t, Inputs& in) {
                          return prompt::prompt_concat(in(t, 0), in(t, 1), in(t, 2), {3, 1, 0, 3}, 2, 3);
                        }};
  c["attention_pool"] = {[](Inputs& in, Rng& r) {
                           in.add("tokens", random(r, {6, 3}));
                           in.add("u", random(r, {1, 3}));
                         },
                         [](Tape& t, Inputs& in) { return text::attention_pool(in(t, 0), in(t, 1), {0, 2, 5, 6}); }};

  // Residuals are kept at least 0.5 away from the kink of |r|.
  Tensor offsets({3, 4});
  for (auto& v : offsets.storage()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + 0.5 * rng.uniform());
  const Tensor mae_y = random(rng, {3, 4});
  c["mae"] = {[offsets, mae_y](Inputs& in, Rng&) {
                Tensor mu = mae_y;
                for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += offsets[i];
                in.add("mu", std::move(mu));
              },
              [mae_y](Tape& t, Inputs& in) { return fusion::mae_loss(in(t, 0), mae_y); }};
  const Tensor y = random(rng, {3, 4});
  c["gaussian_nll"] = {[](Inputs& in, Rng& r) {
                         in.add("mu", random(r, {3, 4}));
                         in.add("sigma2", random(r, {3, 4}, 0.5, 2.0));
                       },
                       [y](Tape& t, Inputs& in) { return fusion::gaussian_nll(in(t, 0), in(t, 1), y); }};
  return c;
}

}  // namespace

const std::vector<std::string>& registered_ops() {
  static const std::vector<std::string> ops{
      "add",       "add_row",     "add_scalar", "additive_score", "attention_pool",    "concat_cols",
      "dropout",   "gather_rows", "gaussian_nll", "mae",          "matmul",            "mean",
      "mul",       "prompt_concat", "reshape",  "scale",          "segment_attention", "slice_cols",
      "softmax",   "softplus",    "sub",        "sum",            "take_cols",         "tanh"};
  return ops;
}

GradCheckEntry check_op(const std::string& op, std::uint64_t seed) {
  Rng rng = Rng(seed).split("gradcheck").split(op);
  auto cases = make_cases(rng);
  auto it = cases.find(op);
  if (it == cases.end()) throw ConfigError("gradcheck: no check registered for op '" + op + "'");
  Inputs in;
  it->second.setup(in, rng);
  Tensor weights;
  {
    Tape probe_tape;
    weights = random(rng, probe_tape.value(it->second.build(probe_tape, in)).shape());
  }
  const Builder& build = it->second.build;
  const auto r = num::grad_check([&](Tape& t) { return probe(build(t, in), weights); }, in.list());
  return {op, r.max_rel_error, kOpTolerance, r.worst_param};
}

std::vector<GradCheckEntry> check_all_ops(std::uint64_t seed) {
  std::vector<GradCheckEntry> out;
  for (const auto& op : registered_ops()) out.push_back(check_op(op, seed));
  return out;
}

std::vector<GradCheckEntry> check_model(std::uint64_t seed) {
  std::vector<GradCheckEntry> out;
  for (Variant variant : {Variant::point, Variant::uncertainty}) {
    ModelConfig c;
    c.sensors = 3;
    c.window = 4;
    c.horizon = 3;
    c.d = 8;
    c.pool_size = 4;
    c.top_k = 2;
    c.groups = 2;
    c.heads = 2;
    c.fusion_heads = 2;
    c.d_text = 6;
    c.variant = variant;
    Model model(c, seed);

    Rng rng = Rng(seed).split("gradcheck").split("model");
    const std::size_t B = 2, cells = B * c.sensors * c.window;
    Batch batch;
    batch.samples = B;
    batch.features = random(rng, {cells, 2});
    for (std::size_t r = 0; r < cells; ++r) batch.features(r, 1) = rng.uniform() < 0.2 ? 0.0 : 1.0;
    batch.text_offsets.push_back(0);
    for (std::size_t r = 0; r < cells; ++r) batch.text_offsets.push_back(batch.text_offsets.back() + 1 + r % 3);
    batch.text_rows = random(rng, {batch.text_offsets.back(), c.d_text});
    batch.target = random(rng, {B * c.sensors, c.horizon});

    prompt::Selection selection;
    Tensor w_mu, w_sigma;
    {
      Tape tape;
      Prediction p = model.forward(tape, batch, nullptr, &selection);
      w_mu = random(rng, tape.value(p.mu).shape());
      if (p.sigma2) w_sigma = random(rng, tape.value(*p.sigma2).shape());
    }
    const auto loss = [&](Tape& t) {
      Prediction p = model.forward(t, batch, &selection);
      Var l = probe(p.mu, w_mu);
      if (p.sigma2) l = num::add(l, probe(*p.sigma2, w_sigma));
      return l;
    };
    const auto r = num::grad_check(loss, model.parameters(), 1e-3);
    out.push_back({"model." + to_string(variant), r.max_rel_error, kModelTolerance, r.worst_param});
  }
  return out;
}

}  // namespace stproph::trainer
