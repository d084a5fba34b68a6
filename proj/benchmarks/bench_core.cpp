// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <memory>
#include <vector>

#include "stproph/attention/gq_mha.hpp"
#include "stproph/data/dataset.hpp"
#include "stproph/fusion/fusion_head.hpp"
#include "stproph/lora/adapter.hpp"
#include "stproph/numerics/ops.hpp"
#include "stproph/text/text_embed.hpp"
#include "stproph/trainer/model.hpp"
#include "stproph/trainer/pipeline.hpp"
#include "stproph/trainer/train.hpp"

namespace {

using namespace stproph;

num::Tensor random_tensor(std::size_t r, std::size_t c, num::Rng& rng) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return num::Tensor({r, c}, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  num::Rng rng(1);
  const num::Tensor a = random_tensor(n, n, rng), b = random_tensor(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(num::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_GQMHAAttend(benchmark::State& state) {
  const auto len = static_cast<std::size_t>(state.range(0));
  num::Rng rng(2);
  attn::GQMHAConfig config;
  config.d = 64;
  attn::GQMHABlock block("bench", config, rng);
  const num::Tensor seq = random_tensor(len, config.d, rng);
  for (auto _ : state) benchmark::DoNotOptimize(block.attend(seq));
}
BENCHMARK(BM_GQMHAAttend)->Arg(12)->Arg(48);

void BM_AdapterForward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  num::Rng rng(3);
  lora::AdapterLinear layer = lora::AdapterLinear::init(random_tensor(d, d, rng), 16, rng);
  const num::Tensor x = random_tensor(32, d, rng);
  for (auto _ : state) benchmark::DoNotOptimize(layer.forward(x));
}
BENCHMARK(BM_AdapterForward)->Arg(64)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  trainer::ModelConfig c;
  c.sensors = 4;
  c.d = 16;
  c.pool_size = 8;
  c.top_k = 2;
  c.groups = 2;
  c.heads = 2;
  c.fusion_heads = 2;
  c.d_text = 8;
  c.text_tokens = 4;
  trainer::Model model(c, 1);
  trainer::Session session(trainer::prepare(data::toy_sine(400, c.sensors), {}, c.window, c.horizon),
                           std::make_unique<text::StubProvider>(c.d_text, c.text_tokens, 1));
  std::vector<const data::WindowSample*> samples;
  for (std::size_t i = 0; i < 16; ++i) samples.push_back(&session.data().train[i]);
  const trainer::Batch batch = trainer::make_batch(samples, session.text());
  for (auto _ : state) {
    num::Tape tape;
    const trainer::Prediction p = model.forward(tape, batch);
    tape.backward(fusion::mae_loss(p.mu, batch.target, batch.target_mask));
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
