#include <benchmark/benchmark.h>

#include "ketlab/model.hpp"

using namespace ketlab;

namespace {

model::ModelConfig bench_config() {
  model::ModelConfig c;
  c.n_layers = 12;
  c.d_model = 64;
  c.n_heads = 4;
  c.d_ff = 256;
  c.vocab_size = 1024;
  c.max_seq_len = 32;
  c.seed = 7;
  return c;
}

std::vector<int> tokens_of(int len, int vocab, uint64_t seed) {
  numerics::Rng rng(seed);
  std::vector<int> t(len);
  for (int& x : t) x = static_cast<int>(rng.below(vocab));
  return t;
}

void BM_forward(benchmark::State& state) {
  auto m = model::TransformerLM::init(bench_config());
  auto tokens = tokens_of(static_cast<int>(state.range(0)), m.config.vocab_size, 3);
  for (auto _ : state) {
    auto fwd = model::forward(m, tokens);
    benchmark::DoNotOptimize(fwd.logits.data.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_forward)->Arg(8)->Arg(32);

void BM_loss_and_grads(benchmark::State& state) {
  auto m = model::TransformerLM::init(bench_config());
  std::vector<model::LmExample> batch;
  for (int b = 0; b < 16; ++b) {
    model::LmExample ex;
    ex.tokens = tokens_of(10, m.config.vocab_size, 100 + b);
    ex.loss_mask.assign(ex.tokens.size(), 1.0f);
    ex.loss_mask[0] = 0.0f;
    batch.push_back(std::move(ex));
  }
  auto mask = model::FreezeMask::all(m, true);
  for (auto _ : state) {
    auto [loss, grads] = model::loss_and_grads(m, batch, mask);
    benchmark::DoNotOptimize(loss);
    benchmark::DoNotOptimize(grads.grads.data());
  }
  state.SetItemsProcessed(state.iterations() * 16 * 10);
}
BENCHMARK(BM_loss_and_grads);

void BM_greedy_decode(benchmark::State& state) {
  auto m = model::TransformerLM::init(bench_config());
  auto prompt = tokens_of(5, m.config.vocab_size, 9);
  for (auto _ : state) {
    auto out = model::greedy_decode(m, prompt, 5);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_greedy_decode);

}  // namespace
