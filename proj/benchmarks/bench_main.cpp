#include <benchmark/benchmark.h>

#include "micromoe/evaluate.hpp"
#include "micromoe/metrics.hpp"
#include "micromoe/model.hpp"
#include "micromoe/rng.hpp"
#include "micromoe/synthdata.hpp"

namespace micromoe {
namespace {

ModelConfig bench_config(bool moe) {
  ModelConfig cfg;
  cfg.transformer.d_model = 64;
  cfg.transformer.n_layers = 4;
  cfg.transformer.n_heads = 4;
  cfg.transformer.ffn_hidden = 128;
  cfg.transformer.vocab_size = 512;
  cfg.transformer.max_seq = 64;
  if (moe) cfg.transformer.moe_layers = {1, 3};
  return cfg;
}

Sequence bench_sequence() {
  auto corpus = generate_corpus(1, {{"tune", 4}});
  Vocabulary vocab = corpus_vocabulary();
  return sequence_from_record(corpus.records[0], vocab, 16,
                              SequenceStyle::kInstruct);
}

void BM_DenseForward(benchmark::State& state) {
  Model model(bench_config(false), 1);
  Sequence seq = bench_sequence();
  for (auto _ : state) benchmark::DoNotOptimize(model.lm_forward(seq));
}
BENCHMARK(BM_DenseForward);

void BM_MoeForward(benchmark::State& state) {
  Model model(bench_config(true), 1);
  Sequence seq = bench_sequence();
  for (auto _ : state) benchmark::DoNotOptimize(model.lm_forward(seq));
}
BENCHMARK(BM_MoeForward);

void BM_ForwardBackwardStep(benchmark::State& state) {
  Model model(bench_config(true), 1);
  model.params().set_phase_masks({"lm.*", "projector.*"}, {"vision.*", "router.*"});
  Sequence seq = bench_sequence();
  for (auto _ : state) {
    model.params().zero_grads();
    Graph g;
    auto [nll, n] = model.build_nll_sum(g, seq);
    g.backward(nll);
    benchmark::DoNotOptimize(n);
  }
}
BENCHMARK(BM_ForwardBackwardStep);

void BM_GateDecisions(benchmark::State& state) {
  RngStream rng(7);
  std::vector<std::vector<double>> logits(256, std::vector<double>(8));
  for (auto& row : logits)
    for (double& x : row) x = rng.next_normal();
  for (auto _ : state)
    for (const auto& row : logits) benchmark::DoNotOptimize(gate(row, 2));
}
BENCHMARK(BM_GateDecisions);

void BM_Bleu(benchmark::State& state) {
  for (auto _ : state)
    benchmark::DoNotOptimize(
        bleu("one round lesion in the upper left region",
             "a ct scan with one round lesion in the upper left region"));
}
BENCHMARK(BM_Bleu);

}  // namespace
}  // namespace micromoe

BENCHMARK_MAIN();
