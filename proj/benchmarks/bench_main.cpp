#include <benchmark/benchmark.h>

#include "polyreply/inference.hpp"
#include "polyreply/objectives.hpp"

using namespace polyreply;

namespace {

ModelConfig desk_config() {
  ModelConfig c;
  c.vocab_size = 8192;
  c.embed_dim = 128;
  c.hidden_dim = 128;
  c.encoder_layers = 2;
  c.adapter_dim = 16;
  c.adapter_placement = AdapterPlacement::kInput;
  c.max_msg_len = 96;
  c.max_reply_len = 64;
  return c;
}

std::vector<TokenSequence> messages(const Encoder<float>& enc, std::size_t n) {
  const Vocabulary vocab = enc.config().vocabulary();
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(tokenize("are we still on for lunch at noon " + std::to_string(i), "en", 96, vocab));
  }
  return out;
}

void BM_EncodeBatch(benchmark::State& state) {
  Rng rng(1);
  const auto enc = Encoder<float>::random(desk_config(), rng);
  const auto batch = messages(enc, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(encode_batch(enc, std::span<const TokenSequence>(batch)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_EncodeBatch)->Arg(1)->Arg(64);

void BM_SymmetricLoss(benchmark::State& state) {
  const auto n = state.range(0);
  Rng rng(2);
  std::normal_distribution<double> d(0.0, 3.0);
  Matrix<double> s(n, n);
  for (Eigen::Index k = 0; k < s.size(); ++k) s.data()[k] = d(rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(symmetric_loss(s));
    benchmark::DoNotOptimize(symmetric_loss_gradient(s));
  }
}
BENCHMARK(BM_SymmetricLoss)->Arg(64)->Arg(256);

void BM_TrainingStep(benchmark::State& state) {
  Rng rng(3);
  const auto enc = Encoder<float>::random(desk_config(), rng);
  SrBatch batch;
  batch.messages = messages(enc, 64);
  batch.replies = messages(enc, 64);
  for (auto _ : state) benchmark::DoNotOptimize(gradients(enc, batch));
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

void BM_ScoreAll(benchmark::State& state) {
  Rng rng(4);
  const auto enc = Encoder<float>::random(desk_config(), rng);
  std::vector<ResponseEntry> entries;
  for (int i = 0; i < state.range(0); ++i) entries.push_back({"reply " + std::to_string(i), "en", 1, -1.0});
  const auto set = precompute_vectors(enc, ResponseSet("en", entries, entries.size()));
  const auto msg = messages(enc, 1).front();
  for (auto _ : state) {
    const auto scores = score_all(enc, msg, set, 0.2);
    benchmark::DoNotOptimize(rank_by_score(scores));
  }
}
BENCHMARK(BM_ScoreAll)->Arg(200)->Arg(2000);

}  // namespace

BENCHMARK_MAIN();
