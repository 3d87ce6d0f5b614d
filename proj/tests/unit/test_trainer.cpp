#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include "polyreply/error.hpp"
#include "polyreply/synth.hpp"
#include "polyreply/trainer.hpp"
#include "test_support.hpp"

namespace polyreply {
namespace {

ModelConfig small_model() {
  ModelConfig c = testing::tiny_config();
  c.vocab_size = 512;
  c.embed_dim = 16;
  c.hidden_dim = 16;
  c.adapter_dim = 4;
  return c;
}

SynthConfig small_world() {
  SynthConfig c;
  c.intents = 6;
  c.keywords_per_intent = 3;
  c.filler_words = 10;
  c.replies_per_intent = 2;
  c.reply_vocabulary = 12;
  c.train_pairs_per_language = 60;
  c.test_pairs_per_language = 20;
  c.parallel_pairs_per_language = 40;
  c.monolingual_per_language = 40;
  c.profile_texts_per_language = 20;
  return c;
}

const SynthWorld& world() {
  static const SynthWorld w = generate_synth(small_world());
  return w;
}

Checkpoint initial(std::uint64_t seed = 1) {
  Rng rng(seed);
  Checkpoint ck;
  ck.encoder = Encoder<float>::random(small_model(), rng);
  return ck;
}

StageConfig stage(const std::string& name, Region region, std::vector<LanguageTag> langs) {
  StageConfig c;
  c.name = name;
  c.region = region;
  c.sr_languages = std::move(langs);
  c.auxiliary = AuxiliaryTask::kNone;
  c.peak_lr = 1e-2;
  c.epochs = 2;
  c.batch_size = 16;
  c.seed = 5;
  return c;
}

StageData data_for(Region region, const std::vector<LanguageTag>& langs, bool tlm = false) {
  StageData d;
  for (const auto& l : langs) {
    d.shards.push_back(world().train.at(shard_key(region, l)));
    if (tlm && world().parallel.contains(l)) d.parallel.push_back(world().parallel.at(l));
  }
  return d;
}

// ---- configuration ----

TEST(StageConfigTest, ParsesAuxiliaryTasks) {
  EXPECT_EQ(parse_auxiliary_task("tlm"), AuxiliaryTask::kTLM);
  EXPECT_EQ(parse_auxiliary_task("mlm"), AuxiliaryTask::kMLM);
  EXPECT_EQ(parse_auxiliary_task("none"), AuxiliaryTask::kNone);
  EXPECT_EQ(parse_auxiliary_task("off"), AuxiliaryTask::kNone);
  EXPECT_THROW(parse_auxiliary_task("xlm"), InvalidArgument);
}

TEST(StageConfigTest, RejectsInvalidValues) {
  auto c = stage("s", Region::kEUR, {"qa"});
  EXPECT_NO_THROW(c.validate());
  c.task_proportion = 1.5;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = stage("s", Region::kEUR, {"qa"});
  c.epochs = -1;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = stage("s", Region::kEUR, {"qa"});
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = stage("s", Region::kEUR, {"qa"});
  c.use_adapters = true;
  c.freeze = FreezeSelector::kEmbedding;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

// ---- optimizer ----

TEST(Adam, HandComputedFirstStep) {
  Rng rng(1);
  auto enc = Encoder<double>::random(small_model(), rng);
  const std::size_t target = enc.output_bias_index();
  for (std::size_t i = 0; i < enc.tensors().size(); ++i) enc.tensors()[i].frozen = i != target;
  const double before = enc.tensors()[target].value(0, 0);
  GradientSet<double> g(enc);
  g.at(target).setOnes();
  AdamHyperparams hyper;
  hyper.weight_decay = 0.0;
  AdamState<double> state(enc, hyper);
  adam_step(enc, g, state, 0.1);
  // m_hat = g, v_hat = g^2, so the step is lr * 1 / (1 + eps).
  EXPECT_NEAR(enc.tensors()[target].value(0, 0) - before, -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, DecoupledWeightDecay) {
  Rng rng(1);
  auto enc = Encoder<double>::random(small_model(), rng);
  const std::size_t target = enc.output_bias_index();
  for (std::size_t i = 0; i < enc.tensors().size(); ++i) enc.tensors()[i].frozen = i != target;
  enc.tensors()[target].value.setConstant(2.0);
  GradientSet<double> g(enc);
  AdamHyperparams hyper;
  hyper.weight_decay = 0.01;
  AdamState<double> state(enc, hyper);
  adam_step(enc, g, state, 0.1);
  EXPECT_NEAR(enc.tensors()[target].value(0, 3), 2.0 - 0.1 * 0.01 * 2.0, 1e-15);
}

TEST(Adam, ZeroGradientWithoutDecayLeavesParameters) {
  Rng rng(2);
  auto enc = Encoder<float>::random(small_model(), rng);
  const auto copy = enc;
  AdamHyperparams hyper;
  hyper.weight_decay = 0.0;
  AdamState<float> state(enc, hyper);
  GradientSet<float> g(enc);
  for (int i = 0; i < 3; ++i) adam_step(enc, g, state, 0.1);
  EXPECT_TRUE(tensors_bit_identical(enc, copy));
  EXPECT_EQ(state.step, 3);
}

TEST(Adam, FrozenEmbeddingSurvivesManySteps) {
  Rng rng(3);
  auto enc = Encoder<float>::random(small_model(), rng);
  freeze(enc, FreezeSelector::kEmbedding);
  const Matrix<float> embedding = enc.tensors()[0].value;
  AdamState<float> state(enc, AdamHyperparams{});
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (int step = 0; step < 100; ++step) {
    GradientSet<float> g(enc);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g.has(i)) continue;
      for (Eigen::Index k = 0; k < g.at(i).size(); ++k) g.at(i).data()[k] = n(rng);
    }
    adam_step(enc, g, state, 0.01);
  }
  EXPECT_EQ(0, std::memcmp(embedding.data(), enc.tensors()[0].value.data(),
                           sizeof(float) * static_cast<std::size_t>(embedding.size())));
}

TEST(Adam, RejectsGradientsForFrozenTensors) {
  Rng rng(3);
  auto enc = Encoder<float>::random(small_model(), rng);
  GradientSet<float> full(enc);
  freeze(enc, FreezeSelector::kEmbedding);
  AdamState<float> state(enc, AdamHyperparams{});
  EXPECT_THROW(adam_step(enc, full, state, 0.1), InvalidArgument);
}

// ---- schedules ----

TEST(LearningRate, WarmupThenLinearDecay) {
  const std::int64_t total = 100;
  const double peak = 5e-4;
  std::vector<double> lr;
  for (std::int64_t s = 0; s < total; ++s) lr.push_back(learning_rate(s, total, peak, 0.1));
  EXPECT_DOUBLE_EQ(*std::max_element(lr.begin(), lr.end()), peak);
  EXPECT_DOUBLE_EQ(lr[9], peak);
  EXPECT_DOUBLE_EQ(lr[0], peak / 10);
  EXPECT_EQ(lr.back(), 0.0);
  // Single peak: non-decreasing up to it, non-increasing afterwards.
  const auto top = std::max_element(lr.begin(), lr.end()) - lr.begin();
  for (std::int64_t s = 1; s <= top; ++s) EXPECT_GE(lr[s], lr[s - 1]);
  for (std::int64_t s = top + 1; s < total; ++s) EXPECT_LE(lr[s], lr[s - 1]);
  for (double v : lr) EXPECT_GE(v, 0.0);
  // Piecewise linear: constant differences inside each piece.
  for (std::int64_t s = 11; s < total; ++s) {
    EXPECT_NEAR(lr[s] - lr[s - 1], lr[11] - lr[10], 1e-18);
  }
}

TEST(LearningRate, NoWarmupStartsAtPeak) {
  EXPECT_DOUBLE_EQ(learning_rate(0, 10, 1.0, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(0, 1, 1.0, 0.1), 1.0);
  EXPECT_THROW(learning_rate(10, 10, 1.0, 0.1), InvalidArgument);
}

TEST(BatchScheduleTest, HalfProportionAlternates) {
  const auto s = batch_schedule(5, 0.5);
  ASSERT_EQ(s.size(), 10u);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s[i], i % 2 == 0 ? BatchKind::kAuxiliary : BatchKind::kSR) << i;
  }
}

TEST(BatchScheduleTest, AuxiliaryCountIsRoundedProportion) {
  for (std::size_t sr = 1; sr <= 40; ++sr) {
    for (double p : {0.1, 0.25, 0.3, 0.5, 0.6, 0.75, 0.9}) {
      const auto s = batch_schedule(sr, p);
      const auto aux = static_cast<std::size_t>(std::count(s.begin(), s.end(), BatchKind::kAuxiliary));
      EXPECT_EQ(s.size() - aux, sr);
      EXPECT_EQ(aux, static_cast<std::size_t>(std::llround(p * static_cast<double>(s.size()))))
          << "sr=" << sr << " p=" << p;
    }
  }
  EXPECT_EQ(batch_schedule(4, 0.0), std::vector<BatchKind>(4, BatchKind::kSR));
  EXPECT_EQ(batch_schedule(4, 1.0), std::vector<BatchKind>(4, BatchKind::kAuxiliary));
}

// ---- stages ----

TEST(TrainStage, ZeroEpochsReturnsInputWithProvenance) {
  const auto in = initial();
  auto cfg = stage("EUR", Region::kEUR, {"qa"});
  cfg.epochs = 0;
  const auto r = train_stage(in, cfg, data_for(Region::kEUR, {"qa"}));
  EXPECT_TRUE(tensors_bit_identical(r.checkpoint.encoder, in.encoder));
  EXPECT_EQ(r.checkpoint.provenance, std::vector<std::string>{"EUR"});
  EXPECT_EQ(r.report.selected_epoch, -1);
}

TEST(TrainStage, ScheduleGivesFiveAndFive) {
  auto cfg = stage("EUR", Region::kEUR, {"qa"});
  cfg.auxiliary = AuxiliaryTask::kTLM;
  cfg.validation_fraction = 0.0;
  cfg.batch_size = 12;  // 60 pairs -> 5 SR batches
  const auto r = train_stage(initial(), cfg, data_for(Region::kEUR, {"qa"}, true));
  ASSERT_EQ(r.report.epochs.size(), 2u);
  for (const auto& e : r.report.epochs) {
    EXPECT_EQ(e.sr_batches, 5u);
    EXPECT_EQ(e.auxiliary_batches, 5u);
  }
}

TEST(TrainStage, EmbeddingFreezeKeepsTableAndTrainsTheRest) {
  const auto in = initial();
  const auto r = train_stage(in, stage("EUR", Region::kEUR, {"qa", "qb"}),
                             data_for(Region::kEUR, {"qa", "qb"}));
  const auto& a = in.encoder.tensors()[0].value;
  const auto& b = r.checkpoint.encoder.tensors()[0].value;
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())));
  EXPECT_NE(in.encoder.tensors()[1].value, r.checkpoint.encoder.tensors()[1].value);
  EXPECT_GE(r.report.selected_epoch, 0);
}

TEST(TrainStage, ForeignShardIsRejectedBeforeTraining) {
  AccessLog log;
  StageOptions opts;
  opts.access_log = &log;
  StageData d = data_for(Region::kNAM, {"qd"});
  d.shards.push_back(world().train.at(shard_key(Region::kEUR, "qa")));
  EXPECT_THROW(train_stage(initial(), stage("NAM", Region::kNAM, {"qd"}), d, opts), RegionViolation);
  EXPECT_EQ(log.violations(), 1u);
}

TEST(TrainStage, PublicCorporaArePermittedEverywhere) {
  AccessLog log;
  StageOptions opts;
  opts.access_log = &log;
  auto cfg = stage("LRL", Region::kLRL, {"zz"});
  cfg.auxiliary = AuxiliaryTask::kMLM;
  cfg.epochs = 1;
  StageData d = data_for(Region::kLRL, {"zz"});
  d.monolingual.push_back(world().monolingual.at("qa"));
  d.monolingual.push_back(world().monolingual.at("en"));
  ASSERT_NE(d.monolingual[0].info.region, Region::kLRL);
  EXPECT_NO_THROW(train_stage(initial(), cfg, d, opts));
  EXPECT_EQ(log.violations(), 0u);
  EXPECT_EQ(log.records().size(), 3u);
}

TEST(TrainStage, EveryBatchSourceIsLogged) {
  testing::TempDir dir;
  StageData d;
  for (const auto& l : {"qd", "qe"}) {
    const auto path = dir / (std::string(l) + ".jsonl");
    write_shard(path, world().train.at(shard_key(Region::kNAM, l)));
    d.shards.push_back(load_shard(path, Region::kNAM));
  }
  write_parallel_corpus(dir / "tlm.jsonl", world().parallel.at("qd"));
  d.parallel.push_back(load_parallel_corpus(dir / "tlm.jsonl"));
  auto cfg = stage("NAM", Region::kNAM, {"qd", "qe"});
  cfg.auxiliary = AuxiliaryTask::kTLM;
  const auto r = train_stage(initial(), cfg, d);
  std::set<std::string> logged;
  for (const auto& rec : r.report.access_log) {
    EXPECT_EQ(rec.decision, Access::kPermit);
    logged.insert(rec.shard_path);
  }
  ASSERT_FALSE(r.report.batches_per_source.empty());
  for (const auto& [source, count] : r.report.batches_per_source) {
    EXPECT_TRUE(logged.contains(source)) << source;
    EXPECT_GT(count, 0u);
  }
  EXPECT_EQ(r.report.batches_per_source.size(), 3u);
}

TEST(TrainStage, IsDeterministic) {
  auto cfg = stage("NAM", Region::kNAM, {"en", "qd"});
  cfg.auxiliary = AuxiliaryTask::kTLM;
  const auto d = data_for(Region::kNAM, {"en", "qd"}, true);
  const auto a = train_stage(initial(), cfg, d);
  const auto b = train_stage(initial(), cfg, d);
  EXPECT_TRUE(tensors_bit_identical(a.checkpoint.encoder, b.checkpoint.encoder));
  EXPECT_EQ(a.report.to_json(), b.report.to_json());
  EXPECT_EQ(a.checkpoint.rng_state, b.checkpoint.rng_state);
  cfg.seed = 6;
  const auto c = train_stage(initial(), cfg, d);
  EXPECT_FALSE(tensors_bit_identical(a.checkpoint.encoder, c.checkpoint.encoder));
}

TEST(TrainStage, EpochCheckpointHoldsSelectedWeights) {
  testing::TempDir dir;
  StageOptions opts;
  opts.epoch_checkpoint = dir / "ckpt" / "stage.ckpt";
  auto cfg = stage("EUR", Region::kEUR, {"qa"});
  cfg.epochs = 3;
  const auto r = train_stage(initial(), cfg, data_for(Region::kEUR, {"qa"}), opts);
  const auto saved = load_checkpoint(*opts.epoch_checkpoint);
  EXPECT_TRUE(tensors_bit_identical(saved.encoder, r.checkpoint.encoder));
  EXPECT_EQ(saved.provenance, r.checkpoint.provenance);
}

TEST(TrainStage, SelectsLowestValidationEpoch) {
  auto cfg = stage("EUR", Region::kEUR, {"qa"});
  cfg.epochs = 4;
  cfg.validation_fraction = 0.2;
  const auto r = train_stage(initial(), cfg, data_for(Region::kEUR, {"qa"}));
  ASSERT_GE(r.report.selected_epoch, 0);
  const double chosen = r.report.epochs[static_cast<std::size_t>(r.report.selected_epoch)].validation_total;
  for (const auto& e : r.report.epochs) EXPECT_GE(e.validation_total, chosen);
}

TEST(TrainStage, NonFiniteWeightsAreReported) {
  auto in = initial();
  in.encoder.tensors()[in.encoder.output_weight_index()].value(0, 0) = std::nanf("");
  EXPECT_THROW(train_stage(in, stage("EUR", Region::kEUR, {"qa"}), data_for(Region::kEUR, {"qa"})),
               NumericalError);
}

TEST(TrainStage, AdapterModeOnlyMovesAdapters) {
  auto cfg = stage("LRL", Region::kLRL, {"zz", "zy"});
  cfg.use_adapters = true;
  cfg.freeze = FreezeSelector::kAllExceptAdapters;
  const auto in = initial();
  const auto r = train_stage(in, cfg, data_for(Region::kLRL, {"zz", "zy"}));
  const auto& out = r.checkpoint.encoder;
  ASSERT_EQ(out.adapters().size(), 2u);
  for (std::size_t i = 0; i < out.base_tensor_count(); ++i) {
    const auto& a = in.encoder.tensors()[i].value;
    const auto& b = out.tensors()[i].value;
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())))
        << out.tensors()[i].name;
  }
}

TEST(Replay, ProvenanceAndNoAuxiliary) {
  auto cfg = stage("replay", Region::kEUR, {"qa"});
  cfg.auxiliary = AuxiliaryTask::kTLM;
  auto in = initial();
  in.provenance = {"EUR", "NAM"};
  const auto r = replay_stage(in, cfg, data_for(Region::kEUR, {"qa"}));
  EXPECT_EQ(r.checkpoint.provenance, (std::vector<std::string>{"EUR", "NAM", "+EUR"}));
  for (const auto& e : r.report.epochs) EXPECT_EQ(e.auxiliary_batches, 0u);
}

TEST(Replay, EmptyShardChangesNothing) {
  StageData d;
  RegionShard empty;
  empty.info.region = Region::kEUR;
  empty.info.languages = {"qa"};
  d.shards.push_back(empty);
  const auto in = initial();
  const auto r = replay_stage(in, stage("replay", Region::kEUR, {"qa"}), d);
  auto expected = in.encoder;
  expected.freeze(FreezeSelector::kEmbedding);
  EXPECT_TRUE(tensors_bit_identical(r.checkpoint.encoder, expected));
}

// ---- pipeline ----

std::vector<StageConfig> three_stages() {
  auto eur = stage("EUR", Region::kEUR, {"qa", "qb"});
  auto nam = stage("NAM", Region::kNAM, {"qd", "en"});
  auto lrl = stage("LRL", Region::kLRL, {"zz", "en"});
  eur.epochs = nam.epochs = lrl.epochs = 1;
  return {eur, nam, lrl};
}

TEST(Pipeline, ProvenanceFollowsStages) {
  AccessLog log;
  PipelineOptions opts;
  opts.access_log = &log;
  const auto r = run_pipeline(initial(), three_stages(),
                              [](const StageConfig& s) { return data_for(s.region, s.sr_languages); },
                              opts);
  EXPECT_FALSE(r.failure);
  EXPECT_EQ(r.checkpoint.provenance, (std::vector<std::string>{"EUR", "NAM", "LRL"}));
  EXPECT_EQ(r.stage_checkpoints.size(), 3u);
  EXPECT_EQ(r.reports.size(), 3u);
  EXPECT_EQ(log.violations(), 0u);
  EXPECT_EQ(log.records().size(), 6u);
}

TEST(Pipeline, FailureKeepsPartialProvenance) {
  const auto r = run_pipeline(initial(), three_stages(), [](const StageConfig& s) {
    if (s.region == Region::kNAM) return data_for(Region::kEUR, {"qa"});
    return data_for(s.region, s.sr_languages);
  });
  ASSERT_TRUE(r.failure);
  EXPECT_THROW(std::rethrow_exception(r.failure), RegionViolation);
  EXPECT_EQ(r.checkpoint.provenance, std::vector<std::string>{"EUR"});
  EXPECT_EQ(r.stage_checkpoints.size(), 1u);
}

TEST(Pipeline, ValidationRules) {
  PipelineOptions opts;
  auto stages = three_stages();
  EXPECT_NO_THROW(validate_pipeline(stages, opts));
  std::swap(stages[0], stages[1]);
  EXPECT_THROW(validate_pipeline(stages, opts), InvalidArgument);
  stages = three_stages();
  stages[1].sr_languages = {"qd"};
  EXPECT_THROW(validate_pipeline(stages, opts), InvalidArgument);
  stages = three_stages();
  stages[2].name = "EUR";
  EXPECT_THROW(validate_pipeline(stages, opts), InvalidArgument);
  EXPECT_THROW(validate_pipeline({}, opts), InvalidArgument);
}

}  // namespace
}  // namespace polyreply
