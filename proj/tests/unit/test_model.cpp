#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <vector>

#include "polyreply/error.hpp"
#include "polyreply/model.hpp"
#include "test_support.hpp"

namespace polyreply {
namespace {

using testing::tiny_config;

TokenSequence seq(std::vector<TokenId> ids, LanguageTag lang = "en") { return {std::move(ids), std::move(lang)}; }

std::vector<TokenSequence> random_batch(Rng& rng, const ModelConfig& cfg, std::size_t n,
                                        const LanguageTag& lang) {
  std::uniform_int_distribution<TokenId> id(Vocabulary::kNumSpecial, cfg.vocab_size - 1);
  std::uniform_int_distribution<int> len(1, 8);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s{{}, lang};
    for (int k = len(rng); k > 0; --k) s.ids.push_back(id(rng));
    out.push_back(s);
  }
  return out;
}

TEST(ModelConfigTest, RejectsBadDimensions) {
  ModelConfig c = tiny_config();
  c.adapter_dim = c.hidden_dim;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_config(AdapterPlacement::kInput);
  c.embed_dim = 2;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = tiny_config();
  c.encoder_layers = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_NO_THROW(tiny_config().validate());
}

TEST(ModelConfigTest, PlacementNamesRoundTrip) {
  for (auto p : {AdapterPlacement::kInput, AdapterPlacement::kOutput}) {
    EXPECT_EQ(parse_adapter_placement(to_string(p)), p);
  }
  EXPECT_THROW(parse_adapter_placement("middle"), InvalidArgument);
}

TEST(Encode, ZeroWeightsPropagateBiases) {
  Encoder<double> enc(tiny_config());
  const auto& cfg = enc.config();
  auto& t = enc.tensors();
  Rng rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    for (Eigen::Index k = 0; k < cfg.hidden_dim; ++k) t[enc.layer_bias_index(l)].value(0, k) = n(rng);
  }
  for (Eigen::Index k = 0; k < cfg.hidden_dim; ++k) t[enc.output_bias_index()].value(0, k) = n(rng);
  const auto out = encode(enc, seq({5, 9, 11}));
  EXPECT_EQ(out, t[enc.output_bias_index()].value.row(0));
  EXPECT_EQ(out, encode(enc, seq({7})));
}

TEST(Encode, RowsDoNotDependOnBatchComposition) {
  Rng rng(4);
  const auto enc = Encoder<float>::random(tiny_config(), rng);
  const auto batch = random_batch(rng, enc.config(), 9, "en");
  const auto all = encode_batch(enc, std::span<const TokenSequence>(batch));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const RowVector<float> one = encode(enc, batch[i]);
    EXPECT_EQ(0, std::memcmp(one.data(), all.row(static_cast<Eigen::Index>(i)).eval().data(),
                             sizeof(float) * static_cast<std::size_t>(one.size())));
  }
}

TEST(Encode, RejectsOutOfRangeIds) {
  Rng rng(4);
  const auto enc = Encoder<float>::random(tiny_config(), rng);
  EXPECT_THROW(encode(enc, seq({enc.config().vocab_size})), InvalidArgument);
  EXPECT_THROW(encode(enc, seq({-1})), InvalidArgument);
}

class AdapterPlacementTest : public ::testing::TestWithParam<AdapterPlacement> {};

TEST_P(AdapterPlacementTest, InactiveLanguageIsBitIdentical) {
  Rng rng(5);
  const auto base = Encoder<float>::random(tiny_config(GetParam()), rng);
  auto with = base;
  with.install_adapters({"zz"}, rng);
  // Make the adapter large so gating, not smallness, is what keeps outputs equal.
  for (std::size_t i = with.base_tensor_count(); i < with.tensors().size(); ++i) {
    with.tensors()[i].value.setConstant(0.7f);
  }
  const auto batch = random_batch(rng, base.config(), 20, "en");
  const auto a = encode_batch(base, std::span<const TokenSequence>(batch));
  const auto b = encode_batch(with, std::span<const TokenSequence>(batch));
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())));

  const auto zz = random_batch(rng, base.config(), 5, "zz");
  EXPECT_NE(encode_batch(base, std::span<const TokenSequence>(zz)),
            encode_batch(with, std::span<const TokenSequence>(zz)));
}

TEST_P(AdapterPlacementTest, InitialAdapterIsNearIdentity) {
  Rng rng(6);
  ModelConfig cfg = tiny_config(GetParam());
  cfg.embed_dim = 32;
  cfg.hidden_dim = 32;
  cfg.adapter_dim = 8;
  cfg.vocab_size = 512;
  const auto base = Encoder<double>::random(cfg, rng);
  auto with = base;
  with.install_adapters({"zz"}, rng);
  const auto batch = random_batch(rng, cfg, 100, "zz");
  for (const auto& s : batch) {
    const RowVector<double> h0 = encode(base, s);
    const RowVector<double> h1 = encode(with, s);
    EXPECT_LT((h1 - h0).norm() / h0.norm(), 0.05);
  }
}

INSTANTIATE_TEST_SUITE_P(Placements, AdapterPlacementTest,
                         ::testing::Values(AdapterPlacement::kInput, AdapterPlacement::kOutput));

TEST(Adapters, OverheadMatchesClosedForm) {
  ModelConfig cfg = tiny_config();
  cfg.hidden_dim = 8;
  cfg.embed_dim = 8;
  cfg.adapter_dim = 2;
  Rng rng(1);
  auto enc = Encoder<float>::random(cfg, rng);
  EXPECT_EQ(adapter_overhead(enc), 0.0);
  const std::size_t base = 48 * 8 + 2 * (8 * 8 + 8) + (8 * 8 + 8) + (8 * 48 + 48);
  EXPECT_EQ(enc.base_parameter_count(), base);
  enc.install_adapters({"zz"}, rng);
  EXPECT_DOUBLE_EQ(adapter_overhead(enc), (2.0 * 8 * 2 + 2 + 8) / static_cast<double>(base));
  enc.install_adapters({"zz", "zy"}, rng);
  EXPECT_EQ(enc.adapter_parameter_count(), 2u * (2 * 8 * 2 + 2 + 8));
  EXPECT_EQ(enc.adapters().size(), 2u);
}

TEST(Freeze, Selectors) {
  Rng rng(1);
  auto enc = Encoder<float>::random(tiny_config(), rng);
  EXPECT_THROW(freeze(enc, FreezeSelector::kAllExceptAdapters), InvalidArgument);
  freeze(enc, FreezeSelector::kEmbedding);
  for (std::size_t i = 0; i < enc.tensors().size(); ++i) {
    EXPECT_EQ(enc.tensors()[i].frozen, i == Encoder<float>::embedding_index());
  }
  enc.install_adapters({"zz"}, rng);
  freeze(enc, FreezeSelector::kAllExceptAdapters);
  for (std::size_t i = 0; i < enc.tensors().size(); ++i) {
    EXPECT_EQ(enc.tensors()[i].frozen, !enc.is_adapter_tensor(i));
  }
  freeze(enc, FreezeSelector::kNone);
  for (const auto& t : enc.tensors()) EXPECT_FALSE(t.frozen);
  EXPECT_THROW(parse_freeze_selector("bogus"), InvalidArgument);
  EXPECT_EQ(parse_freeze_selector(to_string(FreezeSelector::kAllExceptAdapters)),
            FreezeSelector::kAllExceptAdapters);
}

TEST(GradientSetTest, SkipsFrozenTensors) {
  Rng rng(1);
  auto enc = Encoder<float>::random(tiny_config(), rng);
  freeze(enc, FreezeSelector::kEmbedding);
  GradientSet<float> g(enc);
  EXPECT_FALSE(g.has(Encoder<float>::embedding_index()));
  EXPECT_EQ(g.entry_count(), enc.tensors().size() - 1);
}

TEST(CheckpointTest, RoundTripIsBitExact) {
  testing::TempDir dir;
  Rng rng(8);
  Checkpoint ck;
  ck.encoder = Encoder<float>::random(tiny_config(AdapterPlacement::kInput), rng);
  ck.encoder.install_adapters({"zz", "zy"}, rng);
  freeze(ck.encoder, FreezeSelector::kAllExceptAdapters);
  ck.provenance = {"EUR", "NAM"};
  ck.rng_state = "12345 678";
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_TRUE(tensors_bit_identical(ck.encoder, back.encoder));
  EXPECT_EQ(back.provenance, ck.provenance);
  EXPECT_EQ(back.rng_state, ck.rng_state);
  EXPECT_EQ(back.config(), ck.config());
  EXPECT_TRUE(back.encoder.adapter("zy").has_value());

  const auto probe = random_batch(rng, ck.config(), 6, "zz");
  EXPECT_EQ(encode_batch(ck.encoder, std::span<const TokenSequence>(probe)),
            encode_batch(back.encoder, std::span<const TokenSequence>(probe)));
}

TEST(CheckpointTest, TruncatedFileIsDataError) {
  testing::TempDir dir;
  Rng rng(8);
  Checkpoint ck;
  ck.encoder = Encoder<float>::random(tiny_config(), rng);
  save_checkpoint(ck, dir / "a.ckpt");
  const std::string bytes = testing::read_file(dir / "a.ckpt");
  testing::write_file(dir / "cut.ckpt", bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(load_checkpoint(dir / "cut.ckpt"), DataError);
  std::string flipped = bytes;
  flipped[flipped.size() - 10] ^= 0x5a;
  testing::write_file(dir / "flip.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "flip.ckpt"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), DataError);
}

TEST(CheckpointTest, SaveLeavesNoTemporaryFiles) {
  testing::TempDir dir;
  Rng rng(8);
  Checkpoint ck;
  ck.encoder = Encoder<float>::random(tiny_config(), rng);
  save_checkpoint(ck, dir / "a.ckpt");
  save_checkpoint(ck, dir / "a.ckpt");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  EXPECT_EQ(files, 1u);
}

TEST(CastTest, DoubleCopyMatchesFloat) {
  Rng rng(2);
  const auto f = Encoder<float>::random(tiny_config(), rng);
  const auto d = f.cast<double>();
  const auto s = seq({4, 5, 6});
  EXPECT_LT((encode(f, s).cast<double>() - encode(d, s)).norm(), 1e-5);
}

}  // namespace
}  // namespace polyreply
