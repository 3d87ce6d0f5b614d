#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "polyreply/error.hpp"
#include "polyreply/synth.hpp"
#include "test_support.hpp"

namespace polyreply {
namespace {

SynthConfig small() {
  SynthConfig c;
  c.intents = 6;
  c.train_pairs_per_language = 40;
  c.test_pairs_per_language = 20;
  c.parallel_pairs_per_language = 30;
  c.monolingual_per_language = 10;
  c.profile_texts_per_language = 10;
  return c;
}

std::map<std::string, std::string> tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = testing::read_file(e.path());
  }
  return out;
}

std::vector<std::string> spaced(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

TEST(Synth, LanguageInventory) {
  const auto world = generate_synth(small());
  std::map<Region, int> per_region;
  for (const auto& l : world.languages) {
    ++per_region[l.region];
    EXPECT_EQ(l.low_resource, l.region == Region::kLRL);
  }
  EXPECT_EQ(per_region[Region::kEUR], 3);
  EXPECT_EQ(per_region[Region::kNAM], 3);
  EXPECT_EQ(per_region[Region::kLRL], 2);
  EXPECT_TRUE(world.train.count(shard_key(Region::kLRL, "en")));
  EXPECT_EQ(world.train.at(shard_key(Region::kNAM, "qd")).pairs.size(), 40u);
  EXPECT_EQ(world.test.at(shard_key(Region::kLRL, "zz")).pairs.size(), 20u);
}

TEST(Synth, PivotIsAddedToNam) {
  SynthConfig c = small();
  c.nam_languages = {"qd"};
  const auto world = generate_synth(c);
  EXPECT_TRUE(world.train.count(shard_key(Region::kNAM, "en")));
}

TEST(Synth, SameSeedWritesIdenticalFiles) {
  testing::TempDir dir;
  write_synth(generate_synth(small()), dir / "a");
  write_synth(generate_synth(small()), dir / "b");
  SynthConfig other = small();
  other.seed = 8;
  write_synth(generate_synth(other), dir / "c");
  const auto a = tree(dir / "a");
  EXPECT_EQ(a, tree(dir / "b"));
  EXPECT_NE(a, tree(dir / "c"));
  EXPECT_TRUE(a.count("NAM/en.train.jsonl"));
  EXPECT_TRUE(a.count("public/tlm_zz.jsonl"));
  EXPECT_TRUE(a.count("lexicons/en-zz.json"));
  EXPECT_TRUE(a.count("synth.json"));
}

TEST(Synth, WrittenShardsLoadInTheirRegion) {
  testing::TempDir dir;
  const auto world = generate_synth(small());
  write_synth(world, dir.path());
  const auto shard = load_shard(dir / "EUR/qb.train.jsonl", Region::kEUR);
  EXPECT_EQ(shard.pairs, world.train.at(shard_key(Region::kEUR, "qb")).pairs);
  EXPECT_FALSE(shard.info.public_auxiliary);
  EXPECT_THROW(load_shard(dir / "EUR/qb.train.jsonl", Region::kNAM), RegionViolation);
  EXPECT_TRUE(read_shard_header(dir / "public/mlm_qb.jsonl").public_auxiliary);
}

TEST(Synth, PublicFlagsOnlyOnAuxiliaryCorpora) {
  const auto world = generate_synth(small());
  for (const auto& [k, s] : world.train) EXPECT_FALSE(s.info.public_auxiliary) << k;
  for (const auto& [k, s] : world.test) EXPECT_FALSE(s.info.public_auxiliary) << k;
  for (const auto& [k, c] : world.parallel) EXPECT_TRUE(c.info.public_auxiliary) << k;
  for (const auto& [k, c] : world.monolingual) EXPECT_TRUE(c.info.public_auxiliary) << k;
  EXPECT_FALSE(world.parallel.count("en"));
}

TEST(Synth, LowResourceTextInvertsToPivot) {
  const auto world = generate_synth(small());
  for (const LanguageTag lang : {"zz", "zy"}) {
    const auto& lex = world.lexicons.at(lang);
    for (const auto& p : world.parallel.at(lang).pairs) {
      const auto src = spaced(p.source_text);
      const auto tgt = spaced(p.target_text);
      ASSERT_EQ(src.size(), tgt.size()) << p.source_text << " | " << p.target_text;
      for (std::size_t i = 0; i < src.size(); ++i) EXPECT_EQ(lex.invert_word(tgt[i]), src[i]);
    }
    for (const auto& p : world.train.at(shard_key(Region::kLRL, lang)).pairs) {
      EXPECT_EQ(p.lang, lang);
      for (const auto& w : spaced(p.reply)) {
        const auto back = lex.invert_word(w);
        ASSERT_TRUE(back.has_value()) << w;
      }
    }
  }
}

TEST(Synth, RejectsBadConfig) {
  SynthConfig c = small();
  c.intents = 0;
  EXPECT_THROW(generate_synth(c), InvalidArgument);
  c = small();
  c.cognate_rate = 1.5;
  EXPECT_THROW(generate_synth(c), InvalidArgument);
}

}  // namespace
}  // namespace polyreply
