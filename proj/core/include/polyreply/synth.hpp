#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "polyreply/corpus.hpp"

namespace polyreply {

/// Synthetic multilingual message-reply world. Every language renders a shared concept
/// vocabulary; the pivot renders it verbatim, other high-resource languages keep a
/// fraction of cognates ("word_<lang>") and replace the rest, and low-resource
/// languages are pseudo-translations of the pivot.
struct SynthConfig {
  std::uint64_t seed = 7;
  LanguageTag pivot = "en";
  std::vector<LanguageTag> eur_languages{"qa", "qb", "qc"};
  /// The pivot is added to NAM automatically when absent.
  std::vector<LanguageTag> nam_languages{"en", "qd", "qe"};
  std::vector<LanguageTag> lrl_languages{"zz", "zy"};

  std::size_t intents = 24;
  std::size_t keywords_per_intent = 4;
  std::size_t filler_words = 40;
  std::size_t replies_per_intent = 3;
  std::size_t reply_vocabulary = 48;
  /// Probability a message carries one keyword from a different intent.
  double noise_keyword_rate = 0.3;

  std::size_t train_pairs_per_language = 900;
  std::size_t test_pairs_per_language = 300;
  /// Fraction of words a high-resource language shares as "word_<lang>" cognates.
  double cognate_rate = 0.5;
  /// Fraction of pivot words given an explicit low-resource lexicon entry.
  double lexicon_entry_rate = 0.5;

  std::size_t parallel_pairs_per_language = 600;
  std::size_t monolingual_per_language = 600;
  std::size_t profile_texts_per_language = 300;
};

struct SynthLanguage {
  LanguageTag lang;
  Region region = Region::kEUR;
  bool low_resource = false;
};

struct SynthWorld {
  SynthConfig config;
  std::vector<SynthLanguage> languages;
  /// Keyed by "<REGION>/<lang>".
  std::map<std::string, RegionShard> train;
  std::map<std::string, RegionShard> test;
  std::map<LanguageTag, PseudoLexicon> lexicons;
  std::map<LanguageTag, ParallelCorpus> parallel;
  std::map<LanguageTag, MonolingualCorpus> monolingual;
  std::map<LanguageTag, MonolingualCorpus> profile_texts;
};

SynthWorld generate_synth(const SynthConfig& config);

/// Layout:
///   <root>/<REGION>/<lang>.train.jsonl, <lang>.test.jsonl
///   <root>/public/tlm_<lang>.jsonl, mlm_<lang>.jsonl, lid_<lang>.jsonl
///   <root>/lexicons/<pivot>-<lang>.json
///   <root>/synth.json
void write_synth(const SynthWorld& world, const std::filesystem::path& root);

std::string shard_key(Region region, const LanguageTag& lang);

}  // namespace polyreply
