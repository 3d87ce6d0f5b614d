#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "polyreply/region.hpp"

namespace polyreply {

class ResponseSet;

struct MessageReplyPair {
  std::string message;
  std::string reply;
  LanguageTag lang;
  Region region = Region::kEUR;

  bool operator==(const MessageReplyPair&) const = default;
};

struct ParallelPair {
  std::string source_text;
  LanguageTag source_lang;
  std::string target_text;
  LanguageTag target_lang;
};

struct MonolingualText {
  std::string text;
  LanguageTag lang;
};

/// Header line of every corpus file plus load bookkeeping.
struct ShardInfo {
  Region region = Region::kEUR;
  std::set<LanguageTag> languages;
  /// Task-agnostic public data readable from every region. Only ever set from the header.
  bool public_auxiliary = false;
  std::filesystem::path origin_path;
  std::size_t malformed_count = 0;
};

/// Region-locked message-reply pairs. Immutable once loaded.
struct RegionShard {
  ShardInfo info;
  std::vector<MessageReplyPair> pairs;
};

struct ParallelCorpus {
  ShardInfo info;
  std::vector<ParallelPair> pairs;
};

struct MonolingualCorpus {
  ShardInfo info;
  std::vector<MonolingualText> texts;
};

/// Loads a JSON-lines shard. Malformed records are skipped and counted; a record or
/// header naming a region other than `expected_region` throws RegionViolation.
RegionShard load_shard(const std::filesystem::path& path, Region expected_region);
/// Header of a corpus file without reading its records.
ShardInfo read_shard_header(const std::filesystem::path& path);
ParallelCorpus load_parallel_corpus(const std::filesystem::path& path);
MonolingualCorpus load_monolingual_corpus(const std::filesystem::path& path);

void write_shard(const std::filesystem::path& path, const RegionShard& shard);
void write_parallel_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus);
void write_monolingual_corpus(const std::filesystem::path& path, const MonolingualCorpus& corpus);

/// Deterministic word-level stand-in for a translation system: explicit entries first,
/// then the suffix rule `word -> word + suffix`.
struct PseudoLexicon {
  LanguageTag source_lang;
  LanguageTag target_lang;
  std::map<std::string, std::string> entries;
  std::string suffix;
  bool fallback_enabled = true;

  /// Default lexicon for a target language: no entries, suffix "_<target>".
  static PseudoLexicon suffix_rule(LanguageTag source, LanguageTag target);
  static PseudoLexicon load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::string translate_word(const std::string& word) const;
  std::string translate_text(const std::string& text) const;
  /// Inverse mapping of translate_word; nullopt when `word` is not in the image.
  std::optional<std::string> invert_word(const std::string& word) const;
};

/// Translates message and reply word by word. The result is tagged target_lang / LRL.
MessageReplyPair pseudo_translate(const MessageReplyPair& pair, const PseudoLexicon& lexicon,
                                  const LanguageTag& target_lang);

struct ShardSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> heldout;
};

/// Seeded shuffle, then the first round(heldout_fraction * n) indices are held out.
ShardSplit split_shard(const RegionShard& shard, double heldout_fraction, std::uint64_t seed);

struct HoldoutSpec {
  std::uint64_t seed = 0;
  double heldout_fraction = 0.2;
};

struct EvalSets {
  std::vector<MessageReplyPair> golden;
  std::vector<MessageReplyPair> general;
  std::vector<std::size_t> golden_indices;
  std::vector<std::size_t> general_indices;
  /// Non-empty only when a holdout was requested.
  std::vector<std::size_t> training_indices;
  /// Set when fewer matching pairs exist than golden_fraction asks for.
  bool golden_shortfall = false;
};

/// Golden pairs have a reply that is a response-set entry; general pairs are the rest of
/// the evaluation pool. With a holdout, the pool is the held-out split only.
EvalSets build_eval_sets(const RegionShard& shard, const std::vector<ResponseSet>& responses,
                         double golden_fraction, std::optional<HoldoutSpec> holdout = {});

enum class Access { kPermit, kDeny };

/// Permit iff the shard lives in the stage region or is flagged public-auxiliary.
Access assert_region_access(Region stage_region, const ShardInfo& shard);

struct AccessRecord {
  std::string stage;
  Region stage_region = Region::kEUR;
  std::string shard_path;
  Region shard_region = Region::kEUR;
  bool public_auxiliary = false;
  Access decision = Access::kDeny;
};

/// Append-only record of every shard a stage consulted. Safe for concurrent writers.
class AccessLog {
 public:
  AccessLog() = default;
  AccessLog(const AccessLog& other);
  AccessLog& operator=(const AccessLog& other);

  void append(AccessRecord record);
  std::vector<AccessRecord> records() const;
  /// Records whose decision is kDeny.
  std::size_t violations() const;
  /// One line per record: `<stage> <stage_region> <decision> <shard_region> <public|private> <path>`.
  void write(const std::filesystem::path& path) const;
  std::string to_text() const;

 private:
  mutable std::mutex mutex_;
  std::vector<AccessRecord> records_;
};

}  // namespace polyreply
