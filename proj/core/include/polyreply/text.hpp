#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "polyreply/region.hpp"

namespace polyreply {

using TokenId = std::int32_t;
using Rng = std::mt19937_64;

struct ParallelPair;

/// Unicode NFC, lowercase, trimmed, interior whitespace collapsed to one space.
std::string normalize_text(std::string_view text);

/// Normalized word tokens. Whitespace and punctuation (including '_') are
/// boundaries and are dropped.
std::vector<std::string> split_words(std::string_view text);

/// Feature-hashing vocabulary. Ids below kNumSpecial are reserved.
struct Vocabulary {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kNumSpecial = 4;

  TokenId size = 30000;
  std::uint64_t hash_seed = 0;

  /// Pure function of (token, hash_seed, size); never returns a special id.
  TokenId id(std::string_view token) const;
};

struct TokenSequence {
  std::vector<TokenId> ids;
  LanguageTag lang;

  bool operator==(const TokenSequence&) const = default;
};

/// Sequence with exactly one kMask; ids[target_pos] restored to target_id gives the source.
struct MaskedSample {
  std::vector<TokenId> ids;
  TokenId target_id = Vocabulary::kUnk;
  std::size_t target_pos = 0;
  LanguageTag lang;

  std::vector<TokenId> reconstruct() const;
};

TokenSequence tokenize(std::string_view text, const LanguageTag& lang, std::size_t max_len,
                       const Vocabulary& vocab);

/// Replaces one uniformly chosen position with kMask. Throws InvalidArgument on empty input.
MaskedSample mask_single(const TokenSequence& seq, Rng& rng);

/// tokens(source) + [SEP] + tokens(target), sides truncated proportionally to fit
/// max_len, then one non-SEP position masked.
MaskedSample make_tlm_sample(const ParallelPair& pair, const Vocabulary& vocab, std::size_t max_len,
                             Rng& rng);

MaskedSample make_mlm_sample(std::string_view text, const LanguageTag& lang,
                             const Vocabulary& vocab, std::size_t max_len, Rng& rng);

inline const LanguageTag kUnknownLanguage = "unknown";

/// Character-trigram frequency profile of one language.
struct LanguageProfile {
  std::unordered_map<std::string, double> frequency;
  double norm = 0.0;
};

struct LanguageGuess {
  LanguageTag lang;
  double confidence = 0.0;
};

class LanguageProfiles {
 public:
  LanguageProfiles() = default;

  static LanguageProfiles build(const std::map<LanguageTag, std::vector<std::string>>& samples);
  static LanguageProfiles load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// Highest cosine similarity profile. Empty text yields (kUnknownLanguage, 0).
  LanguageGuess identify(std::string_view text) const;

  bool supports(const LanguageTag& lang) const { return profiles_.contains(lang); }
  std::vector<LanguageTag> languages() const;
  bool empty() const { return profiles_.empty(); }

 private:
  std::map<LanguageTag, LanguageProfile> profiles_;
};

/// Relative trigram frequencies of the normalized, space-padded text.
std::unordered_map<std::string, double> trigram_profile(std::string_view text);

inline LanguageGuess identify_language(std::string_view text, const LanguageProfiles& profiles) {
  return profiles.identify(text);
}

}  // namespace polyreply
