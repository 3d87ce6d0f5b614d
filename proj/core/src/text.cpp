#include "polyreply/text.hpp"

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "polyreply/corpus.hpp"
#include "polyreply/error.hpp"

namespace polyreply {
namespace {

icu::UnicodeString nfc_lower(std::string_view text) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(status);
  icu::UnicodeString source = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString normalized = nfc->normalize(source, status);
  if (U_FAILURE(status)) {
    throw InvalidArgument("text is not valid Unicode");
  }
  normalized.toLower(icu::Locale::getRoot());
  return normalized;
}

bool is_boundary(UChar32 c) { return u_isUWhiteSpace(c) || u_ispunct(c); }

std::string to_utf8(const icu::UnicodeString& s) {
  std::string out;
  s.toUTF8String(out);
  return out;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::string normalize_text(std::string_view text) {
  const icu::UnicodeString s = nfc_lower(text);
  icu::UnicodeString out;
  bool pending_space = false;
  for (int32_t i = 0; i < s.length(); i = s.moveIndex32(i, 1)) {
    const UChar32 c = s.char32At(i);
    if (u_isUWhiteSpace(c)) {
      pending_space = !out.isEmpty();
      continue;
    }
    if (pending_space) out.append(static_cast<UChar>(u' '));
    pending_space = false;
    out.append(c);
  }
  return to_utf8(out);
}

std::vector<std::string> split_words(std::string_view text) {
  const icu::UnicodeString s = nfc_lower(text);
  std::vector<std::string> words;
  icu::UnicodeString current;
  for (int32_t i = 0; i < s.length(); i = s.moveIndex32(i, 1)) {
    const UChar32 c = s.char32At(i);
    if (is_boundary(c)) {
      if (!current.isEmpty()) {
        words.push_back(to_utf8(current));
        current.remove();
      }
    } else {
      current.append(c);
    }
  }
  if (!current.isEmpty()) words.push_back(to_utf8(current));
  return words;
}

TokenId Vocabulary::id(std::string_view token) const {
  if (size <= kNumSpecial) {
    throw InvalidArgument("vocabulary size must exceed the special ids");
  }
  // FNV-1a over the token, keyed and finalized with the seed.
  std::uint64_t h = 0xcbf29ce484222325ULL ^ splitmix(hash_seed);
  for (const char c : token) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  h = splitmix(h);
  const auto buckets = static_cast<std::uint64_t>(size - kNumSpecial);
  return kNumSpecial + static_cast<TokenId>(h % buckets);
}

std::vector<TokenId> MaskedSample::reconstruct() const {
  std::vector<TokenId> out = ids;
  out.at(target_pos) = target_id;
  return out;
}

TokenSequence tokenize(std::string_view text, const LanguageTag& lang, std::size_t max_len,
                       const Vocabulary& vocab) {
  if (max_len < 1) throw InvalidArgument("max_len must be >= 1");
  TokenSequence seq;
  seq.lang = lang;
  for (const std::string& word : split_words(text)) {
    if (seq.ids.size() == max_len) break;
    seq.ids.push_back(vocab.id(word));
  }
  return seq;
}

MaskedSample mask_single(const TokenSequence& seq, Rng& rng) {
  if (seq.ids.empty()) throw InvalidArgument("cannot mask an empty sequence");
  std::uniform_int_distribution<std::size_t> pick(0, seq.ids.size() - 1);
  MaskedSample sample;
  sample.ids = seq.ids;
  sample.lang = seq.lang;
  sample.target_pos = pick(rng);
  sample.target_id = sample.ids[sample.target_pos];
  sample.ids[sample.target_pos] = Vocabulary::kMask;
  return sample;
}

MaskedSample make_tlm_sample(const ParallelPair& pair, const Vocabulary& vocab, std::size_t max_len,
                             Rng& rng) {
  if (max_len < 3) throw InvalidArgument("TLM samples need max_len >= 3");
  const std::size_t unbounded = static_cast<std::size_t>(-1);
  TokenSequence source = tokenize(pair.source_text, pair.source_lang, unbounded, vocab);
  TokenSequence target = tokenize(pair.target_text, pair.target_lang, unbounded, vocab);
  if (source.ids.empty() || target.ids.empty()) {
    throw InvalidArgument("TLM pair needs non-empty source and target");
  }
  const std::size_t budget = max_len - 1;
  if (source.ids.size() + target.ids.size() > budget) {
    const double total = static_cast<double>(source.ids.size() + target.ids.size());
    auto keep_source = static_cast<std::size_t>(
        std::lround(static_cast<double>(budget) * static_cast<double>(source.ids.size()) / total));
    keep_source = std::clamp<std::size_t>(keep_source, 1, budget - 1);
    const std::size_t keep_target = budget - keep_source;
    source.ids.resize(std::min(source.ids.size(), keep_source));
    target.ids.resize(std::min(target.ids.size(), keep_target));
  }
  MaskedSample sample;
  sample.lang = pair.target_lang;
  sample.ids = source.ids;
  sample.ids.push_back(Vocabulary::kSep);
  sample.ids.insert(sample.ids.end(), target.ids.begin(), target.ids.end());

  // Every position except the separator is a candidate.
  const std::size_t sep = source.ids.size();
  std::uniform_int_distribution<std::size_t> pick(0, sample.ids.size() - 2);
  std::size_t pos = pick(rng);
  if (pos >= sep) ++pos;
  sample.target_pos = pos;
  sample.target_id = sample.ids[pos];
  sample.ids[pos] = Vocabulary::kMask;
  return sample;
}

MaskedSample make_mlm_sample(std::string_view text, const LanguageTag& lang,
                             const Vocabulary& vocab, std::size_t max_len, Rng& rng) {
  return mask_single(tokenize(text, lang, max_len, vocab), rng);
}

std::unordered_map<std::string, double> trigram_profile(std::string_view text) {
  std::unordered_map<std::string, double> counts;
  const std::string normalized = normalize_text(text);
  if (normalized.empty()) return counts;
  const icu::UnicodeString padded = icu::UnicodeString::fromUTF8(" " + normalized + " ");
  std::vector<UChar32> points;
  for (int32_t i = 0; i < padded.length(); i = padded.moveIndex32(i, 1)) {
    points.push_back(padded.char32At(i));
  }
  double total = 0.0;
  for (std::size_t i = 0; i + 3 <= points.size(); ++i) {
    icu::UnicodeString gram;
    gram.append(points[i]).append(points[i + 1]).append(points[i + 2]);
    counts[to_utf8(gram)] += 1.0;
    total += 1.0;
  }
  for (auto& [gram, value] : counts) value /= total;
  return counts;
}

namespace {

LanguageProfile finish_profile(std::unordered_map<std::string, double> frequency) {
  LanguageProfile profile;
  double sq = 0.0;
  for (const auto& [gram, value] : frequency) sq += value * value;
  profile.frequency = std::move(frequency);
  profile.norm = std::sqrt(sq);
  return profile;
}

}  // namespace

LanguageProfiles LanguageProfiles::build(
    const std::map<LanguageTag, std::vector<std::string>>& samples) {
  LanguageProfiles out;
  for (const auto& [lang, texts] : samples) {
    std::unordered_map<std::string, double> counts;
    double total = 0.0;
    for (const std::string& text : texts) {
      // Length-weighted, so the profile approximates the pooled corpus frequency.
      const auto grams = trigram_profile(text);
      double n = 0.0;
      const std::string normalized = normalize_text(text);
      if (!normalized.empty()) n = static_cast<double>(normalized.size());
      for (const auto& [gram, freq] : grams) counts[gram] += freq * n;
      total += n;
    }
    if (total == 0.0) {
      throw InvalidArgument("language '" + lang + "' has no profile text");
    }
    for (auto& [gram, value] : counts) value /= total;
    out.profiles_.emplace(lang, finish_profile(std::move(counts)));
  }
  return out;
}

LanguageGuess LanguageProfiles::identify(std::string_view text) const {
  const auto grams = trigram_profile(text);
  if (grams.empty() || profiles_.empty()) return {kUnknownLanguage, 0.0};
  double text_sq = 0.0;
  for (const auto& [gram, value] : grams) text_sq += value * value;
  const double text_norm = std::sqrt(text_sq);

  LanguageGuess best{kUnknownLanguage, 0.0};
  for (const auto& [lang, profile] : profiles_) {
    double dot = 0.0;
    for (const auto& [gram, value] : grams) {
      if (auto it = profile.frequency.find(gram); it != profile.frequency.end()) {
        dot += value * it->second;
      }
    }
    const double denom = text_norm * profile.norm;
    const double cosine = denom > 0.0 ? dot / denom : 0.0;
    if (cosine > best.confidence) best = {lang, cosine};
  }
  best.confidence = std::clamp(best.confidence, 0.0, 1.0);
  return best;
}

std::vector<LanguageTag> LanguageProfiles::languages() const {
  std::vector<LanguageTag> out;
  for (const auto& [lang, profile] : profiles_) out.push_back(lang);
  return out;
}

void LanguageProfiles::save(const std::filesystem::path& path) const {
  nlohmann::json root = nlohmann::json::object();
  for (const auto& [lang, profile] : profiles_) {
    // Sorted keys keep the file byte-stable.
    std::map<std::string, double> sorted(profile.frequency.begin(), profile.frequency.end());
    root[lang] = sorted;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write language profiles to " + path.string());
  out << root.dump(1) << '\n';
}

LanguageProfiles LanguageProfiles::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read language profiles from " + path.string());
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed language profiles " + path.string() + ": " + e.what());
  }
  LanguageProfiles out;
  for (const auto& [lang, grams] : root.items()) {
    std::unordered_map<std::string, double> frequency;
    for (const auto& [gram, value] : grams.items()) frequency[gram] = value.get<double>();
    out.profiles_.emplace(lang, finish_profile(std::move(frequency)));
  }
  return out;
}

}  // namespace polyreply
