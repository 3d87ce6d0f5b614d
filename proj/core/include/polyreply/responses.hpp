#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "polyreply/corpus.hpp"
#include "polyreply/model.hpp"

namespace polyreply {

struct ResponseEntry {
  std::string text;
  LanguageTag lang;
  std::uint64_t count = 0;
  /// log(count / total) when mined; copied from the source entry when trans-created.
  double lm_penalty = 0.0;

  bool operator==(const ResponseEntry&) const = default;
};

/// Fixed per-language candidate pool. Entry texts are unique after normalization.
class ResponseSet {
 public:
  ResponseSet() = default;
  ResponseSet(LanguageTag lang, std::vector<ResponseEntry> entries, std::uint64_t total_count);

  const LanguageTag& lang() const { return lang_; }
  const std::vector<ResponseEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::uint64_t total_count() const { return total_count_; }

  /// Index of the entry whose normalized text equals normalize_text(reply).
  std::optional<std::size_t> find(std::string_view reply) const;
  bool contains(std::string_view reply) const { return find(reply).has_value(); }

  /// Rows are entry encodings; empty until precompute_vectors has run.
  const Matrix<float>& vectors() const { return vectors_; }
  bool has_vectors() const { return vectors_.rows() == static_cast<Eigen::Index>(entries_.size()) && !entries_.empty(); }
  void set_vectors(Matrix<float> vectors);

  RowVector<double> penalties() const;

  /// `<stem>.jsonl` entries plus `<stem>.vec` vector container when vectors exist.
  void save(const std::filesystem::path& stem) const;
  static ResponseSet load(const std::filesystem::path& stem);

 private:
  void rebuild_index();

  LanguageTag lang_;
  std::vector<ResponseEntry> entries_;
  std::uint64_t total_count_ = 0;
  std::unordered_map<std::string, std::size_t> index_;
  Matrix<float> vectors_;
};

/// Top `cap` normalized replies of `lang` with count >= min_count, ordered by count
/// descending then text ascending. Throws DataError when nothing qualifies.
ResponseSet mine_responses(const RegionShard& shard, const LanguageTag& lang, std::size_t cap,
                           std::uint64_t min_count);

/// Word-level translation of every entry; penalties and counts are inherited.
ResponseSet transcreate(const ResponseSet& source, const PseudoLexicon& lexicon,
                        const LanguageTag& target_lang);

/// Replaces entry texts through `overlay` (original normalized text -> curated text),
/// keeping counts and penalties.
ResponseSet apply_curation(const ResponseSet& set,
                           const std::map<std::string, std::string>& overlay);

/// Encodes every entry's reply tokens under the set's language.
ResponseSet precompute_vectors(const Encoder<float>& encoder, const ResponseSet& set);

}  // namespace polyreply
