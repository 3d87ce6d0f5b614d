#include "polyreply/responses.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "container.hpp"
#include "io_util.hpp"
#include "polyreply/error.hpp"

namespace polyreply {

ResponseSet::ResponseSet(LanguageTag lang, std::vector<ResponseEntry> entries,
                         std::uint64_t total_count)
    : lang_(std::move(lang)), entries_(std::move(entries)), total_count_(total_count) {
  rebuild_index();
}

void ResponseSet::rebuild_index() {
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!index_.emplace(normalize_text(entries_[i].text), i).second) {
      throw InvalidArgument("duplicate response '" + entries_[i].text + "' in " + lang_ + " set");
    }
  }
}

std::optional<std::size_t> ResponseSet::find(std::string_view reply) const {
  if (auto it = index_.find(normalize_text(reply)); it != index_.end()) return it->second;
  return std::nullopt;
}

void ResponseSet::set_vectors(Matrix<float> vectors) {
  if (vectors.rows() != static_cast<Eigen::Index>(entries_.size())) {
    throw InvalidArgument("vector rows do not match response count");
  }
  vectors_ = std::move(vectors);
}

RowVector<double> ResponseSet::penalties() const {
  RowVector<double> out(static_cast<Eigen::Index>(entries_.size()));
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    out(static_cast<Eigen::Index>(i)) = entries_[i].lm_penalty;
  }
  return out;
}

void ResponseSet::save(const std::filesystem::path& stem) const {
  std::ostringstream out;
  for (const auto& e : entries_) {
    out << nlohmann::json{{"text", e.text}, {"lang", e.lang}, {"count", e.count},
                          {"lm_penalty", e.lm_penalty}}
               .dump()
        << '\n';
  }
  std::filesystem::path jsonl = stem;
  jsonl += ".jsonl";
  detail::write_file_atomic(jsonl, out.str());
  if (has_vectors()) {
    std::filesystem::path vec = stem;
    vec += ".vec";
    detail::ContainerTensor tensor{"vectors", vectors_.rows(), vectors_.cols(), true, {}};
    tensor.data.assign(vectors_.data(), vectors_.data() + vectors_.size());
    detail::write_container(vec, "response_vectors",
                            {{"lang", lang_}, {"total_count", total_count_}}, {tensor});
  }
}

ResponseSet ResponseSet::load(const std::filesystem::path& stem) {
  std::filesystem::path jsonl = stem;
  jsonl += ".jsonl";
  std::ifstream in(jsonl);
  if (!in) throw DataError("cannot read response set " + jsonl.string());
  std::vector<ResponseEntry> entries;
  std::uint64_t total = 0;
  LanguageTag lang;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ResponseEntry e{j.at("text").get<std::string>(), j.at("lang").get<std::string>(),
                      j.at("count").get<std::uint64_t>(), j.at("lm_penalty").get<double>()};
      if (!lang.empty() && e.lang != lang) throw DataError("mixed languages in " + jsonl.string());
      lang = e.lang;
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed response entry in " + jsonl.string() + ": " + e.what());
    }
  }
  std::filesystem::path vec = stem;
  vec += ".vec";
  Matrix<float> vectors;
  if (std::filesystem::exists(vec)) {
    auto container = detail::read_container(vec, "response_vectors");
    total = container.meta.at("total_count").get<std::uint64_t>();
    if (container.tensors.size() != 1) throw DataError("vector container must hold one tensor");
    const auto& t = container.tensors.front();
    if (t.rows != static_cast<std::int64_t>(entries.size())) {
      throw DataError("vector rows do not match entries in " + vec.string());
    }
    vectors.resize(t.rows, t.cols);
    std::copy(t.data.begin(), t.data.end(), vectors.data());
    if (lang.empty()) lang = container.meta.at("lang").get<std::string>();
  } else {
    for (const auto& e : entries) total += e.count;
  }
  ResponseSet set(lang, std::move(entries), total);
  if (vectors.rows() > 0) set.set_vectors(std::move(vectors));
  return set;
}

ResponseSet mine_responses(const RegionShard& shard, const LanguageTag& lang, std::size_t cap,
                           std::uint64_t min_count) {
  std::map<std::string, std::uint64_t> counts;
  std::uint64_t total = 0;
  for (const auto& pair : shard.pairs) {
    if (pair.lang != lang) continue;
    const std::string text = normalize_text(pair.reply);
    if (text.empty()) continue;
    ++counts[text];
    ++total;
  }
  if (total == 0) throw DataError("shard has no " + lang + " replies");

  std::vector<std::pair<std::string, std::uint64_t>> ranked;
  for (const auto& [text, count] : counts) {
    if (count >= min_count) ranked.emplace_back(text, count);
  }
  if (ranked.empty()) {
    throw DataError("no " + lang + " reply occurs at least " + std::to_string(min_count) + " times");
  }
  // counts is a std::map, so a stable sort by count keeps ties in lexicographic order.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > cap) ranked.resize(cap);

  std::vector<ResponseEntry> entries;
  entries.reserve(ranked.size());
  for (const auto& [text, count] : ranked) {
    entries.push_back({text, lang, count,
                       std::log(static_cast<double>(count) / static_cast<double>(total))});
  }
  return ResponseSet(lang, std::move(entries), total);
}

ResponseSet transcreate(const ResponseSet& source, const PseudoLexicon& lexicon,
                        const LanguageTag& target_lang) {
  if (source.lang() != lexicon.source_lang || target_lang != lexicon.target_lang) {
    throw InvalidArgument("lexicon " + lexicon.source_lang + "->" + lexicon.target_lang +
                          " cannot trans-create " + source.lang() + "->" + target_lang);
  }
  std::vector<ResponseEntry> entries;
  std::set<std::string> seen;
  for (const auto& e : source.entries()) {
    ResponseEntry out{lexicon.translate_text(e.text), target_lang, e.count, e.lm_penalty};
    // Two sources can collide under explicit lexicon entries; the higher-ranked one wins.
    if (seen.insert(normalize_text(out.text)).second) entries.push_back(std::move(out));
  }
  return ResponseSet(target_lang, std::move(entries), source.total_count());
}

ResponseSet apply_curation(const ResponseSet& set,
                           const std::map<std::string, std::string>& overlay) {
  std::vector<ResponseEntry> entries = set.entries();
  for (auto& e : entries) {
    if (auto it = overlay.find(normalize_text(e.text)); it != overlay.end()) e.text = it->second;
  }
  return ResponseSet(set.lang(), std::move(entries), set.total_count());
}

ResponseSet precompute_vectors(const Encoder<float>& encoder, const ResponseSet& set) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(set.size());
  const Vocabulary vocab = encoder.config().vocabulary();
  const auto max_len = static_cast<std::size_t>(encoder.config().max_reply_len);
  for (const auto& e : set.entries()) seqs.push_back(tokenize(e.text, set.lang(), max_len, vocab));
  ResponseSet out = set;
  if (!seqs.empty()) out.set_vectors(encode_batch(encoder, std::span<const TokenSequence>(seqs)));
  return out;
}

}  // namespace polyreply
