#include "polyreply/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "io_util.hpp"
#include "polyreply/error.hpp"
#include "polyreply/responses.hpp"
#include "polyreply/text.hpp"

namespace polyreply {
namespace {

using nlohmann::json;

struct RawFile {
  ShardInfo info;
  std::vector<json> records;
};

ShardInfo parse_header(const std::string& line, const std::filesystem::path& path) {
  try {
    const json header = json::parse(line);
    ShardInfo info;
    info.origin_path = path;
    info.region = parse_region(header.at("region").get<std::string>());
    for (const auto& lang : header.at("languages")) info.languages.insert(lang.get<std::string>());
    info.public_auxiliary = header.value("public_auxiliary", false);
    return info;
  } catch (const json::exception& e) {
    throw DataError("bad shard header in " + path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw DataError("bad shard header in " + path.string() + ": " + e.what());
  }
}

bool blank(const std::string& line) { return line.find_first_not_of(" \t\r") == std::string::npos; }

// Reads the header and every parseable record. Unparseable lines count as malformed.
RawFile read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus " + path.string());
  RawFile raw;
  raw.info.origin_path = path;
  std::string line;
  bool have_header = false;
  while (std::getline(in, line)) {
    if (blank(line)) continue;
    if (!have_header) {
      raw.info = parse_header(line, path);
      have_header = true;
      continue;
    }
    try {
      json record = json::parse(line);
      if (!record.is_object()) {
        ++raw.info.malformed_count;
        continue;
      }
      raw.records.push_back(std::move(record));
    } catch (const json::exception&) {
      ++raw.info.malformed_count;
    }
  }
  if (!have_header) throw DataError("corpus " + path.string() + " has no header line");
  return raw;
}

bool non_empty_text(const std::string& text) { return !normalize_text(text).empty(); }

json header_json(const ShardInfo& info) {
  return json{{"region", std::string(to_string(info.region))},
              {"languages", std::vector<std::string>(info.languages.begin(), info.languages.end())},
              {"public_auxiliary", info.public_auxiliary}};
}

std::optional<std::string> string_field(const json& record, const char* key) {
  auto it = record.find(key);
  if (it == record.end() || !it->is_string()) return std::nullopt;
  return it->get<std::string>();
}

}  // namespace

RegionShard load_shard(const std::filesystem::path& path, Region expected_region) {
  RawFile raw = read_jsonl(path);
  if (raw.info.region != expected_region) {
    throw RegionViolation("shard " + path.string() + " belongs to " +
                          std::string(to_string(raw.info.region)) + ", expected " +
                          std::string(to_string(expected_region)));
  }
  RegionShard shard;
  shard.info = raw.info;
  for (const json& record : raw.records) {
    const auto message = string_field(record, "message");
    const auto reply = string_field(record, "reply");
    const auto lang = string_field(record, "lang");
    const auto region_text = string_field(record, "region");
    if (!message || !reply || !lang || !region_text) {
      ++shard.info.malformed_count;
      continue;
    }
    Region region;
    try {
      region = parse_region(*region_text);
    } catch (const InvalidArgument&) {
      ++shard.info.malformed_count;
      continue;
    }
    if (region != expected_region) {
      throw RegionViolation("record in " + path.string() + " declares region " + *region_text +
                            ", expected " + std::string(to_string(expected_region)));
    }
    if (!non_empty_text(*message) || !non_empty_text(*reply) ||
        !shard.info.languages.contains(*lang)) {
      ++shard.info.malformed_count;
      continue;
    }
    shard.pairs.push_back({*message, *reply, *lang, region});
  }
  return shard;
}

ShardInfo read_shard_header(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read corpus " + path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (!blank(line)) return parse_header(line, path);
  }
  throw DataError("corpus " + path.string() + " has no header line");
}

ParallelCorpus load_parallel_corpus(const std::filesystem::path& path) {
  RawFile raw = read_jsonl(path);
  ParallelCorpus corpus;
  corpus.info = raw.info;
  for (const json& record : raw.records) {
    const auto src = string_field(record, "src");
    const auto src_lang = string_field(record, "src_lang");
    const auto tgt = string_field(record, "tgt");
    const auto tgt_lang = string_field(record, "tgt_lang");
    if (!src || !src_lang || !tgt || !tgt_lang || *src_lang == *tgt_lang ||
        !non_empty_text(*src) || !non_empty_text(*tgt)) {
      ++corpus.info.malformed_count;
      continue;
    }
    corpus.pairs.push_back({*src, *src_lang, *tgt, *tgt_lang});
  }
  return corpus;
}

MonolingualCorpus load_monolingual_corpus(const std::filesystem::path& path) {
  RawFile raw = read_jsonl(path);
  MonolingualCorpus corpus;
  corpus.info = raw.info;
  for (const json& record : raw.records) {
    const auto text = string_field(record, "text");
    const auto lang = string_field(record, "lang");
    if (!text || !lang || !non_empty_text(*text)) {
      ++corpus.info.malformed_count;
      continue;
    }
    corpus.texts.push_back({*text, *lang});
  }
  return corpus;
}

void write_shard(const std::filesystem::path& path, const RegionShard& shard) {
  std::ostringstream out;
  out << header_json(shard.info).dump() << '\n';
  for (const auto& pair : shard.pairs) {
    out << json{{"message", pair.message},
                {"reply", pair.reply},
                {"lang", pair.lang},
                {"region", std::string(to_string(pair.region))}}
               .dump()
        << '\n';
  }
  detail::write_file_atomic(path, out.str());
}

void write_parallel_corpus(const std::filesystem::path& path, const ParallelCorpus& corpus) {
  std::ostringstream out;
  out << header_json(corpus.info).dump() << '\n';
  for (const auto& pair : corpus.pairs) {
    out << json{{"src", pair.source_text},
                {"src_lang", pair.source_lang},
                {"tgt", pair.target_text},
                {"tgt_lang", pair.target_lang}}
               .dump()
        << '\n';
  }
  detail::write_file_atomic(path, out.str());
}

void write_monolingual_corpus(const std::filesystem::path& path, const MonolingualCorpus& corpus) {
  std::ostringstream out;
  out << header_json(corpus.info).dump() << '\n';
  for (const auto& text : corpus.texts) {
    out << json{{"text", text.text}, {"lang", text.lang}}.dump() << '\n';
  }
  detail::write_file_atomic(path, out.str());
}

PseudoLexicon PseudoLexicon::suffix_rule(LanguageTag source, LanguageTag target) {
  PseudoLexicon lexicon;
  lexicon.suffix = "_" + target;
  lexicon.source_lang = std::move(source);
  lexicon.target_lang = std::move(target);
  return lexicon;
}

PseudoLexicon PseudoLexicon::load(const std::filesystem::path& path) {
  try {
    const json root = json::parse(detail::read_file(path));
    PseudoLexicon lexicon;
    lexicon.source_lang = root.at("source_lang").get<std::string>();
    lexicon.target_lang = root.at("target_lang").get<std::string>();
    lexicon.suffix = root.at("suffix").get<std::string>();
    lexicon.fallback_enabled = root.value("fallback", true);
    lexicon.entries = root.value("entries", std::map<std::string, std::string>{});
    return lexicon;
  } catch (const json::exception& e) {
    throw DataError("malformed lexicon " + path.string() + ": " + e.what());
  }
}

void PseudoLexicon::save(const std::filesystem::path& path) const {
  const json root{{"source_lang", source_lang}, {"target_lang", target_lang}, {"suffix", suffix},
                  {"fallback", fallback_enabled}, {"entries", entries}};
  detail::write_file_atomic(path, root.dump(1) + "\n");
}

std::string PseudoLexicon::translate_word(const std::string& word) const {
  if (auto it = entries.find(word); it != entries.end()) return it->second;
  if (!fallback_enabled) {
    throw InvalidArgument("word '" + word + "' has no " + source_lang + "->" + target_lang +
                          " lexicon entry and the fallback rule is disabled");
  }
  return word + suffix;
}

std::string PseudoLexicon::translate_text(const std::string& text) const {
  std::istringstream words(normalize_text(text));
  std::string word;
  std::string out;
  while (words >> word) {
    if (!out.empty()) out.push_back(' ');
    out += translate_word(word);
  }
  return out;
}

std::optional<std::string> PseudoLexicon::invert_word(const std::string& word) const {
  for (const auto& [source, target] : entries) {
    if (target == word) return source;
  }
  if (fallback_enabled && word.size() > suffix.size() &&
      word.compare(word.size() - suffix.size(), suffix.size(), suffix) == 0) {
    std::string source = word.substr(0, word.size() - suffix.size());
    // An entry shadows the suffix rule for its own source word.
    if (!entries.contains(source)) return source;
  }
  return std::nullopt;
}

MessageReplyPair pseudo_translate(const MessageReplyPair& pair, const PseudoLexicon& lexicon,
                                  const LanguageTag& target_lang) {
  if (pair.lang != lexicon.source_lang) {
    throw InvalidArgument("pair language " + pair.lang + " is not the lexicon source " +
                          lexicon.source_lang);
  }
  if (target_lang != lexicon.target_lang) {
    throw InvalidArgument("lexicon translates into " + lexicon.target_lang + ", not " + target_lang);
  }
  if (!non_empty_text(pair.message) || !non_empty_text(pair.reply)) {
    throw InvalidArgument("cannot translate a pair with an empty message or reply");
  }
  return {lexicon.translate_text(pair.message), lexicon.translate_text(pair.reply), target_lang,
          Region::kLRL};
}

ShardSplit split_shard(const RegionShard& shard, double heldout_fraction, std::uint64_t seed) {
  if (heldout_fraction < 0.0 || heldout_fraction > 1.0) {
    throw InvalidArgument("heldout_fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> order(shard.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto heldout = static_cast<std::size_t>(
      std::llround(heldout_fraction * static_cast<double>(order.size())));
  ShardSplit split;
  split.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(heldout));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(heldout), order.end());
  return split;
}

EvalSets build_eval_sets(const RegionShard& shard, const std::vector<ResponseSet>& responses,
                         double golden_fraction, std::optional<HoldoutSpec> holdout) {
  if (golden_fraction < 0.0 || golden_fraction > 1.0) {
    throw InvalidArgument("golden_fraction must lie in [0, 1]");
  }
  std::map<LanguageTag, const ResponseSet*> by_lang;
  for (const auto& set : responses) by_lang[set.lang()] = &set;
  for (const auto& lang : shard.info.languages) {
    auto it = by_lang.find(lang);
    if (it == by_lang.end() || it->second->empty()) {
      throw InvalidArgument("no response set for shard language " + lang);
    }
  }

  EvalSets sets;
  std::vector<std::size_t> pool;
  if (holdout) {
    ShardSplit split = split_shard(shard, holdout->heldout_fraction, holdout->seed);
    pool = std::move(split.heldout);
    sets.training_indices = std::move(split.train);
  } else {
    pool.resize(shard.pairs.size());
    std::iota(pool.begin(), pool.end(), 0);
  }

  const auto target = static_cast<std::size_t>(
      std::llround(golden_fraction * static_cast<double>(pool.size())));
  for (const std::size_t index : pool) {
    const MessageReplyPair& pair = shard.pairs[index];
    const auto it = by_lang.find(pair.lang);
    const bool matches = it != by_lang.end() && it->second->contains(pair.reply);
    if (matches && sets.golden_indices.size() < target) {
      sets.golden_indices.push_back(index);
      sets.golden.push_back(pair);
    } else {
      sets.general_indices.push_back(index);
      sets.general.push_back(pair);
    }
  }
  sets.golden_shortfall = sets.golden_indices.size() < target;
  return sets;
}

Access assert_region_access(Region stage_region, const ShardInfo& shard) {
  if (shard.public_auxiliary || shard.region == stage_region) return Access::kPermit;
  return Access::kDeny;
}

AccessLog::AccessLog(const AccessLog& other) : records_(other.records()) {}

AccessLog& AccessLog::operator=(const AccessLog& other) {
  if (this != &other) {
    auto copy = other.records();
    std::lock_guard lock(mutex_);
    records_ = std::move(copy);
  }
  return *this;
}

void AccessLog::append(AccessRecord record) {
  std::lock_guard lock(mutex_);
  records_.push_back(std::move(record));
}

std::vector<AccessRecord> AccessLog::records() const {
  std::lock_guard lock(mutex_);
  return records_;
}

std::size_t AccessLog::violations() const {
  std::lock_guard lock(mutex_);
  return static_cast<std::size_t>(std::count_if(records_.begin(), records_.end(), [](const auto& r) {
    return r.decision == Access::kDeny;
  }));
}

std::string AccessLog::to_text() const {
  std::ostringstream out;
  for (const auto& r : records()) {
    out << r.stage << ' ' << to_string(r.stage_region) << ' '
        << (r.decision == Access::kPermit ? "permit" : "deny") << ' ' << to_string(r.shard_region)
        << ' ' << (r.public_auxiliary ? "public" : "private") << ' ' << r.shard_path << '\n';
  }
  return out.str();
}

void AccessLog::write(const std::filesystem::path& path) const {
  detail::write_file_atomic(path, to_text());
}

}  // namespace polyreply
