#include "polyreply/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "polyreply/error.hpp"

namespace polyreply {

std::array<double, 3> EvalConfig::normalized_weights() const {
  double sum = 0.0;
  for (double w : rouge_weights) {
    if (w < 0.0) throw InvalidArgument("ROUGE weights must be non-negative");
    sum += w;
  }
  if (sum <= 0.0) throw InvalidArgument("ROUGE weights must not all be zero");
  return {rouge_weights[0] / sum, rouge_weights[1] / sum, rouge_weights[2] / sum};
}

double mrr(std::span<const std::optional<std::size_t>> ranks, std::size_t cutoff) {
  if (ranks.empty()) throw InvalidArgument("MRR of an empty set");
  double sum = 0.0;
  for (const auto& r : ranks) {
    if (!r) continue;
    if (*r == 0) throw InvalidArgument("ranks are 1-based");
    if (*r <= cutoff) sum += 1.0 / static_cast<double>(*r);
  }
  return sum / static_cast<double>(ranks.size());
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& words,
                                                            std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++counts[std::vector<std::string>(words.begin() + static_cast<std::ptrdiff_t>(i),
                                      words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

double rouge_n(const std::vector<std::string>& reference, const std::vector<std::string>& candidate,
               std::size_t n) {
  if (n == 0) throw InvalidArgument("n-gram order must be positive");
  const auto ref = ngram_counts(reference, n);
  if (ref.empty()) return 0.0;
  const auto cand = ngram_counts(candidate, n);
  std::size_t matched = 0;
  std::size_t total = 0;
  for (const auto& [gram, count] : ref) {
    total += count;
    if (auto it = cand.find(gram); it != cand.end()) matched += std::min(count, it->second);
  }
  return static_cast<double>(matched) / static_cast<double>(total);
}

double w_rouge(const std::string& reference, const std::vector<std::string>& candidates,
               const EvalConfig& config) {
  if (candidates.empty()) throw InvalidArgument("W_ROUGE needs at least one candidate");
  const auto w = config.normalized_weights();
  const auto ref = split_words(reference);
  double best = 0.0;
  for (const auto& c : candidates) {
    const auto cand = split_words(c);
    double score = 0.0;
    for (std::size_t n = 1; n <= 3; ++n) score += w[n - 1] * rouge_n(ref, cand, n);
    best = std::max(best, score);
  }
  return best;
}

namespace {

TokenSequence message_tokens(const Encoder<float>& encoder, const MessageReplyPair& pair) {
  return tokenize(pair.message, pair.lang, static_cast<std::size_t>(encoder.config().max_msg_len),
                  encoder.config().vocabulary());
}

std::optional<std::size_t> rank_of(const RowVector<double>& scores, std::size_t target) {
  const double s = scores(static_cast<Eigen::Index>(target));
  std::size_t rank = 1;
  for (Eigen::Index k = 0; k < scores.size(); ++k) {
    const auto idx = static_cast<std::size_t>(k);
    // Same order as rank_by_score: higher score first, ties by index.
    if (scores(k) > s || (scores(k) == s && idx < target)) ++rank;
  }
  return rank;
}

}  // namespace

std::optional<std::size_t> golden_rank(const Encoder<float>& encoder, const ResponseSet& responses,
                                       const MessageReplyPair& pair, double alpha) {
  const auto target = responses.find(pair.reply);
  if (!target) return std::nullopt;
  return rank_of(score_all(encoder, message_tokens(encoder, pair), responses, alpha), *target);
}

LanguageMetrics evaluate_language(const Encoder<float>& encoder, const LanguageEvalSet& set,
                                  const ResponseSet& responses, const InferenceConfig& inference,
                                  const EvalConfig& config) {
  if (!responses.has_vectors()) throw InvalidArgument("response set has no vectors");
  LanguageMetrics m;
  m.lang = set.lang;
  m.region = set.region;
  m.golden_count = set.golden.size();
  m.general_count = set.general.size();

  if (!set.golden.empty()) {
    std::vector<std::optional<std::size_t>> ranks;
    ranks.reserve(set.golden.size());
    for (const auto& pair : set.golden) {
      ranks.push_back(golden_rank(encoder, responses, pair, inference.alpha));
    }
    m.mrr = mrr(ranks, config.mrr_cutoff);
  }

  if (!set.general.empty()) {
    std::vector<std::vector<std::string>> entry_tokens;
    entry_tokens.reserve(responses.size());
    for (const auto& e : responses.entries()) entry_tokens.push_back(split_words(e.text));
    double sum = 0.0;
    for (const auto& pair : set.general) {
      const auto scores = score_all(encoder, message_tokens(encoder, pair), responses,
                                    inference.alpha);
      std::vector<std::string> texts;
      for (const auto& r : select_responses(scores, responses, inference, &entry_tokens)) {
        texts.push_back(r.text);
      }
      sum += w_rouge(pair.reply, texts, config);
    }
    m.w_rouge = sum / static_cast<double>(set.general.size());
  }
  return m;
}

LanguageMetrics evaluate_language(const Encoder<float>& encoder, const LanguageEvalSet& set,
                                  const InferenceConfig& inference, const EvalConfig& config) {
  return evaluate_language(encoder, set, precompute_vectors(encoder, set.responses), inference,
                           config);
}

const LanguageMetrics& EvalReport::at(std::size_t model, const LanguageTag& lang) const {
  if (model >= metrics.size()) throw InvalidArgument("model index out of range");
  for (const auto& m : metrics[model]) {
    if (m.lang == lang) return m;
  }
  throw InvalidArgument("no metrics for language " + lang);
}

std::string EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (const auto& m : metrics[i]) {
      rows.push_back({{"model", models[i]},
                      {"region", std::string(to_string(m.region))},
                      {"lang", m.lang},
                      {"mrr", m.mrr},
                      {"w_rouge", m.w_rouge},
                      {"golden", m.golden_count},
                      {"general", m.general_count}});
    }
  }
  return nlohmann::json{{"models", models},
                        {"languages", languages},
                        {"results", rows},
                        {"mrr_deltas", mrr_deltas},
                        {"w_rouge_deltas", w_rouge_deltas}}
      .dump(2);
}

std::string EvalReport::to_table() const {
  std::size_t width = 5;
  for (const auto& m : models) width = std::max(width, m.size());
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-4s %-8s %-*s %8s %8s\n", "Reg", "Lang",
                static_cast<int>(width), "Model", "MRR", "W_ROUGE");
  out << line;
  for (const auto& lang : languages) {
    for (std::size_t i = 0; i < models.size(); ++i) {
      const auto& m = at(i, lang);
      std::snprintf(line, sizeof line, "%-4s %-8s %-*s %8.4f %8.4f\n",
                    std::string(to_string(m.region)).c_str(), m.lang.c_str(),
                    static_cast<int>(width), models[i].c_str(), m.mrr, m.w_rouge);
      out << line;
    }
  }
  return out.str();
}

EvalReport evaluate_models(std::span<const NamedModel> models, std::span<const LanguageEvalSet> sets,
                           const InferenceConfig& inference, const EvalConfig& config) {
  if (models.empty()) throw InvalidArgument("no models to evaluate");
  EvalReport report;
  for (const auto& s : sets) report.languages.push_back(s.lang);
  for (const auto& model : models) {
    if (model.encoder == nullptr) throw InvalidArgument("model '" + model.label + "' is null");
    report.models.push_back(model.label);
    auto& row = report.metrics.emplace_back();
    for (const auto& s : sets) row.push_back(evaluate_language(*model.encoder, s, inference, config));
  }
  for (std::size_t l = 0; l < report.languages.size(); ++l) {
    auto& dm = report.mrr_deltas[report.languages[l]];
    auto& dw = report.w_rouge_deltas[report.languages[l]];
    for (std::size_t i = 1; i < models.size(); ++i) {
      dm.push_back(report.metrics[i][l].mrr - report.metrics[i - 1][l].mrr);
      dw.push_back(report.metrics[i][l].w_rouge - report.metrics[i - 1][l].w_rouge);
    }
  }
  return report;
}

EvalReport forgetting_report(std::span<const NamedModel> models,
                             std::span<const LanguageEvalSet> sets,
                             const InferenceConfig& inference, const EvalConfig& config) {
  if (models.size() < 2) throw InvalidArgument("forgetting needs at least two checkpoints");
  return evaluate_models(models, sets, inference, config);
}

}  // namespace polyreply
