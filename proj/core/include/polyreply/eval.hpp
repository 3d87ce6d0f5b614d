#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polyreply/corpus.hpp"
#include "polyreply/inference.hpp"
#include "polyreply/model.hpp"
#include "polyreply/responses.hpp"

namespace polyreply {

struct EvalConfig {
  std::size_t mrr_cutoff = 15;
  /// Unnormalized ROUGE-1/2/3 weights.
  std::array<double, 3> rouge_weights{1.0, 2.0, 3.0};

  std::array<double, 3> normalized_weights() const;
};

/// Mean of 1/rank over all items; an absent rank or one beyond cutoff contributes 0.
double mrr(std::span<const std::optional<std::size_t>> ranks, std::size_t cutoff);

/// Clipped n-gram matches over reference n-gram count; 0 when the reference has none.
double rouge_n(const std::vector<std::string>& reference, const std::vector<std::string>& candidate,
               std::size_t n);

/// Max over candidates of the normalized-weight sum of ROUGE-1..3. Throws on no candidates.
double w_rouge(const std::string& reference, const std::vector<std::string>& candidates,
               const EvalConfig& config = {});

struct LanguageEvalSet {
  LanguageTag lang;
  Region region = Region::kEUR;
  ResponseSet responses;
  std::vector<MessageReplyPair> golden;
  std::vector<MessageReplyPair> general;
};

struct LanguageMetrics {
  LanguageTag lang;
  Region region = Region::kEUR;
  double mrr = 0.0;
  double w_rouge = 0.0;
  std::size_t golden_count = 0;
  std::size_t general_count = 0;
};

/// 1-based rank of the golden reply under penalized scoring, nullopt if not in the set.
std::optional<std::size_t> golden_rank(const Encoder<float>& encoder, const ResponseSet& responses,
                                       const MessageReplyPair& pair, double alpha);

/// `responses` must carry vectors for `encoder`.
LanguageMetrics evaluate_language(const Encoder<float>& encoder, const LanguageEvalSet& set,
                                  const ResponseSet& responses, const InferenceConfig& inference,
                                  const EvalConfig& config);

/// Recomputes response vectors with `encoder`, then evaluates.
LanguageMetrics evaluate_language(const Encoder<float>& encoder, const LanguageEvalSet& set,
                                  const InferenceConfig& inference, const EvalConfig& config);

struct NamedModel {
  std::string label;
  const Encoder<float>* encoder = nullptr;
};

struct EvalReport {
  std::vector<std::string> models;
  /// metrics[model index][language index]
  std::vector<std::vector<LanguageMetrics>> metrics;
  std::vector<LanguageTag> languages;
  /// Per language, (later - earlier) for each consecutive model pair.
  std::map<LanguageTag, std::vector<double>> mrr_deltas;
  std::map<LanguageTag, std::vector<double>> w_rouge_deltas;

  const LanguageMetrics& at(std::size_t model, const LanguageTag& lang) const;
  std::string to_json() const;
  /// Reg / Lang / Model / MRR / W_ROUGE.
  std::string to_table() const;
};

/// Evaluates every model on every set. A single model is allowed (no deltas).
EvalReport evaluate_models(std::span<const NamedModel> models, std::span<const LanguageEvalSet> sets,
                           const InferenceConfig& inference, const EvalConfig& config);

/// Requires at least two models; negative delta means forgetting.
EvalReport forgetting_report(std::span<const NamedModel> models,
                             std::span<const LanguageEvalSet> sets,
                             const InferenceConfig& inference, const EvalConfig& config);

}  // namespace polyreply
