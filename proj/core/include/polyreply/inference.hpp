#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "polyreply/model.hpp"
#include "polyreply/responses.hpp"
#include "polyreply/text.hpp"

namespace polyreply {

struct InferenceConfig {
  double alpha = 0.2;
  std::size_t n1 = 30;
  std::size_t n2 = 3;
  std::size_t max_message_tokens = 96;
  double lid_threshold = 0.3;
  double cluster_jaccard = 0.5;
};

/// Deployable bundle: encoder, per-language response matrices and penalties, language
/// identifier, and trigger policy. Immutable after construction.
class CompositeGraph {
 public:
  CompositeGraph(Encoder<float> encoder, std::vector<ResponseSet> responses,
                 LanguageProfiles profiles, InferenceConfig config);

  const Encoder<float>& encoder() const { return encoder_; }
  const InferenceConfig& config() const { return config_; }
  const LanguageProfiles& profiles() const { return profiles_; }
  const ResponseSet& responses(const LanguageTag& lang) const;
  bool supports(const LanguageTag& lang) const { return responses_.contains(lang); }
  std::vector<LanguageTag> languages() const;

  /// Writes `graph.json`, the checkpoint, response sets and profiles under `dir`.
  void save(const std::filesystem::path& dir, const std::vector<std::string>& provenance) const;
  static CompositeGraph load(const std::filesystem::path& dir);

 private:
  Encoder<float> encoder_;
  std::map<LanguageTag, ResponseSet> responses_;
  LanguageProfiles profiles_;
  InferenceConfig config_;
};

struct TriggerDecision {
  bool triggered = false;
  std::string reason;
  LanguageGuess language;
};

/// Declines messages over max_message_tokens, in unsupported languages, or with
/// identifier confidence below lid_threshold.
TriggerDecision should_trigger(std::string_view message, const CompositeGraph& graph);

/// score[k] = enc(message) . vector_k + alpha * penalty_k.
RowVector<double> score_all(const Encoder<float>& encoder, const TokenSequence& message,
                            const ResponseSet& responses, double alpha);

/// Entry indices sorted by score descending, ties by index.
std::vector<std::size_t> rank_by_score(const RowVector<double>& scores);

/// Cluster label per text: connected components of token-set Jaccard >= threshold.
/// Each label is the smallest index in its component.
std::vector<std::size_t> lexical_clusters(const std::vector<std::string>& texts,
                                          double threshold = 0.5);

std::vector<std::size_t> lexical_clusters_of_tokens(
    const std::vector<std::vector<std::string>>& token_lists,
                                          double threshold = 0.5);

/// Token-set Jaccard similarity; two empty sets count as identical.
double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b);

struct ScoredResponse {
  std::string text;
  double score = 0.0;
};

/// Top n1 by score, one best member per lexical cluster, first n2 of those.
/// `entry_tokens`, when given, holds split_words of every entry and skips re-splitting.
std::vector<ScoredResponse> select_responses(
    const RowVector<double>& scores, const ResponseSet& responses, const InferenceConfig& config,
    const std::vector<std::vector<std::string>>* entry_tokens = nullptr);

struct Prediction {
  std::vector<ScoredResponse> responses;
  LanguageTag lang;
  bool triggered = false;
  std::string reason;

  std::string to_json() const;
};

Prediction predict(std::string_view message, const CompositeGraph& graph);

/// Handles one request line. Malformed requests produce {"error": ...}.
std::string handle_request(std::string_view line, const CompositeGraph& graph);

/// Newline-delimited JSON loop over streams until EOF. Returns requests handled.
std::size_t serve(const CompositeGraph& graph, std::istream& in, std::ostream& out);

/// Same protocol on a Unix-domain socket, one thread per connection. Returns after
/// `max_connections` connections have finished (0 means never).
void serve_socket(const CompositeGraph& graph, const std::filesystem::path& socket_path,
                  std::size_t max_connections = 0);

}  // namespace polyreply
