#include "polyreply/inference.hpp"

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include <json.hpp>

#include "io_util.hpp"
#include "polyreply/error.hpp"

namespace polyreply {

using nlohmann::json;

CompositeGraph::CompositeGraph(Encoder<float> encoder, std::vector<ResponseSet> responses,
                               LanguageProfiles profiles, InferenceConfig config)
    : encoder_(std::move(encoder)), profiles_(std::move(profiles)), config_(config) {
  if (config_.n1 == 0 || config_.n2 == 0) throw InvalidArgument("n1 and n2 must be positive");
  if (config_.n2 > config_.n1) throw InvalidArgument("n2 must not exceed n1");
  const auto dim = static_cast<Eigen::Index>(encoder_.config().hidden_dim);
  for (auto& set : responses) {
    if (set.empty()) throw InvalidArgument("empty response set for " + set.lang());
    if (!set.has_vectors() || set.vectors().cols() != dim) {
      throw InvalidArgument("response set " + set.lang() + " lacks vectors of width " +
                            std::to_string(dim));
    }
    const LanguageTag lang = set.lang();
    if (!responses_.emplace(lang, std::move(set)).second) {
      throw InvalidArgument("duplicate response set for " + lang);
    }
  }
}

const ResponseSet& CompositeGraph::responses(const LanguageTag& lang) const {
  auto it = responses_.find(lang);
  if (it == responses_.end()) throw InvalidArgument("no response set for " + lang);
  return it->second;
}

std::vector<LanguageTag> CompositeGraph::languages() const {
  std::vector<LanguageTag> out;
  for (const auto& [lang, set] : responses_) out.push_back(lang);
  return out;
}

void CompositeGraph::save(const std::filesystem::path& dir,
                          const std::vector<std::string>& provenance) const {
  std::filesystem::create_directories(dir / "responses");
  save_checkpoint(Checkpoint{encoder_, provenance, {}}, dir / "model.ckpt");
  for (const auto& [lang, set] : responses_) set.save(dir / "responses" / lang);
  profiles_.save(dir / "profiles.json");
  const json manifest{{"languages", languages()},
                      {"alpha", config_.alpha},
                      {"n1", config_.n1},
                      {"n2", config_.n2},
                      {"max_message_tokens", config_.max_message_tokens},
                      {"lid_threshold", config_.lid_threshold},
                      {"cluster_jaccard", config_.cluster_jaccard}};
  detail::write_file_atomic(dir / "graph.json", manifest.dump(2) + "\n");
}

CompositeGraph CompositeGraph::load(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(detail::read_file(dir / "graph.json"));
  } catch (const json::exception& e) {
    throw DataError("bad graph manifest in " + dir.string() + ": " + e.what());
  }
  InferenceConfig config;
  std::vector<ResponseSet> sets;
  try {
    config.alpha = manifest.at("alpha").get<double>();
    config.n1 = manifest.at("n1").get<std::size_t>();
    config.n2 = manifest.at("n2").get<std::size_t>();
    config.max_message_tokens = manifest.at("max_message_tokens").get<std::size_t>();
    config.lid_threshold = manifest.at("lid_threshold").get<double>();
    config.cluster_jaccard = manifest.at("cluster_jaccard").get<double>();
    for (const auto& lang : manifest.at("languages")) {
      sets.push_back(ResponseSet::load(dir / "responses" / lang.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw DataError("bad graph manifest in " + dir.string() + ": " + e.what());
  }
  Checkpoint ckpt = load_checkpoint(dir / "model.ckpt");
  return CompositeGraph(std::move(ckpt.encoder), std::move(sets),
                        LanguageProfiles::load(dir / "profiles.json"), config);
}

TriggerDecision should_trigger(std::string_view message, const CompositeGraph& graph) {
  TriggerDecision d;
  const auto& cfg = graph.config();
  if (split_words(message).size() > cfg.max_message_tokens) {
    d.reason = "too_long";
    return d;
  }
  d.language = graph.profiles().identify(message);
  if (d.language.lang == kUnknownLanguage || !graph.supports(d.language.lang)) {
    d.reason = "unsupported_language";
    return d;
  }
  if (d.language.confidence < cfg.lid_threshold) {
    d.reason = "low_confidence";
    return d;
  }
  d.triggered = true;
  return d;
}

RowVector<double> score_all(const Encoder<float>& encoder, const TokenSequence& message,
                            const ResponseSet& responses, double alpha) {
  if (!responses.has_vectors()) throw InvalidArgument("response set has no vectors");
  const RowVector<double> m = encode(encoder, message).cast<double>();
  const Matrix<double> v = responses.vectors().cast<double>();
  if (v.cols() != m.cols()) throw InvalidArgument("response vector width mismatch");
  RowVector<double> scores = m * v.transpose();
  scores += alpha * responses.penalties();
  return scores;
}

std::vector<std::size_t> rank_by_score(const RowVector<double>& scores) {
  std::vector<std::size_t> order(static_cast<std::size_t>(scores.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
  });
  return order;
}

double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::set<std::string> sa(a.begin(), a.end());
  const std::set<std::string> sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t common = 0;
  for (const auto& t : sa) common += sb.count(t);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

std::vector<std::size_t> lexical_clusters_of_tokens(
    const std::vector<std::vector<std::string>>& token_lists, double threshold) {
  const std::size_t n = token_lists.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (jaccard(token_lists[i], token_lists[j]) < threshold) continue;
      const std::size_t a = find(i);
      const std::size_t b = find(j);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  }
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = find(i);
  return labels;
}

std::vector<std::size_t> lexical_clusters(const std::vector<std::string>& texts,
                                          double threshold) {
  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(texts.size());
  for (const auto& t : texts) tokens.push_back(split_words(t));
  return lexical_clusters_of_tokens(tokens, threshold);
}

std::vector<ScoredResponse> select_responses(
    const RowVector<double>& scores, const ResponseSet& responses, const InferenceConfig& config,
    const std::vector<std::vector<std::string>>* entry_tokens) {
  if (static_cast<std::size_t>(scores.size()) != responses.size()) {
    throw InvalidArgument("score count does not match response count");
  }
  std::vector<std::size_t> top = rank_by_score(scores);
  if (top.size() > config.n1) top.resize(config.n1);

  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(top.size());
  for (std::size_t idx : top) {
    tokens.push_back(entry_tokens ? (*entry_tokens)[idx]
                                  : split_words(responses.entries()[idx].text));
  }
  // Labels are the smallest index in score order, so the first member seen is the best.
  const auto labels = lexical_clusters_of_tokens(tokens, config.cluster_jaccard);
  std::vector<ScoredResponse> out;
  std::set<std::size_t> used;
  for (std::size_t k = 0; k < top.size() && out.size() < config.n2; ++k) {
    if (!used.insert(labels[k]).second) continue;
    out.push_back({responses.entries()[top[k]].text, scores(static_cast<Eigen::Index>(top[k]))});
  }
  return out;
}

std::string Prediction::to_json() const {
  json j{{"triggered", triggered}, {"lang", lang}, {"responses", json::array()}};
  if (!triggered) j["reason"] = reason;
  for (const auto& r : responses) j["responses"].push_back({{"text", r.text}, {"score", r.score}});
  return j.dump();
}

Prediction predict(std::string_view message, const CompositeGraph& graph) {
  const TriggerDecision decision = should_trigger(message, graph);
  Prediction p;
  p.lang = decision.language.lang;
  p.triggered = decision.triggered;
  p.reason = decision.reason;
  if (!decision.triggered) return p;
  const auto& cfg = graph.config();
  const auto& set = graph.responses(p.lang);
  const TokenSequence seq =
      tokenize(message, p.lang, static_cast<std::size_t>(graph.encoder().config().max_msg_len),
               graph.encoder().config().vocabulary());
  p.responses = select_responses(score_all(graph.encoder(), seq, set, cfg.alpha), set, cfg);
  return p;
}

std::string handle_request(std::string_view line, const CompositeGraph& graph) {
  try {
    const json request = json::parse(line);
    if (!request.is_object() || !request.contains("message") || !request["message"].is_string()) {
      return json{{"error", "request must be an object with a string 'message'"}}.dump();
    }
    return predict(request["message"].get<std::string>(), graph).to_json();
  } catch (const json::exception& e) {
    return json{{"error", std::string("malformed request: ") + e.what()}}.dump();
  } catch (const Error& e) {
    return json{{"error", e.what()}}.dump();
  }
}

std::size_t serve(const CompositeGraph& graph, std::istream& in, std::ostream& out) {
  std::size_t handled = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out << handle_request(line, graph) << '\n' << std::flush;
    ++handled;
  }
  return handled;
}

namespace {

void serve_connection(const CompositeGraph& graph, int fd) {
  std::string buffer;
  char chunk[4096];
  for (;;) {
    const ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n <= 0) break;
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t pos;
    while ((pos = buffer.find('\n')) != std::string::npos) {
      const std::string line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const std::string reply = handle_request(line, graph) + "\n";
      std::size_t sent = 0;
      while (sent < reply.size()) {
        const ssize_t w = ::write(fd, reply.data() + sent, reply.size() - sent);
        if (w <= 0) {
          ::close(fd);
          return;
        }
        sent += static_cast<std::size_t>(w);
      }
    }
  }
  ::close(fd);
}

}  // namespace

void serve_socket(const CompositeGraph& graph, const std::filesystem::path& socket_path,
                  std::size_t max_connections) {
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) throw Error(std::string("socket: ") + std::strerror(errno));
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const std::string path = socket_path.string();
  if (path.size() >= sizeof addr.sun_path) {
    ::close(fd);
    throw InvalidArgument("socket path too long: " + path);
  }
  std::strncpy(addr.sun_path, path.c_str(), sizeof addr.sun_path - 1);
  ::unlink(path.c_str());
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 16) != 0) {
    const std::string msg = std::strerror(errno);
    ::close(fd);
    throw Error("cannot listen on " + path + ": " + msg);
  }
  std::vector<std::thread> workers;
  for (std::size_t accepted = 0; max_connections == 0 || accepted < max_connections; ++accepted) {
    const int client = ::accept(fd, nullptr, nullptr);
    if (client < 0) {
      if (errno == EINTR) continue;
      break;
    }
    workers.emplace_back(serve_connection, std::cref(graph), client);
  }
  for (auto& w : workers) w.join();
  ::close(fd);
  ::unlink(path.c_str());
}

}  // namespace polyreply
