#include <gtest/gtest.h>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "polyreply/error.hpp"
#include "polyreply/inference.hpp"
#include "polyreply/synth.hpp"
#include "test_support.hpp"

namespace polyreply {
namespace {

using nlohmann::json;

ResponseSet hand_set(const std::vector<std::string>& texts, const std::vector<double>& penalties,
                     const Matrix<float>& vectors) {
  std::vector<ResponseEntry> entries;
  for (std::size_t i = 0; i < texts.size(); ++i) entries.push_back({texts[i], "en", 1, penalties[i]});
  ResponseSet set("en", entries, texts.size());
  set.set_vectors(vectors);
  return set;
}

Encoder<float> tiny_encoder() {
  Rng rng(12);
  return Encoder<float>::random(testing::tiny_config(), rng);
}

TEST(ScoreAll, MatchesHandArithmetic) {
  const auto enc = tiny_encoder();
  const Vocabulary vocab = enc.config().vocabulary();
  const auto msg = tokenize("are you free", "en", 16, vocab);
  Matrix<float> v(3, 6);
  v << 0.5f, -1.0f, 0.25f, 2.0f, 0.0f, 1.5f,  //
      -0.75f, 0.5f, 1.0f, 0.0f, -2.0f, 0.125f, //
      1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f;
  const std::vector<double> pen{-0.5, -1.25, -3.0};
  const auto set = hand_set({"a", "b", "c"}, pen, v);
  const auto scores = score_all(enc, msg, set, 0.5);
  const RowVector<float> m = encode(enc, msg);
  for (int k = 0; k < 3; ++k) {
    double dot = 0.0;
    for (int d = 0; d < 6; ++d) dot += static_cast<double>(m(d)) * static_cast<double>(v(k, d));
    EXPECT_NEAR(scores(k), dot + 0.5 * pen[static_cast<std::size_t>(k)], 1e-12);
  }
}

TEST(ScoreAll, AlphaZeroIsPureDotProduct) {
  const auto enc = tiny_encoder();
  Rng rng(5);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Matrix<float> v(20, 6);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = n(rng);
  std::vector<std::string> texts;
  std::vector<double> pen;
  for (int i = 0; i < 20; ++i) {
    texts.push_back("t" + std::to_string(i));
    pen.push_back(-0.3 * i);
  }
  const auto set = hand_set(texts, pen, v);
  const auto msg = tokenize("see you at noon", "en", 16, enc.config().vocabulary());
  const RowVector<double> dots = encode(enc, msg).cast<double>() * v.cast<double>().transpose();
  EXPECT_EQ(rank_by_score(score_all(enc, msg, set, 0.0)), rank_by_score(dots));
}

TEST(ScoreAll, EqualVectorsRankByPenalty) {
  const auto enc = tiny_encoder();
  Matrix<float> v = Matrix<float>::Constant(4, 6, 0.3f);
  const auto set = hand_set({"a", "b", "c", "d"}, {-2.0, -0.1, -5.0, -1.0}, v);
  const auto msg = tokenize("hello", "en", 16, enc.config().vocabulary());
  for (double alpha : {0.01, 0.2, 3.0}) {
    EXPECT_EQ(rank_by_score(score_all(enc, msg, set, alpha)), (std::vector<std::size_t>{1, 3, 0, 2}));
  }
}

TEST(RankByScore, StableOnTies) {
  RowVector<double> s(5);
  s << 1.0, 3.0, 1.0, 3.0, 2.0;
  EXPECT_EQ(rank_by_score(s), (std::vector<std::size_t>{1, 3, 4, 0, 2}));
}

TEST(Clusters, Examples) {
  EXPECT_EQ(lexical_clusters({"thank you", "thank you!"}), (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(lexical_clusters({"see you soon", "on my way"}), (std::vector<std::size_t>{0, 1}));
  EXPECT_DOUBLE_EQ(jaccard(split_words("p q r"), split_words("q r s")), 0.5);
  EXPECT_DOUBLE_EQ(jaccard(split_words("q r s"), split_words("r s t")), 0.5);
  EXPECT_LT(jaccard(split_words("p q r"), split_words("r s t")), 0.5);
  EXPECT_EQ(lexical_clusters({"p q r", "x y", "q r s", "r s t"}), (std::vector<std::size_t>{0, 1, 0, 0}));
  EXPECT_DOUBLE_EQ(jaccard({}, {}), 1.0);
}

InferenceConfig config_with(std::size_t n1, std::size_t n2) {
  InferenceConfig c;
  c.n1 = n1;
  c.n2 = n2;
  return c;
}

TEST(Select, CollapsesToClusterRepresentatives) {
  std::vector<std::string> texts;
  for (int i = 0; i < 15; ++i) texts.push_back("sounds good " + std::to_string(i));
  for (int i = 0; i < 15; ++i) texts.push_back("no thanks " + std::to_string(i));
  Matrix<float> v = Matrix<float>::Zero(30, 6);
  const auto set = hand_set(texts, std::vector<double>(30, 0.0), v);
  RowVector<double> scores(30);
  for (int i = 0; i < 30; ++i) scores(i) = static_cast<double>((i * 7) % 30);
  const auto out = select_responses(scores, set, config_with(30, 3));
  ASSERT_EQ(out.size(), 2u);
  // Best member of each cluster, in score order.
  EXPECT_EQ(out[0].text, "no thanks 2");
  EXPECT_EQ(out[0].score, 29.0);
  EXPECT_EQ(out[1].text, "sounds good 4");
  EXPECT_EQ(out[1].score, 28.0);
}

TEST(Select, SmallSetReturnsAllInOrder) {
  const auto set = hand_set({"yes", "maybe later"}, {0.0, 0.0}, Matrix<float>::Zero(2, 6));
  RowVector<double> scores(2);
  scores << 0.1, 0.7;
  const auto out = select_responses(scores, set, config_with(30, 3));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].text, "maybe later");
  EXPECT_EQ(out[1].text, "yes");
}

TEST(Select, OnlyTopN1IsConsidered) {
  std::vector<std::string> texts;
  for (int i = 0; i < 10; ++i) texts.push_back("word" + std::to_string(i));
  const auto set = hand_set(texts, std::vector<double>(10, 0.0), Matrix<float>::Zero(10, 6));
  RowVector<double> scores(10);
  for (int i = 0; i < 10; ++i) scores(i) = -i;
  const auto out = select_responses(scores, set, config_with(2, 3));
  EXPECT_EQ(out.size(), 2u);
}

// ---- graph level, on a small synthetic world ----

SynthConfig small_world() {
  SynthConfig c;
  c.intents = 8;
  c.keywords_per_intent = 3;
  c.filler_words = 12;
  c.replies_per_intent = 3;
  c.reply_vocabulary = 16;
  c.train_pairs_per_language = 200;
  c.test_pairs_per_language = 40;
  c.parallel_pairs_per_language = 10;
  c.monolingual_per_language = 10;
  c.profile_texts_per_language = 80;
  return c;
}

class GraphTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    world_ = new SynthWorld(generate_synth(small_world()));
    Rng rng(4);
    ModelConfig mc = testing::tiny_config();
    mc.vocab_size = 1024;
    mc.max_msg_len = 96;
    const auto enc = Encoder<float>::random(mc, rng);
    const auto en = mine_responses(world_->train.at(shard_key(Region::kNAM, "en")), "en", 200, 1);
    const auto qd = mine_responses(world_->train.at(shard_key(Region::kNAM, "qd")), "qd", 200, 1);
    const auto zz = transcreate(en, world_->lexicons.at("zz"), "zz");
    std::map<LanguageTag, std::vector<std::string>> samples;
    for (const auto& l : {"en", "qd", "zz", "qa"}) {
      for (const auto& t : world_->profile_texts.at(l).texts) samples[l].push_back(t.text);
    }
    graph_ = new CompositeGraph(enc,
                                {precompute_vectors(enc, en), precompute_vectors(enc, qd),
                                 precompute_vectors(enc, zz)},
                                LanguageProfiles::build(samples), InferenceConfig{});
  }
  static void TearDownTestSuite() {
    delete graph_;
    delete world_;
  }

  static const std::string& message(Region region, const LanguageTag& lang, std::size_t i = 0) {
    return world_->test.at(shard_key(region, lang)).pairs.at(i).message;
  }

  static SynthWorld* world_;
  static CompositeGraph* graph_;
};

SynthWorld* GraphTest::world_ = nullptr;
CompositeGraph* GraphTest::graph_ = nullptr;

TEST_F(GraphTest, TriggerPolicy) {
  const auto ok = should_trigger(message(Region::kNAM, "en"), *graph_);
  EXPECT_TRUE(ok.triggered) << ok.reason;
  EXPECT_EQ(ok.language.lang, "en");

  std::string longer;
  for (int i = 0; i < 97; ++i) longer += world_->test.at(shard_key(Region::kNAM, "en")).pairs[0].reply + " ";
  std::string exact;
  const auto words = split_words(message(Region::kNAM, "en", 1));
  for (std::size_t i = 0; i < 96; ++i) exact += words[i % words.size()] + " ";
  EXPECT_EQ(should_trigger(longer, *graph_).reason, "too_long");
  EXPECT_NE(should_trigger(exact, *graph_).reason, "too_long");

  bool checked = false;
  for (const auto& p : world_->test.at(shard_key(Region::kEUR, "qa")).pairs) {
    if (graph_->profiles().identify(p.message).lang != "qa") continue;
    const auto d = should_trigger(p.message, *graph_);
    EXPECT_FALSE(d.triggered);
    EXPECT_EQ(d.reason, "unsupported_language");
    checked = true;
    break;
  }
  EXPECT_TRUE(checked);
  EXPECT_EQ(should_trigger("", *graph_).reason, "unsupported_language");
}

TEST_F(GraphTest, LowConfidenceDeclines) {
  InferenceConfig strict;
  strict.lid_threshold = 1.01;
  const CompositeGraph g(graph_->encoder(),
                         {graph_->responses("en"), graph_->responses("qd"), graph_->responses("zz")},
                         graph_->profiles(), strict);
  EXPECT_EQ(should_trigger(message(Region::kNAM, "en"), g).reason, "low_confidence");
}

TEST_F(GraphTest, PredictionsAreDedupedMembersOfDetectedLanguage) {
  for (const auto& [region, lang] : std::vector<std::pair<Region, LanguageTag>>{
           {Region::kNAM, "en"}, {Region::kNAM, "qd"}, {Region::kLRL, "zz"}}) {
    for (std::size_t i = 0; i < 20; ++i) {
      const auto p = predict(message(region, lang, i), *graph_);
      if (!p.triggered) continue;
      const auto& set = graph_->responses(p.lang);
      ASSERT_LE(p.responses.size(), 3u);
      ASSERT_FALSE(p.responses.empty());
      for (std::size_t a = 0; a < p.responses.size(); ++a) {
        EXPECT_TRUE(set.contains(p.responses[a].text));
        if (a > 0) EXPECT_GE(p.responses[a - 1].score, p.responses[a].score);
        for (std::size_t b = a + 1; b < p.responses.size(); ++b) {
          EXPECT_LT(jaccard(split_words(p.responses[a].text), split_words(p.responses[b].text)), 0.5);
        }
      }
    }
  }
}

TEST_F(GraphTest, GoldenWithTopScoreComesFirst) {
  const auto& base = graph_->responses("en");
  const std::string msg = message(Region::kNAM, "en", 3);
  const RowVector<float> m =
      encode(graph_->encoder(), tokenize(msg, "en", 96, graph_->encoder().config().vocabulary()));
  Matrix<float> v = Matrix<float>::Zero(static_cast<Eigen::Index>(base.size()), m.size());
  const std::size_t golden = base.size() / 2;
  v.row(static_cast<Eigen::Index>(golden)) = m * 100.0f;
  ResponseSet rigged = base;
  rigged.set_vectors(v);
  InferenceConfig cfg;
  cfg.alpha = 0.0;
  const CompositeGraph g(graph_->encoder(), {rigged}, graph_->profiles(), cfg);
  const auto p = predict(msg, g);
  ASSERT_TRUE(p.triggered) << p.reason;
  EXPECT_EQ(p.responses.front().text, base.entries()[golden].text);
}

TEST_F(GraphTest, ServeIsStatelessAndSurvivesGarbage) {
  const std::string request = json{{"message", message(Region::kNAM, "qd", 2)}}.dump();
  std::string input;
  for (int i = 0; i < 1000; ++i) input += request + "\n";
  input += "{not json\n";
  input += "[1, 2]\n";
  input += "\n";
  input += request + "\n";
  std::istringstream in(input);
  std::ostringstream out;
  EXPECT_EQ(serve(*graph_, in, out), 1003u);
  std::istringstream lines(out.str());
  std::string first;
  std::getline(lines, first);
  const auto parsed = json::parse(first);
  EXPECT_TRUE(parsed.contains("responses"));
  EXPECT_LE(parsed["responses"].size(), 3u);
  std::string line;
  for (int i = 1; i < 1000; ++i) {
    std::getline(lines, line);
    ASSERT_EQ(line, first) << "request " << i;
  }
  std::getline(lines, line);
  EXPECT_TRUE(json::parse(line).contains("error"));
  std::getline(lines, line);
  EXPECT_TRUE(json::parse(line).contains("error"));
  std::getline(lines, line);
  EXPECT_EQ(line, first);
}

TEST_F(GraphTest, DeclinedRequestCarriesReason) {
  const auto reply = json::parse(handle_request(R"({"message": ""})", *graph_));
  EXPECT_EQ(reply["reason"], "unsupported_language");
  EXPECT_TRUE(reply["responses"].empty());
}

TEST_F(GraphTest, SaveLoadGivesSamePredictions) {
  testing::TempDir dir;
  graph_->save(dir / "graph", {"EUR", "NAM"});
  const auto back = CompositeGraph::load(dir / "graph");
  EXPECT_EQ(back.languages(), graph_->languages());
  for (std::size_t i = 0; i < 10; ++i) {
    const std::string m = message(Region::kLRL, "zz", i);
    EXPECT_EQ(predict(m, back).to_json(), predict(m, *graph_).to_json());
  }
}

TEST_F(GraphTest, ConstructorValidates) {
  EXPECT_THROW(CompositeGraph(graph_->encoder(), {graph_->responses("en")}, graph_->profiles(),
                              config_with(2, 3)),
               InvalidArgument);
  const auto bare = mine_responses(world_->train.at(shard_key(Region::kNAM, "en")), "en", 10, 1);
  EXPECT_THROW(CompositeGraph(graph_->encoder(), {bare}, graph_->profiles(), InferenceConfig{}),
               InvalidArgument);
  EXPECT_THROW(CompositeGraph(graph_->encoder(), {graph_->responses("en"), graph_->responses("en")},
                              graph_->profiles(), InferenceConfig{}),
               InvalidArgument);
}

std::string round_trip(const std::filesystem::path& path, const std::string& payload) {
  const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::strncpy(addr.sun_path, path.c_str(), sizeof addr.sun_path - 1);
  for (int attempt = 0; attempt < 200; ++attempt) {
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::write(fd, payload.data(), payload.size());
  ::shutdown(fd, SHUT_WR);
  std::string out;
  char buf[4096];
  for (ssize_t n; (n = ::read(fd, buf, sizeof buf)) > 0;) out.append(buf, static_cast<std::size_t>(n));
  ::close(fd);
  return out;
}

TEST_F(GraphTest, SocketServesConcurrentClients) {
  testing::TempDir dir;
  const auto path = dir / "s.sock";
  std::thread server([&] { serve_socket(*graph_, path, 3); });
  const std::string request = json{{"message", message(Region::kNAM, "en", 5)}}.dump() + "\n";
  std::vector<std::string> replies(3);
  std::vector<std::thread> clients;
  for (int c = 0; c < 3; ++c) {
    clients.emplace_back([&, c] { replies[static_cast<std::size_t>(c)] = round_trip(path, request + "oops\n" + request); });
  }
  for (auto& t : clients) t.join();
  server.join();
  const std::string expected = handle_request(request.substr(0, request.size() - 1), *graph_);
  for (const auto& r : replies) {
    std::istringstream in(r);
    std::string a, b, c;
    std::getline(in, a);
    std::getline(in, b);
    std::getline(in, c);
    EXPECT_EQ(a, expected);
    EXPECT_TRUE(json::parse(b).contains("error"));
    EXPECT_EQ(c, expected);
  }
}

}  // namespace
}  // namespace polyreply
