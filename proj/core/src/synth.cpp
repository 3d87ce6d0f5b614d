#include "polyreply/synth.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "io_util.hpp"
#include "polyreply/error.hpp"
#include "polyreply/text.hpp"

namespace polyreply {

std::string shard_key(Region region, const LanguageTag& lang) {
  return std::string(to_string(region)) + "/" + lang;
}

namespace {

constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
constexpr std::string_view kVowels = "aeiou";

// Each language draws words from its own small syllable inventory, which gives the
// trigram identifier something to separate.
class WordMaker {
 public:
  WordMaker(Rng& rng, std::set<std::string>& taken) : rng_(rng), taken_(taken) {
    std::string c(kConsonants);
    std::string v(kVowels);
    std::shuffle(c.begin(), c.end(), rng_);
    std::shuffle(v.begin(), v.end(), rng_);
    consonants_ = c.substr(0, 7);
    vowels_ = v.substr(0, 3);
  }

  std::string make() {
    std::uniform_int_distribution<int> syllables(2, 3);
    for (;;) {
      std::string word;
      const int n = syllables(rng_);
      for (int i = 0; i < n; ++i) {
        word.push_back(pick(consonants_));
        word.push_back(pick(vowels_));
      }
      if (taken_.insert(word).second) return word;
    }
  }

 private:
  char pick(const std::string& from) {
    std::uniform_int_distribution<std::size_t> d(0, from.size() - 1);
    return from[d(rng_)];
  }

  Rng& rng_;
  std::set<std::string>& taken_;
  std::string consonants_;
  std::string vowels_;
};

struct Concepts {
  std::vector<std::vector<std::string>> keywords;  // per intent
  std::vector<std::string> fillers;
  std::vector<std::vector<std::vector<std::string>>> replies;  // per intent, per variant
};

// A message/reply drawn in pivot words, before rendering.
struct Sample {
  std::vector<std::string> message;
  std::vector<std::string> reply;
};

Concepts make_concepts(const SynthConfig& cfg, WordMaker& maker, Rng& rng) {
  Concepts c;
  c.keywords.resize(cfg.intents);
  for (auto& k : c.keywords) {
    for (std::size_t i = 0; i < cfg.keywords_per_intent; ++i) k.push_back(maker.make());
  }
  for (std::size_t i = 0; i < cfg.filler_words; ++i) c.fillers.push_back(maker.make());
  std::vector<std::string> reply_words;
  for (std::size_t i = 0; i < cfg.reply_vocabulary; ++i) reply_words.push_back(maker.make());

  std::set<std::vector<std::string>> seen;
  std::uniform_int_distribution<std::size_t> len(2, 4);
  std::uniform_int_distribution<std::size_t> word(0, reply_words.size() - 1);
  c.replies.resize(cfg.intents);
  for (auto& variants : c.replies) {
    while (variants.size() < cfg.replies_per_intent) {
      std::vector<std::string> r(len(rng));
      for (auto& w : r) w = reply_words[word(rng)];
      if (seen.insert(r).second) variants.push_back(std::move(r));
    }
  }
  return c;
}

Sample draw_sample(const SynthConfig& cfg, const Concepts& c, std::size_t rotation, Rng& rng) {
  std::uniform_int_distribution<std::size_t> intent_dist(0, cfg.intents - 1);
  const std::size_t intent = intent_dist(rng);
  Sample s;

  std::vector<std::string> keys = c.keywords[intent];
  std::shuffle(keys.begin(), keys.end(), rng);
  std::uniform_int_distribution<std::size_t> nkeys(2, std::min<std::size_t>(3, keys.size()));
  keys.resize(std::min(keys.size(), nkeys(rng)));
  s.message = keys;
  std::uniform_int_distribution<std::size_t> nfill(1, 3);
  std::uniform_int_distribution<std::size_t> filler(0, c.fillers.size() - 1);
  for (std::size_t i = nfill(rng); i > 0; --i) s.message.push_back(c.fillers[filler(rng)]);
  std::bernoulli_distribution noisy(cfg.noise_keyword_rate);
  if (noisy(rng) && cfg.intents > 1) {
    std::size_t other = intent_dist(rng);
    if (other == intent) other = (other + 1) % cfg.intents;
    std::uniform_int_distribution<std::size_t> k(0, c.keywords[other].size() - 1);
    s.message.push_back(c.keywords[other][k(rng)]);
  }
  std::shuffle(s.message.begin(), s.message.end(), rng);

  // Reply variant j has weight 0.5^((j + rotation) mod R).
  const std::size_t r = c.replies[intent].size();
  std::vector<double> weights(r);
  for (std::size_t j = 0; j < r; ++j) weights[j] = std::pow(0.5, static_cast<double>((j + rotation) % r));
  std::discrete_distribution<std::size_t> variant(weights.begin(), weights.end());
  s.reply = c.replies[intent][variant(rng)];
  return s;
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

using Rendering = std::map<std::string, std::string>;

std::string render(const std::vector<std::string>& words, const Rendering& rendering) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    auto it = rendering.find(w);
    out += it == rendering.end() ? w : it->second;
  }
  return out;
}

std::vector<std::string> all_words(const Concepts& c) {
  std::set<std::string> words(c.fillers.begin(), c.fillers.end());
  for (const auto& k : c.keywords) words.insert(k.begin(), k.end());
  for (const auto& variants : c.replies) {
    for (const auto& r : variants) words.insert(r.begin(), r.end());
  }
  return {words.begin(), words.end()};
}

void check_config(const SynthConfig& cfg) {
  if (cfg.intents == 0 || cfg.keywords_per_intent < 2 || cfg.filler_words == 0 ||
      cfg.replies_per_intent == 0 || cfg.reply_vocabulary < 2) {
    throw InvalidArgument("synthetic world needs intents, >= 2 keywords per intent, fillers and replies");
  }
  for (double rate : {cfg.noise_keyword_rate, cfg.cognate_rate, cfg.lexicon_entry_rate}) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw InvalidArgument("synthetic rates must be in [0, 1]");
  }
  std::set<LanguageTag> langs;
  auto add = [&](const LanguageTag& l) {
    if (l.empty() || l == kUnknownLanguage || l.find_first_of(" _/") != std::string::npos) {
      throw InvalidArgument("bad synthetic language tag '" + l + "'");
    }
    if (!langs.insert(l).second) throw InvalidArgument("language '" + l + "' listed twice");
  };
  for (const auto& l : cfg.eur_languages) add(l);
  for (const auto& l : cfg.nam_languages) add(l);
  for (const auto& l : cfg.lrl_languages) add(l);
  if (!langs.contains(cfg.pivot)) add(cfg.pivot);
  if (std::find(cfg.eur_languages.begin(), cfg.eur_languages.end(), cfg.pivot) !=
          cfg.eur_languages.end() ||
      std::find(cfg.lrl_languages.begin(), cfg.lrl_languages.end(), cfg.pivot) !=
          cfg.lrl_languages.end()) {
    throw InvalidArgument("the pivot language must belong to NAM");
  }
}

nlohmann::json config_json(const SynthConfig& c) {
  return {{"seed", c.seed},
          {"pivot", c.pivot},
          {"eur_languages", c.eur_languages},
          {"nam_languages", c.nam_languages},
          {"lrl_languages", c.lrl_languages},
          {"intents", c.intents},
          {"keywords_per_intent", c.keywords_per_intent},
          {"filler_words", c.filler_words},
          {"replies_per_intent", c.replies_per_intent},
          {"reply_vocabulary", c.reply_vocabulary},
          {"noise_keyword_rate", c.noise_keyword_rate},
          {"train_pairs_per_language", c.train_pairs_per_language},
          {"test_pairs_per_language", c.test_pairs_per_language},
          {"cognate_rate", c.cognate_rate},
          {"lexicon_entry_rate", c.lexicon_entry_rate},
          {"parallel_pairs_per_language", c.parallel_pairs_per_language},
          {"monolingual_per_language", c.monolingual_per_language},
          {"profile_texts_per_language", c.profile_texts_per_language}};
}

}  // namespace

SynthWorld generate_synth(const SynthConfig& config) {
  check_config(config);
  SynthWorld world;
  world.config = config;
  if (std::find(world.config.nam_languages.begin(), world.config.nam_languages.end(),
                config.pivot) == world.config.nam_languages.end()) {
    world.config.nam_languages.insert(world.config.nam_languages.begin(), config.pivot);
  }
  const SynthConfig& cfg = world.config;

  Rng rng(cfg.seed);
  std::set<std::string> taken;
  WordMaker pivot_maker(rng, taken);
  const Concepts concepts = make_concepts(cfg, pivot_maker, rng);
  const std::vector<std::string> words = all_words(concepts);

  for (const auto& l : cfg.eur_languages) world.languages.push_back({l, Region::kEUR, false});
  for (const auto& l : cfg.nam_languages) world.languages.push_back({l, Region::kNAM, false});
  for (const auto& l : cfg.lrl_languages) world.languages.push_back({l, Region::kLRL, true});

  // Word renderings of every language; the pivot renders itself.
  std::map<LanguageTag, Rendering> renderings;
  std::map<LanguageTag, std::size_t> rotation;
  std::size_t hrl_index = 0;
  for (const auto& lang : world.languages) {
    if (lang.lang == cfg.pivot) {
      renderings[lang.lang] = {};
      rotation[lang.lang] = 0;
      ++hrl_index;
      continue;
    }
    WordMaker maker(rng, taken);
    std::bernoulli_distribution keep(lang.low_resource ? 1.0 - cfg.lexicon_entry_rate
                                                       : cfg.cognate_rate);
    Rendering r;
    PseudoLexicon lexicon = PseudoLexicon::suffix_rule(cfg.pivot, lang.lang);
    for (const auto& w : words) {
      if (keep(rng)) {
        r[w] = w + "_" + lang.lang;
      } else {
        r[w] = maker.make();
        if (lang.low_resource) lexicon.entries[w] = r[w];
      }
    }
    if (lang.low_resource) {
      world.lexicons.emplace(lang.lang, std::move(lexicon));
      rotation[lang.lang] = 0;
    } else {
      rotation[lang.lang] = hrl_index++ % cfg.replies_per_intent;
    }
    renderings[lang.lang] = std::move(r);
  }

  auto make_shard = [&](Region region, const LanguageTag& lang, const std::string& origin) {
    RegionShard shard;
    shard.info.region = region;
    shard.info.languages = {lang};
    shard.info.origin_path = origin;
    return shard;
  };

  for (const auto& lang : world.languages) {
    const std::string key = shard_key(lang.region, lang.lang);
    for (int part = 0; part < 2; ++part) {
      const std::size_t n = part == 0 ? cfg.train_pairs_per_language : cfg.test_pairs_per_language;
      RegionShard shard = make_shard(lang.region, lang.lang, key);
      for (std::size_t i = 0; i < n; ++i) {
        const Sample s = draw_sample(cfg, concepts, rotation[lang.lang], rng);
        MessageReplyPair pair{join(s.message), join(s.reply), lang.lang, lang.region};
        if (lang.low_resource) {
          pair.lang = cfg.pivot;
          pair = pseudo_translate(pair, world.lexicons.at(lang.lang), lang.lang);
        } else {
          pair.message = render(s.message, renderings[lang.lang]);
          pair.reply = render(s.reply, renderings[lang.lang]);
        }
        shard.pairs.push_back(std::move(pair));
      }
      (part == 0 ? world.train : world.test)[key] = std::move(shard);
    }
  }

  // The pivot's data is also available inside the low-resource region.
  if (!cfg.lrl_languages.empty()) {
    const std::string key = shard_key(Region::kLRL, cfg.pivot);
    for (int part = 0; part < 2; ++part) {
      const std::size_t n = part == 0 ? cfg.train_pairs_per_language : cfg.test_pairs_per_language;
      RegionShard shard = make_shard(Region::kLRL, cfg.pivot, key);
      for (std::size_t i = 0; i < n; ++i) {
        const Sample s = draw_sample(cfg, concepts, 0, rng);
        shard.pairs.push_back({join(s.message), join(s.reply), cfg.pivot, Region::kLRL});
      }
      (part == 0 ? world.train : world.test)[key] = std::move(shard);
    }
  }

  for (const auto& lang : world.languages) {
    const Rendering& r = renderings[lang.lang];
    auto render_text = [&](const std::vector<std::string>& w) {
      return lang.low_resource ? world.lexicons.at(lang.lang).translate_text(join(w))
                               : render(w, r);
    };
    auto header = [&](const std::string& origin) {
      ShardInfo info;
      info.region = lang.region;
      info.languages = {lang.lang};
      if (lang.lang != cfg.pivot) info.languages.insert(cfg.pivot);
      info.public_auxiliary = true;
      info.origin_path = origin;
      return info;
    };

    if (lang.lang != cfg.pivot) {
      ParallelCorpus parallel;
      parallel.info = header("public/tlm_" + lang.lang);
      for (std::size_t i = 0; i < cfg.parallel_pairs_per_language; ++i) {
        const Sample s = draw_sample(cfg, concepts, rotation[lang.lang], rng);
        const auto& side = i % 2 == 0 ? s.message : s.reply;
        parallel.pairs.push_back({join(side), cfg.pivot, render_text(side), lang.lang});
      }
      world.parallel[lang.lang] = std::move(parallel);
    }

    MonolingualCorpus mono;
    mono.info = header("public/mlm_" + lang.lang);
    mono.info.languages = {lang.lang};
    MonolingualCorpus lid = mono;
    lid.info.origin_path = "public/lid_" + lang.lang;
    for (std::size_t i = 0; i < cfg.monolingual_per_language; ++i) {
      const Sample s = draw_sample(cfg, concepts, rotation[lang.lang], rng);
      mono.texts.push_back({render_text(i % 2 == 0 ? s.message : s.reply), lang.lang});
    }
    for (std::size_t i = 0; i < cfg.profile_texts_per_language; ++i) {
      const Sample s = draw_sample(cfg, concepts, rotation[lang.lang], rng);
      lid.texts.push_back({render_text(s.message), lang.lang});
    }
    world.monolingual[lang.lang] = std::move(mono);
    world.profile_texts[lang.lang] = std::move(lid);
  }
  return world;
}

void write_synth(const SynthWorld& world, const std::filesystem::path& root) {
  for (const auto& [key, shard] : world.train) {
    write_shard(root / (key + ".train.jsonl"), shard);
  }
  for (const auto& [key, shard] : world.test) {
    write_shard(root / (key + ".test.jsonl"), shard);
  }
  for (const auto& [lang, corpus] : world.parallel) {
    write_parallel_corpus(root / "public" / ("tlm_" + lang + ".jsonl"), corpus);
  }
  for (const auto& [lang, corpus] : world.monolingual) {
    write_monolingual_corpus(root / "public" / ("mlm_" + lang + ".jsonl"), corpus);
  }
  for (const auto& [lang, corpus] : world.profile_texts) {
    write_monolingual_corpus(root / "public" / ("lid_" + lang + ".jsonl"), corpus);
  }
  for (const auto& [lang, lexicon] : world.lexicons) {
    lexicon.save(root / "lexicons" / (world.config.pivot + "-" + lang + ".json"));
  }
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& l : world.languages) {
    langs.push_back({{"lang", l.lang},
                     {"region", std::string(to_string(l.region))},
                     {"low_resource", l.low_resource}});
  }
  detail::write_file_atomic(root / "synth.json",
                            nlohmann::json{{"config", config_json(world.config)},
                                           {"languages", langs}}
                                    .dump(2) +
                                "\n");
}

}  // namespace polyreply
