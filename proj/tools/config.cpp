#include "config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "polyreply/error.hpp"

namespace polyreply::app {

namespace pt = boost::property_tree;

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  auto flush = [&] {
    const auto b = item.find_first_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
    item.clear();
  };
  for (char c : text) {
    if (c == ',') {
      flush();
    } else {
      item.push_back(c);
    }
  }
  flush();
  return out;
}

const StageSection& ExperimentConfig::stage(const std::string& name) const {
  auto it = stages.find(name);
  if (it == stages.end()) throw InvalidArgument("no stage section [" + name + "] in " + source.string());
  return it->second;
}

namespace {

template <typename T>
void read(const pt::ptree& section, const std::string& key, T& value) {
  try {
    value = section.get<T>(key, value);
  } catch (const pt::ptree_error& e) {
    throw InvalidArgument("bad value for '" + key + "': " + e.what());
  }
}

bool read_bool(const pt::ptree& section, const std::string& key, bool fallback) {
  const auto text = section.get_optional<std::string>(key);
  if (!text) return fallback;
  if (*text == "true" || *text == "1" || *text == "yes") return true;
  if (*text == "false" || *text == "0" || *text == "no") return false;
  throw InvalidArgument("bad boolean for '" + key + "': " + *text);
}

void read_list(const pt::ptree& section, const std::string& key, std::vector<std::string>& value) {
  if (auto text = section.get_optional<std::string>(key)) value = split_list(*text);
}

StageSection read_stage(const std::string& name, const pt::ptree& s, std::uint64_t run_seed) {
  StageSection out;
  StageConfig& c = out.stage;
  c.name = s.get<std::string>("name", name);
  c.region = parse_region(s.get<std::string>("region", "EUR"));
  read_list(s, "languages", c.sr_languages);
  c.auxiliary = parse_auxiliary_task(s.get<std::string>("auxiliary", "none"));
  read(s, "task_proportion", c.task_proportion);
  read(s, "peak_lr", c.peak_lr);
  read(s, "warmup_fraction", c.warmup_fraction);
  read(s, "epochs", c.epochs);
  read(s, "batch_size", c.batch_size);
  read(s, "grad_accumulation", c.grad_accumulation);
  c.freeze = parse_freeze_selector(s.get<std::string>("freeze", "embedding"));
  c.use_adapters = read_bool(s, "use_adapters", false);
  read_list(s, "adapter_languages", c.adapter_languages);
  read(s, "validation_fraction", c.validation_fraction);
  read(s, "clip_norm", c.clip_norm);
  c.seed = run_seed;
  read(s, "seed", c.seed);
  read(s, "weight_decay", c.adam.weight_decay);
  out.auxiliary_languages = c.sr_languages;
  read_list(s, "auxiliary_languages", out.auxiliary_languages);
  c.validate();
  return out;
}

}  // namespace

ExperimentConfig load_config(const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw InvalidArgument("cannot read config: " + std::string(e.what()));
  }
  ExperimentConfig cfg;
  cfg.source = path;
  const pt::ptree empty;
  auto section = [&](const std::string& name) -> const pt::ptree& {
    auto it = tree.find(name);
    return it == tree.not_found() ? empty : it->second;
  };

  const auto& run = section("run");
  read(run, "seed", cfg.seed);
  cfg.data_root = run.get<std::string>("data_root", cfg.data_root.string());
  cfg.out = run.get<std::string>("out", cfg.out.string());
  read(run, "pivot", cfg.pivot);

  auto& sy = cfg.synth;
  const auto& s = section("synth");
  sy.pivot = cfg.pivot;
  read(s, "seed", sy.seed);
  read_list(s, "eur_languages", sy.eur_languages);
  read_list(s, "nam_languages", sy.nam_languages);
  read_list(s, "lrl_languages", sy.lrl_languages);
  read(s, "intents", sy.intents);
  read(s, "keywords_per_intent", sy.keywords_per_intent);
  read(s, "filler_words", sy.filler_words);
  read(s, "replies_per_intent", sy.replies_per_intent);
  read(s, "reply_vocabulary", sy.reply_vocabulary);
  read(s, "noise_keyword_rate", sy.noise_keyword_rate);
  read(s, "train_pairs_per_language", sy.train_pairs_per_language);
  read(s, "test_pairs_per_language", sy.test_pairs_per_language);
  read(s, "cognate_rate", sy.cognate_rate);
  read(s, "lexicon_entry_rate", sy.lexicon_entry_rate);
  read(s, "parallel_pairs_per_language", sy.parallel_pairs_per_language);
  read(s, "monolingual_per_language", sy.monolingual_per_language);
  read(s, "profile_texts_per_language", sy.profile_texts_per_language);

  const auto& m = section("model");
  read(m, "vocab_size", cfg.model.vocab_size);
  read(m, "vocab_hash_seed", cfg.model.vocab_hash_seed);
  read(m, "embed_dim", cfg.model.embed_dim);
  read(m, "hidden_dim", cfg.model.hidden_dim);
  read(m, "encoder_layers", cfg.model.encoder_layers);
  read(m, "adapter_dim", cfg.model.adapter_dim);
  if (auto placement = m.get_optional<std::string>("adapter_placement")) {
    cfg.model.adapter_placement = parse_adapter_placement(*placement);
  }
  read(m, "max_msg_len", cfg.model.max_msg_len);
  read(m, "max_reply_len", cfg.model.max_reply_len);
  cfg.model.validate();

  const auto& r = section("responses");
  read(r, "cap", cfg.responses.cap);
  read(r, "min_count", cfg.responses.min_count);
  read(r, "golden_fraction", cfg.responses.golden_fraction);

  const auto& inf = section("inference");
  read(inf, "alpha", cfg.inference.alpha);
  read(inf, "n1", cfg.inference.n1);
  read(inf, "n2", cfg.inference.n2);
  read(inf, "max_message_tokens", cfg.inference.max_message_tokens);
  read(inf, "lid_threshold", cfg.inference.lid_threshold);
  read(inf, "cluster_jaccard", cfg.inference.cluster_jaccard);

  const auto& ev = section("eval");
  read(ev, "mrr_cutoff", cfg.eval.mrr_cutoff);
  if (auto w = ev.get_optional<std::string>("rouge_weights")) {
    const auto parts = split_list(*w);
    if (parts.size() != 3) throw InvalidArgument("rouge_weights needs three values");
    for (std::size_t i = 0; i < 3; ++i) cfg.eval.rouge_weights[i] = std::stod(parts[i]);
    cfg.eval.normalized_weights();
  }

  for (const auto& [name, sec] : tree) {
    if (name.rfind("stage", 0) == 0 || name == "replay") {
      try {
        cfg.stages.emplace(name, read_stage(name, sec, cfg.seed));
      } catch (const InvalidArgument& e) {
        throw InvalidArgument("[" + name + "]: " + e.what());
      }
    }
  }
  const auto& p = section("pipeline");
  read_list(p, "hrl_stages", cfg.hrl_stages);
  read(p, "lrl_stage_cl", cfg.lrl_stage_cl);
  read(p, "lrl_stage_adp", cfg.lrl_stage_adp);
  read(p, "replay", cfg.replay_stage);
  for (const auto& n : cfg.hrl_stages) cfg.stage(n);
  for (const auto* n : {&cfg.lrl_stage_cl, &cfg.lrl_stage_adp, &cfg.replay_stage}) {
    if (!n->empty()) cfg.stage(*n);
  }
  return cfg;
}

}  // namespace polyreply::app
