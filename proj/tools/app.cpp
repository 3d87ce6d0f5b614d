#include "app.hpp"

#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "polyreply/corpus.hpp"
#include "polyreply/error.hpp"
#include "polyreply/eval.hpp"
#include "polyreply/inference.hpp"
#include "polyreply/responses.hpp"
#include "polyreply/synth.hpp"
#include "polyreply/trainer.hpp"

namespace polyreply::app {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::string out;
  std::string stage;
  std::string mode = "cl";
  std::string ablate;
  std::vector<std::string> checkpoints;
  std::vector<std::string> shards;
  std::vector<std::string> languages;
  std::vector<std::string> labels;
  std::string graph;
  std::string socket;
  std::size_t max_connections = 0;
};

struct Streams {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

struct LanguageInfo {
  LanguageTag lang;
  Region region;
  bool low_resource;
};

ExperimentConfig configure(const Options& o) {
  if (o.config.empty()) throw InvalidArgument("--config is required");
  ExperimentConfig cfg = load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    for (auto& [name, s] : cfg.stages) s.stage.seed = *o.seed;
  }
  if (o.alpha) cfg.inference.alpha = *o.alpha;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

std::vector<LanguageInfo> world_languages(const ExperimentConfig& cfg) {
  const fs::path path = cfg.data_root / "synth.json";
  std::ifstream in(path);
  if (!in) throw DataError("no synth.json under " + cfg.data_root.string() + "; run `synth` first");
  std::vector<LanguageInfo> out;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& l : j.at("languages")) {
      out.push_back({l.at("lang").get<std::string>(), parse_region(l.at("region").get<std::string>()),
                     l.at("low_resource").get<bool>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad " + path.string() + ": " + e.what());
  }
  return out;
}

fs::path shard_file(const ExperimentConfig& cfg, Region region, const LanguageTag& lang,
                    const char* split) {
  return cfg.data_root / std::string(to_string(region)) / (lang + "." + split + ".jsonl");
}

// Checks the header before any record is read; a denied file is logged and never opened further.
ShardInfo guard_header(const fs::path& path, const StageConfig& stage, AccessLog& log) {
  if (!fs::exists(path)) throw DataError("missing corpus " + path.string());
  ShardInfo info = read_shard_header(path);
  if (assert_region_access(stage.region, info) == Access::kDeny) {
    log.append({stage.name, stage.region, path.string(), info.region, info.public_auxiliary,
                Access::kDeny});
    throw RegionViolation("stage '" + stage.name + "' (" + std::string(to_string(stage.region)) +
                          ") may not read " + path.string() + " (" +
                          std::string(to_string(info.region)) + ")");
  }
  return info;
}

AuxiliaryTask ablated(AuxiliaryTask task, const std::string& ablate) {
  if (ablate.empty()) return task;
  if (ablate == "tlm=off") return task == AuxiliaryTask::kTLM ? AuxiliaryTask::kNone : task;
  if (ablate == "tlm=mlm") return task == AuxiliaryTask::kTLM ? AuxiliaryTask::kMLM : task;
  throw InvalidArgument("--ablate must be tlm=off or tlm=mlm");
}

StageData load_stage_data(const ExperimentConfig& cfg, const StageSection& section,
                          const std::vector<std::string>& extra_shards, AccessLog& log) {
  const StageConfig& stage = section.stage;
  StageData data;
  std::vector<fs::path> shard_paths;
  for (const auto& lang : stage.sr_languages) {
    shard_paths.push_back(shard_file(cfg, stage.region, lang, "train"));
  }
  for (const auto& extra : extra_shards) shard_paths.emplace_back(extra);
  for (const auto& path : shard_paths) {
    const ShardInfo info = guard_header(path, stage, log);
    data.shards.push_back(load_shard(path, info.region));
  }
  for (const auto& lang : section.auxiliary_languages) {
    if (stage.auxiliary == AuxiliaryTask::kTLM) {
      if (lang == cfg.pivot) continue;
      const fs::path path = cfg.data_root / "public" / ("tlm_" + lang + ".jsonl");
      guard_header(path, stage, log);
      data.parallel.push_back(load_parallel_corpus(path));
    } else if (stage.auxiliary == AuxiliaryTask::kMLM) {
      const fs::path path = cfg.data_root / "public" / ("mlm_" + lang + ".jsonl");
      guard_header(path, stage, log);
      data.monolingual.push_back(load_monolingual_corpus(path));
    }
  }
  return data;
}

Checkpoint initial_checkpoint(const ExperimentConfig& cfg) {
  Rng rng(cfg.seed);
  return Checkpoint{Encoder<float>::random(cfg.model, rng), {}, {}};
}

Checkpoint checkpoint_or_initial(const ExperimentConfig& cfg, const std::vector<std::string>& paths) {
  if (paths.size() > 1) throw InvalidArgument("exactly one --checkpoint expected");
  if (paths.empty()) return initial_checkpoint(cfg);
  Checkpoint ckpt = load_checkpoint(paths.front());
  if (ckpt.config() != cfg.model) {
    throw InvalidArgument("checkpoint model configuration differs from [model] in " +
                          cfg.source.string());
  }
  return ckpt;
}

std::map<LanguageTag, ResponseSet> response_sets(const ExperimentConfig& cfg,
                                                 const std::vector<LanguageInfo>& langs) {
  std::map<LanguageTag, ResponseSet> sets;
  std::optional<ResponseSet> pivot;
  for (const auto& l : langs) {
    if (l.low_resource) continue;
    const auto path = shard_file(cfg, l.region, l.lang, "train");
    ResponseSet set = mine_responses(load_shard(path, l.region), l.lang, cfg.responses.cap,
                                     cfg.responses.min_count);
    if (l.lang == cfg.pivot) pivot = set;
    sets.emplace(l.lang, std::move(set));
  }
  for (const auto& l : langs) {
    if (!l.low_resource) continue;
    if (!pivot) {
      const auto all = world_languages(cfg);
      auto it = std::find_if(all.begin(), all.end(), [&](const auto& x) { return x.lang == cfg.pivot; });
      if (it == all.end()) throw DataError("low-resource response sets need the pivot language");
      pivot = mine_responses(load_shard(shard_file(cfg, it->region, it->lang, "train"), it->region),
                             it->lang, cfg.responses.cap, cfg.responses.min_count);
    }
    const auto lexicon =
        PseudoLexicon::load(cfg.data_root / "lexicons" / (cfg.pivot + "-" + l.lang + ".json"));
    sets.emplace(l.lang, transcreate(*pivot, lexicon, l.lang));
  }
  return sets;
}

std::vector<LanguageInfo> selected(const std::vector<LanguageInfo>& langs,
                                   const std::vector<std::string>& filter) {
  if (filter.empty()) return langs;
  std::vector<LanguageInfo> out;
  for (const auto& want : filter) {
    auto it = std::find_if(langs.begin(), langs.end(), [&](const auto& l) { return l.lang == want; });
    if (it == langs.end()) throw InvalidArgument("unknown language '" + want + "'");
    out.push_back(*it);
  }
  return out;
}

std::vector<LanguageEvalSet> eval_sets(const ExperimentConfig& cfg,
                                       const std::vector<LanguageInfo>& langs,
                                       const std::map<LanguageTag, ResponseSet>& sets) {
  std::vector<LanguageEvalSet> out;
  for (const auto& l : langs) {
    const RegionShard test = load_shard(shard_file(cfg, l.region, l.lang, "test"), l.region);
    const ResponseSet& set = sets.at(l.lang);
    EvalSets split = build_eval_sets(test, {set}, cfg.responses.golden_fraction);
    out.push_back({l.lang, l.region, set, std::move(split.golden), std::move(split.general)});
  }
  return out;
}

LanguageProfiles language_profiles(const ExperimentConfig& cfg,
                                   const std::vector<LanguageInfo>& langs) {
  std::map<LanguageTag, std::vector<std::string>> samples;
  for (const auto& l : langs) {
    const auto corpus =
        load_monolingual_corpus(cfg.data_root / "public" / ("lid_" + l.lang + ".jsonl"));
    for (const auto& t : corpus.texts) samples[t.lang].push_back(t.text);
  }
  return LanguageProfiles::build(samples);
}

fs::path out_dir(const ExperimentConfig& cfg, const Options& o) {
  return o.out.empty() ? cfg.out : fs::path(o.out);
}

void print_epoch(std::ostream& err, const std::string& stage, const EpochLog& e) {
  char line[200];
  std::snprintf(line, sizeof line, "[%s] epoch %d  sr %.4f  aux %.4f  val %.4f\n", stage.c_str(),
                e.epoch, e.sr_loss, e.auxiliary_loss, e.validation_total);
  err << line << std::flush;
}

void write_stage_outputs(const fs::path& dir, const Checkpoint& ckpt, const TrainReport& report) {
  save_checkpoint(ckpt, dir / "checkpoints" / (report.stage + ".ckpt"));
  write_text(dir / "reports" / (report.stage + ".json"), report.to_json() + "\n");
}

int cmd_synth(const Options& o, Streams& s) {
  ExperimentConfig cfg = configure(o);
  if (!o.out.empty()) cfg.data_root = o.out;
  SynthConfig synth = cfg.synth;
  if (o.seed) synth.seed = *o.seed;
  const SynthWorld world = generate_synth(synth);
  write_synth(world, cfg.data_root);
  s.out << "wrote " << world.train.size() << " training shards for " << world.languages.size()
        << " languages to " << cfg.data_root.string() << "\n";
  return kOk;
}

int run_single_stage(const Options& o, Streams& s, bool replay) {
  const ExperimentConfig cfg = configure(o);
  std::string name = o.stage;
  if (replay && name.empty()) name = cfg.replay_stage;
  if (name.empty()) throw InvalidArgument("--stage is required");
  StageSection section = cfg.stage(name);
  section.stage.auxiliary = ablated(section.stage.auxiliary, o.ablate);
  const fs::path dir = out_dir(cfg, o);
  if (replay && o.checkpoints.empty()) throw InvalidArgument("replay needs --checkpoint");
  const Checkpoint input = checkpoint_or_initial(cfg, o.checkpoints);

  AccessLog log;
  StageOptions opts;
  opts.access_log = &log;
  opts.epoch_checkpoint = dir / "checkpoints" / (section.stage.name + ".ckpt");
  opts.on_epoch = [&](const EpochLog& e) { print_epoch(s.err, section.stage.name, e); };
  try {
    const StageData data = load_stage_data(cfg, section, o.shards, log);
    const StageResult result = replay ? replay_stage(input, section.stage, data, opts)
                                      : train_stage(input, section.stage, data, opts);
    write_stage_outputs(dir, result.checkpoint, result.report);
  } catch (...) {
    log.write(dir / "access.log");
    throw;
  }
  log.write(dir / "access.log");
  s.out << "stage " << section.stage.name << " -> "
        << (dir / "checkpoints" / (section.stage.name + ".ckpt")).string() << "\n";
  return kOk;
}

int cmd_pipeline(const Options& o, Streams& s) {
  const ExperimentConfig cfg = configure(o);
  std::vector<std::string> names = cfg.hrl_stages;
  if (o.mode == "cl") {
    names.push_back(cfg.lrl_stage_cl);
  } else if (o.mode == "adp") {
    names.push_back(cfg.lrl_stage_adp);
  } else if (o.mode != "hrl") {
    throw InvalidArgument("--mode must be cl, adp or hrl");
  }
  std::map<std::string, StageSection> by_name;
  std::vector<StageConfig> stages;
  for (const auto& n : names) {
    if (n.empty()) throw InvalidArgument("pipeline stage for mode '" + o.mode + "' is not configured");
    StageSection section = cfg.stage(n);
    section.stage.auxiliary = ablated(section.stage.auxiliary, o.ablate);
    by_name.emplace(section.stage.name, section);
    stages.push_back(section.stage);
  }
  const fs::path dir = out_dir(cfg, o);
  AccessLog log;
  PipelineOptions popts;
  popts.pivot_language = cfg.pivot;
  popts.access_log = &log;
  popts.epoch_checkpoint = [&](const StageConfig& st) -> std::optional<fs::path> {
    return dir / "checkpoints" / (st.name + ".ckpt");
  };
  popts.on_epoch = [&](const StageConfig& st, const EpochLog& e) { print_epoch(s.err, st.name, e); };

  const PipelineResult result = run_pipeline(
      initial_checkpoint(cfg), stages,
      [&](const StageConfig& st) { return load_stage_data(cfg, by_name.at(st.name), {}, log); },
      popts);
  for (std::size_t i = 0; i < result.reports.size(); ++i) {
    write_stage_outputs(dir, result.stage_checkpoints[i], result.reports[i]);
  }
  log.write(dir / "access.log");
  if (result.failure) std::rethrow_exception(result.failure);
  save_checkpoint(result.checkpoint, dir / "final.ckpt");
  s.out << "pipeline";
  for (const auto& p : result.checkpoint.provenance) s.out << ' ' << p;
  s.out << " -> " << (dir / "final.ckpt").string() << "\n";
  return kOk;
}

int cmd_build_responses(const Options& o, Streams& s) {
  const ExperimentConfig cfg = configure(o);
  if (o.checkpoints.size() != 1) throw InvalidArgument("build-responses needs one --checkpoint");
  if (o.out.empty()) throw InvalidArgument("build-responses needs --out");
  Checkpoint ckpt = load_checkpoint(o.checkpoints.front());
  const auto langs = selected(world_languages(cfg), o.languages);
  std::vector<ResponseSet> sets;
  for (auto& [lang, set] : response_sets(cfg, langs)) {
    sets.push_back(precompute_vectors(ckpt.encoder, set));
  }
  const CompositeGraph graph(std::move(ckpt.encoder), std::move(sets), language_profiles(cfg, langs),
                             cfg.inference);
  graph.save(o.out, ckpt.provenance);
  s.out << "graph with " << graph.languages().size() << " languages -> " << o.out << "\n";
  return kOk;
}

int cmd_eval(const Options& o, Streams& s) {
  const ExperimentConfig cfg = configure(o);
  if (o.checkpoints.empty()) throw InvalidArgument("eval needs at least one --checkpoint");
  const auto langs = selected(world_languages(cfg), o.languages);
  const auto sets = eval_sets(cfg, langs, response_sets(cfg, langs));
  std::vector<Checkpoint> ckpts;
  for (const auto& p : o.checkpoints) ckpts.push_back(load_checkpoint(p));
  if (!o.labels.empty() && o.labels.size() != o.checkpoints.size()) {
    throw InvalidArgument("--label must be given once per --checkpoint");
  }
  std::vector<NamedModel> models;
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    const std::string label =
        o.labels.empty() ? fs::path(o.checkpoints[i]).stem().string() : o.labels[i];
    models.push_back({label, &ckpts[i].encoder});
  }
  const EvalReport report = evaluate_models(models, sets, cfg.inference, cfg.eval);
  s.out << report.to_table();
  const fs::path json_path = o.out.empty() ? cfg.out / "reports" / "eval.json" : fs::path(o.out);
  write_text(json_path, report.to_json() + "\n");
  return kOk;
}

int cmd_serve(const Options& o, Streams& s) {
  if (o.graph.empty()) throw InvalidArgument("serve needs --graph");
  const CompositeGraph graph = CompositeGraph::load(o.graph);
  if (!o.socket.empty()) {
    serve_socket(graph, o.socket, o.max_connections);
  } else {
    serve(graph, s.in, s.out);
  }
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv) { return run(argc, argv, std::cin, std::cout, std::cerr); }

int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multilingual suggested-reply training and serving"};
  app.require_subcommand(1);
  Options o;
  Streams streams{in, out, err};

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment INI file");
    sub->add_option("--seed", o.seed, "Override the run seed");
    sub->add_option("--out", o.out, "Output location");
  };
  auto* synth = app.add_subcommand("synth", "Generate the synthetic corpora");
  common(synth);
  auto* stage = app.add_subcommand("train-stage", "Train one stage");
  common(stage);
  stage->add_option("--stage", o.stage, "Stage section name")->required();
  stage->add_option("--checkpoint", o.checkpoints, "Input checkpoint");
  stage->add_option("--shard", o.shards, "Additional shard file");
  stage->add_option("--ablate", o.ablate, "tlm=off or tlm=mlm");
  auto* pipeline = app.add_subcommand("pipeline", "Run the continual-training pipeline");
  common(pipeline);
  pipeline->add_option("--mode", o.mode, "Low-resource stage mode")
      ->check(CLI::IsMember({"cl", "adp", "hrl"}));
  pipeline->add_option("--ablate", o.ablate, "tlm=off or tlm=mlm");
  auto* replay = app.add_subcommand("replay", "Continue SR training on earlier-region shards");
  common(replay);
  replay->add_option("--stage", o.stage, "Replay stage section");
  replay->add_option("--checkpoint", o.checkpoints, "Input checkpoint")->required();
  auto* build = app.add_subcommand("build-responses", "Build a serving graph");
  common(build);
  build->add_option("--checkpoint", o.checkpoints, "Model checkpoint")->required();
  build->add_option("--alpha", o.alpha, "Penalty weight");
  build->add_option("--lang", o.languages, "Restrict to these languages");
  auto* eval = app.add_subcommand("eval", "Evaluate checkpoints");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoints, "Checkpoint, repeatable and ordered")->required();
  eval->add_option("--alpha", o.alpha, "Penalty weight");
  eval->add_option("--lang", o.languages, "Restrict to these languages");
  eval->add_option("--label", o.labels, "Model label, one per checkpoint");
  auto* srv = app.add_subcommand("serve", "Answer newline-delimited JSON requests");
  srv->add_option("--graph", o.graph, "Graph directory")->required();
  srv->add_option("--socket", o.socket, "Unix socket path; stdin/stdout when absent");
  srv->add_option("--max-connections", o.max_connections, "Stop after this many connections");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, streams);
    if (stage->parsed()) return run_single_stage(o, streams, false);
    if (pipeline->parsed()) return cmd_pipeline(o, streams);
    if (replay->parsed()) return run_single_stage(o, streams, true);
    if (build->parsed()) return cmd_build_responses(o, streams);
    if (eval->parsed()) return cmd_eval(o, streams);
    if (srv->parsed()) return cmd_serve(o, streams);
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumericalError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

}  // namespace polyreply::app
