#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "polyreply/eval.hpp"
#include "polyreply/inference.hpp"
#include "polyreply/model.hpp"
#include "polyreply/synth.hpp"
#include "polyreply/trainer.hpp"

namespace polyreply::app {

struct ResponseOptions {
  std::size_t cap = 200;
  std::uint64_t min_count = 3;
  double golden_fraction = 0.5;
};

/// A stage section plus the CLI-only data selection keys.
struct StageSection {
  StageConfig stage;
  /// Languages whose public auxiliary corpora feed the stage; defaults to the SR languages.
  std::vector<LanguageTag> auxiliary_languages;
};

struct ExperimentConfig {
  std::filesystem::path source;
  std::uint64_t seed = 7;
  std::filesystem::path data_root = "data";
  std::filesystem::path out = "runs/experiment";
  LanguageTag pivot = "en";

  SynthConfig synth;
  ModelConfig model;
  ResponseOptions responses;
  InferenceConfig inference;
  EvalConfig eval;

  std::map<std::string, StageSection> stages;
  std::vector<std::string> hrl_stages;
  std::string lrl_stage_cl;
  std::string lrl_stage_adp;
  std::string replay_stage;

  const StageSection& stage(const std::string& name) const;
};

/// INI file. Relative data_root and out paths resolve against the current directory.
ExperimentConfig load_config(const std::filesystem::path& path);

std::vector<std::string> split_list(const std::string& text);

}  // namespace polyreply::app
