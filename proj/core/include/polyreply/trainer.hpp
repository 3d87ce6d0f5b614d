#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "polyreply/corpus.hpp"
#include "polyreply/model.hpp"
#include "polyreply/objectives.hpp"

namespace polyreply {

enum class AuxiliaryTask { kNone, kMLM, kTLM };

std::string_view to_string(AuxiliaryTask task);
AuxiliaryTask parse_auxiliary_task(std::string_view text);

struct AdamHyperparams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

struct StageConfig {
  std::string name;
  Region region = Region::kEUR;
  std::vector<LanguageTag> sr_languages;
  AuxiliaryTask auxiliary = AuxiliaryTask::kNone;
  /// Fraction of an epoch's batches given to the auxiliary task.
  double task_proportion = 0.5;
  double peak_lr = 5e-4;
  double warmup_fraction = 0.1;
  int epochs = 30;
  int batch_size = 64;
  /// Batches whose gradients are summed before one optimizer step.
  int grad_accumulation = 1;
  FreezeSelector freeze = FreezeSelector::kEmbedding;
  bool use_adapters = false;
  /// Languages that receive adapters when use_adapters is set.
  std::vector<LanguageTag> adapter_languages;
  /// Held out of each shard for epoch selection.
  double validation_fraction = 0.1;
  /// Global-norm clipping threshold; 0 disables.
  double clip_norm = 0.0;
  std::uint64_t seed = 1;
  AdamHyperparams adam;

  void validate() const;
};

/// Per-tensor Adam moments for the unfrozen tensors of one encoder.
template <typename T>
struct AdamState {
  AdamHyperparams hyper;
  std::vector<std::optional<Matrix<T>>> first_moment;
  std::vector<std::optional<Matrix<T>>> second_moment;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(const Encoder<T>& encoder, AdamHyperparams hyper);
};

/// Bias-corrected Adam with decoupled weight decay on unfrozen tensors. `grads` must
/// hold exactly the unfrozen tensors with matching shapes.
template <typename T>
void adam_step(Encoder<T>& encoder, const GradientSet<T>& grads, AdamState<T>& state, double lr);

/// Linear warmup over the first warmup_fraction of steps to peak, then linear decay to
/// zero at the last step.
double learning_rate(std::int64_t step, std::int64_t total_steps, double peak,
                     double warmup_fraction);

enum class BatchKind { kSR, kAuxiliary };

/// Deterministic interleave of `sr_batches` SR batches with
/// round(proportion * total) auxiliary batches spread evenly, first batch auxiliary.
std::vector<BatchKind> batch_schedule(std::size_t sr_batches, double proportion);

/// Inputs of one stage. Every corpus must pass the region guard for the stage region.
struct StageData {
  std::vector<RegionShard> shards;
  std::vector<ParallelCorpus> parallel;
  std::vector<MonolingualCorpus> monolingual;
};

struct EpochLog {
  int epoch = 0;
  std::size_t sr_batches = 0;
  std::size_t auxiliary_batches = 0;
  double sr_loss = 0.0;
  double auxiliary_loss = 0.0;
  std::map<LanguageTag, double> validation_loss;
  double validation_total = 0.0;
};

struct TrainReport {
  std::string stage;
  Region region = Region::kEUR;
  std::vector<EpochLog> epochs;
  /// -1 when no epoch ran.
  int selected_epoch = -1;
  std::vector<AccessRecord> access_log;
  /// Origin path of every shard a batch was drawn from, with batch counts.
  std::map<std::string, std::size_t> batches_per_source;

  std::string to_json() const;
};

struct StageOptions {
  /// Shared log for the whole run; the stage also keeps its own copy in the report.
  AccessLog* access_log = nullptr;
  /// When set, the best-so-far checkpoint is written atomically after every epoch.
  std::optional<std::filesystem::path> epoch_checkpoint;
  /// Provenance label; defaults to the stage name.
  std::optional<std::string> provenance_label;
  std::function<void(const EpochLog&)> on_epoch;
};

struct StageResult {
  Checkpoint checkpoint;
  TrainReport report;
};

/// Trains one continual-learning stage starting from `input`. Throws RegionViolation
/// before touching data when any corpus is denied, NumericalError on divergence.
StageResult train_stage(const Checkpoint& input, const StageConfig& config, const StageData& data,
                        const StageOptions& options = {});

/// SR-only continuation on earlier-region shards; provenance "+<REGION>".
StageResult replay_stage(const Checkpoint& input, const StageConfig& config, const StageData& data,
                         const StageOptions& options = {});

struct PipelineOptions {
  LanguageTag pivot_language = "en";
  /// Regions the stages must follow, in order. Empty means unchecked.
  std::vector<Region> region_order{Region::kEUR, Region::kNAM, Region::kLRL};
  AccessLog* access_log = nullptr;
  std::function<std::optional<std::filesystem::path>(const StageConfig&)> epoch_checkpoint;
  std::function<void(const StageConfig&, const EpochLog&)> on_epoch;
};

struct PipelineResult {
  /// Last successfully trained checkpoint (the input when stage one failed).
  Checkpoint checkpoint;
  std::vector<Checkpoint> stage_checkpoints;
  std::vector<TrainReport> reports;
  /// Set when a stage failed; the pipeline stopped there.
  std::exception_ptr failure;
};

/// Runs stages in order, each consuming the previous checkpoint. `load_data` is called
/// once per stage, after the stage's configuration has been validated.
PipelineResult run_pipeline(const Checkpoint& initial, const std::vector<StageConfig>& stages,
                            const std::function<StageData(const StageConfig&)>& load_data,
                            const PipelineOptions& options = {});

/// Checks region order and that the pivot language trains in the last non-LRL stage.
void validate_pipeline(const std::vector<StageConfig>& stages, const PipelineOptions& options);

}  // namespace polyreply
