#include "polyreply/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "polyreply/error.hpp"

namespace polyreply {

std::string_view to_string(AuxiliaryTask task) {
  switch (task) {
    case AuxiliaryTask::kNone:
      return "none";
    case AuxiliaryTask::kMLM:
      return "mlm";
    case AuxiliaryTask::kTLM:
      return "tlm";
  }
  return "none";
}

AuxiliaryTask parse_auxiliary_task(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "none" || lower == "off") return AuxiliaryTask::kNone;
  if (lower == "mlm") return AuxiliaryTask::kMLM;
  if (lower == "tlm") return AuxiliaryTask::kTLM;
  throw InvalidArgument("unknown auxiliary task '" + std::string(text) + "'");
}

void StageConfig::validate() const {
  const std::string where = "stage '" + name + "': ";
  if (name.empty()) throw InvalidArgument("stage name must not be empty");
  if (!(task_proportion >= 0.0 && task_proportion <= 1.0)) {
    throw InvalidArgument(where + "task_proportion must be in [0, 1]");
  }
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw InvalidArgument(where + "peak_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw InvalidArgument(where + "warmup_fraction must be in [0, 1]");
  }
  if (epochs < 0) throw InvalidArgument(where + "epochs must not be negative");
  if (batch_size < 1) throw InvalidArgument(where + "batch_size must be positive");
  if (grad_accumulation < 1) throw InvalidArgument(where + "grad_accumulation must be positive");
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw InvalidArgument(where + "validation_fraction must be in [0, 1)");
  }
  if (clip_norm < 0.0) throw InvalidArgument(where + "clip_norm must not be negative");
  if (use_adapters && freeze != FreezeSelector::kAllExceptAdapters) {
    throw InvalidArgument(where + "adapters require freeze = all_except_adapters");
  }
}

template <typename T>
AdamState<T>::AdamState(const Encoder<T>& encoder, AdamHyperparams h) : hyper(h) {
  const auto& tensors = encoder.tensors();
  first_moment.resize(tensors.size());
  second_moment.resize(tensors.size());
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].frozen) continue;
    const auto& v = tensors[i].value;
    first_moment[i] = Matrix<T>::Zero(v.rows(), v.cols());
    second_moment[i] = Matrix<T>::Zero(v.rows(), v.cols());
  }
}

template <typename T>
void adam_step(Encoder<T>& encoder, const GradientSet<T>& grads, AdamState<T>& state, double lr) {
  auto& tensors = encoder.tensors();
  if (grads.size() != tensors.size() || state.first_moment.size() != tensors.size()) {
    throw InvalidArgument("gradient set does not match the encoder");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const bool expect = !tensors[i].frozen;
    if (grads.has(i) != expect || state.first_moment[i].has_value() != expect) {
      throw InvalidArgument("gradients must cover exactly the unfrozen tensors (" +
                            tensors[i].name + ")");
    }
    if (expect && (grads.at(i).rows() != tensors[i].value.rows() ||
                   grads.at(i).cols() != tensors[i].value.cols())) {
      throw InvalidArgument("gradient shape mismatch for " + tensors[i].name);
    }
  }
  ++state.step;
  const auto& h = state.hyper;
  const T b1 = static_cast<T>(h.beta1);
  const T b2 = static_cast<T>(h.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(state.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(state.step)));
  const T eps = static_cast<T>(h.epsilon);
  const T wd = static_cast<T>(h.weight_decay);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].frozen) continue;
    const auto& g = grads.at(i);
    auto& m = *state.first_moment[i];
    auto& v = *state.second_moment[i];
    auto& p = tensors[i].value;
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
    const auto m_hat = m.array() / c1;
    const auto v_hat = v.array() / c2;
    p.array() -= rate * (m_hat / (v_hat.sqrt() + eps) + wd * p.array());
  }
}

double learning_rate(std::int64_t step, std::int64_t total_steps, double peak,
                     double warmup_fraction) {
  if (total_steps < 1) throw InvalidArgument("total_steps must be positive");
  if (step < 0 || step >= total_steps) throw InvalidArgument("step outside the schedule");
  std::int64_t warmup = 0;
  if (warmup_fraction > 0.0) {
    warmup = std::max<std::int64_t>(
        1, std::llround(warmup_fraction * static_cast<double>(total_steps)));
    warmup = std::min(warmup, total_steps);
  }
  if (step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  // Without warmup the decay itself starts at the peak.
  const std::int64_t span = warmup == 0 ? total_steps - 1 : total_steps - warmup;
  if (span == 0) return peak;
  return peak * static_cast<double>(total_steps - 1 - step) / static_cast<double>(span);
}

std::vector<BatchKind> batch_schedule(std::size_t sr_batches, double proportion) {
  if (!(proportion >= 0.0 && proportion <= 1.0)) throw InvalidArgument("proportion must be in [0, 1]");
  if (proportion <= 0.0 || sr_batches == 0) return std::vector<BatchKind>(sr_batches, BatchKind::kSR);
  if (proportion >= 1.0) return std::vector<BatchKind>(sr_batches, BatchKind::kAuxiliary);
  const auto total = static_cast<std::size_t>(
      std::llround(static_cast<double>(sr_batches) / (1.0 - proportion)));
  const std::size_t aux = total - sr_batches;
  std::vector<BatchKind> out(total, BatchKind::kSR);
  // Batch i is auxiliary when ceil((i + 1) * aux / total) steps past ceil(i * aux / total).
  auto ceil_div = [](std::size_t a, std::size_t b) { return (a + b - 1) / b; };
  for (std::size_t i = 0; i < total; ++i) {
    if (ceil_div((i + 1) * aux, total) > ceil_div(i * aux, total)) out[i] = BatchKind::kAuxiliary;
  }
  return out;
}

std::string TrainReport::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch},
                           {"sr_batches", e.sr_batches},
                           {"auxiliary_batches", e.auxiliary_batches},
                           {"sr_loss", e.sr_loss},
                           {"auxiliary_loss", e.auxiliary_loss},
                           {"validation_loss", e.validation_loss},
                           {"validation_total", e.validation_total}});
  }
  nlohmann::json access = nlohmann::json::array();
  for (const auto& r : access_log) {
    access.push_back({{"stage", r.stage},
                      {"stage_region", std::string(to_string(r.stage_region))},
                      {"shard", r.shard_path},
                      {"shard_region", std::string(to_string(r.shard_region))},
                      {"public_auxiliary", r.public_auxiliary},
                      {"decision", r.decision == Access::kPermit ? "permit" : "deny"}});
  }
  return nlohmann::json{{"stage", stage},
                        {"region", std::string(to_string(region))},
                        {"epochs", epochs_json},
                        {"selected_epoch", selected_epoch},
                        {"access_log", access},
                        {"batches_per_source", batches_per_source}}
      .dump(2);
}

namespace {

struct TrainPair {
  TokenSequence message;
  TokenSequence reply;
  const std::string* source;
};

struct ValidationSet {
  std::vector<TokenSequence> messages;
  std::vector<TokenSequence> replies;
};

template <typename T>
double global_norm(const GradientSet<T>& grads) {
  double sum = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads.has(i)) sum += static_cast<double>(grads.at(i).squaredNorm());
  }
  return std::sqrt(sum);
}

void guard(const StageConfig& config, const ShardInfo& info, AccessLog& local,
           AccessLog* shared, std::vector<std::string>& denied) {
  AccessRecord record{config.name,         config.region, info.origin_path.string(),
                      info.region,         info.public_auxiliary,
                      assert_region_access(config.region, info)};
  if (record.decision == Access::kDeny) denied.push_back(record.shard_path);
  local.append(record);
  if (shared != nullptr) shared->append(record);
}

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

}  // namespace

StageResult train_stage(const Checkpoint& input, const StageConfig& config, const StageData& data,
                        const StageOptions& options) {
  config.validate();
  TrainReport report;
  report.stage = config.name;
  report.region = config.region;

  AccessLog log;
  std::vector<std::string> denied;
  for (const auto& s : data.shards) guard(config, s.info, log, options.access_log, denied);
  for (const auto& p : data.parallel) guard(config, p.info, log, options.access_log, denied);
  for (const auto& m : data.monolingual) guard(config, m.info, log, options.access_log, denied);
  report.access_log = log.records();
  if (!denied.empty()) {
    throw RegionViolation("stage '" + config.name + "' (" + std::string(to_string(config.region)) +
                          ") may not read " + denied.front());
  }
  for (const auto& s : data.shards) {
    for (const auto& p : s.pairs) {
      if (p.region != config.region && !s.info.public_auxiliary) {
        throw RegionViolation("pair from " + std::string(to_string(p.region)) + " in shard " +
                              s.info.origin_path.string());
      }
    }
  }

  const std::string label = options.provenance_label.value_or(config.name);
  StageResult result{input, {}};
  result.checkpoint.provenance.push_back(label);

  Rng rng(config.seed);
  Encoder<float> encoder = input.encoder;
  if (config.use_adapters) {
    encoder.install_adapters(config.adapter_languages.empty() ? config.sr_languages
                                                              : config.adapter_languages,
                             rng);
  }
  encoder.freeze(config.freeze);

  if (config.epochs == 0) {
    result.checkpoint.rng_state = serialize_rng(rng);
    result.report = std::move(report);
    return result;
  }

  const ModelConfig& mc = encoder.config();
  const Vocabulary vocab = mc.vocabulary();
  const auto msg_len = static_cast<std::size_t>(mc.max_msg_len);
  const auto reply_len = static_cast<std::size_t>(mc.max_reply_len);
  const std::set<LanguageTag> wanted(config.sr_languages.begin(), config.sr_languages.end());

  std::vector<TrainPair> train;
  std::map<LanguageTag, ValidationSet> validation;
  for (std::size_t idx = 0; idx < data.shards.size(); ++idx) {
    const auto& shard = data.shards[idx];
    const auto split = split_shard(shard, config.validation_fraction, config.seed + idx);
    const std::string* source = &shard.info.origin_path.native();
    for (std::size_t i : split.train) {
      const auto& p = shard.pairs[i];
      if (!wanted.empty() && !wanted.contains(p.lang)) continue;
      train.push_back({tokenize(p.message, p.lang, msg_len, vocab),
                       tokenize(p.reply, p.lang, reply_len, vocab), source});
    }
    for (std::size_t i : split.heldout) {
      const auto& p = shard.pairs[i];
      if (!wanted.empty() && !wanted.contains(p.lang)) continue;
      auto& v = validation[p.lang];
      v.messages.push_back(tokenize(p.message, p.lang, msg_len, vocab));
      v.replies.push_back(tokenize(p.reply, p.lang, reply_len, vocab));
    }
  }

  std::vector<std::pair<const ParallelPair*, const std::string*>> parallel_pool;
  std::vector<std::pair<const MonolingualText*, const std::string*>> mono_pool;
  if (config.auxiliary == AuxiliaryTask::kTLM) {
    for (const auto& c : data.parallel) {
      for (const auto& p : c.pairs) parallel_pool.emplace_back(&p, &c.info.origin_path.native());
    }
    if (parallel_pool.empty()) throw DataError("stage '" + config.name + "' has no TLM data");
  } else if (config.auxiliary == AuxiliaryTask::kMLM) {
    for (const auto& c : data.monolingual) {
      for (const auto& t : c.texts) mono_pool.emplace_back(&t, &c.info.origin_path.native());
    }
    if (mono_pool.empty()) throw DataError("stage '" + config.name + "' has no MLM data");
  }

  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t sr_batches = (train.size() + batch - 1) / batch;
  const double proportion =
      config.auxiliary == AuxiliaryTask::kNone ? 0.0 : config.task_proportion;
  const auto schedule = batch_schedule(sr_batches, proportion);
  const auto accum = static_cast<std::size_t>(config.grad_accumulation);
  const std::size_t steps_per_epoch = (schedule.size() + accum - 1) / accum;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch) * config.epochs;

  AdamState<float> adam(encoder, config.adam);
  std::int64_t step = 0;
  std::optional<Encoder<float>> best;
  double best_total = 0.0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLog elog;
    elog.epoch = epoch;
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t sr_index = 0;
    GradientSet<float> pending(encoder);
    std::size_t pending_count = 0;

    auto flush = [&] {
      if (pending_count == 0) return;
      if (!pending.empty()) {
        pending *= 1.0f / static_cast<float>(pending_count);
        if (config.clip_norm > 0.0) {
          const double norm = global_norm(pending);
          if (norm > config.clip_norm) pending *= static_cast<float>(config.clip_norm / norm);
        }
        adam_step(encoder, pending, adam,
                  learning_rate(step, total_steps, config.peak_lr, config.warmup_fraction));
      }
      ++step;
      pending = GradientSet<float>(encoder);
      pending_count = 0;
    };

    for (std::size_t b = 0; b < schedule.size(); ++b) {
      LossAndGradients<float> lg;
      std::set<const std::string*> sources;
      if (schedule[b] == BatchKind::kSR) {
        const std::size_t lo = sr_index * train.size() / sr_batches;
        const std::size_t hi = (sr_index + 1) * train.size() / sr_batches;
        ++sr_index;
        SrBatch sr;
        for (std::size_t k = lo; k < hi; ++k) {
          const auto& p = train[order[k]];
          sr.messages.push_back(p.message);
          sr.replies.push_back(p.reply);
          sources.insert(p.source);
        }
        lg = gradients(encoder, sr);
        elog.sr_loss += lg.loss.value;
        ++elog.sr_batches;
      } else {
        std::vector<MaskedSample> samples;
        samples.reserve(batch);
        if (config.auxiliary == AuxiliaryTask::kTLM) {
          std::uniform_int_distribution<std::size_t> pick(0, parallel_pool.size() - 1);
          for (std::size_t k = 0; k < batch; ++k) {
            const auto& [pair, source] = parallel_pool[pick(rng)];
            samples.push_back(make_tlm_sample(*pair, vocab, msg_len, rng));
            sources.insert(source);
          }
        } else {
          std::uniform_int_distribution<std::size_t> pick(0, mono_pool.size() - 1);
          for (std::size_t k = 0; k < batch; ++k) {
            const auto& [text, source] = mono_pool[pick(rng)];
            samples.push_back(make_mlm_sample(text->text, text->lang, vocab, msg_len, rng));
            sources.insert(source);
          }
        }
        lg = gradients(encoder, std::span<const MaskedSample>(samples));
        elog.auxiliary_loss += lg.loss.value;
        ++elog.auxiliary_batches;
      }
      if (!std::isfinite(lg.loss.value)) {
        throw NumericalError("stage '" + config.name + "' diverged at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      for (const auto* s : sources) ++report.batches_per_source[*s];
      if (!lg.grads.empty()) pending += lg.grads;
      if (++pending_count == accum) flush();
    }
    flush();
    if (elog.sr_batches > 0) elog.sr_loss /= static_cast<double>(elog.sr_batches);
    if (elog.auxiliary_batches > 0) elog.auxiliary_loss /= static_cast<double>(elog.auxiliary_batches);

    for (const auto& [lang, v] : validation) {
      const Matrix<float> m = encode_batch(encoder, std::span<const TokenSequence>(v.messages));
      const Matrix<float> r = encode_batch(encoder, std::span<const TokenSequence>(v.replies));
      const double loss = symmetric_loss(similarity_matrix(m, r)).value;
      if (!std::isfinite(loss)) {
        throw NumericalError("stage '" + config.name + "' validation loss diverged at epoch " +
                             std::to_string(epoch));
      }
      elog.validation_loss[lang] = loss;
      elog.validation_total += loss;
    }
    // Without validation data every epoch ties, so the last one wins.
    if (!best || validation.empty() || elog.validation_total < best_total) {
      best = encoder;
      best_total = elog.validation_total;
      report.selected_epoch = epoch;
      if (options.epoch_checkpoint) {
        save_checkpoint(Checkpoint{*best, result.checkpoint.provenance, serialize_rng(rng)},
                        *options.epoch_checkpoint);
      }
    }
    if (options.on_epoch) options.on_epoch(elog);
    report.epochs.push_back(std::move(elog));
  }

  result.checkpoint.encoder = std::move(*best);
  result.checkpoint.rng_state = serialize_rng(rng);
  result.report = std::move(report);
  return result;
}

StageResult replay_stage(const Checkpoint& input, const StageConfig& config, const StageData& data,
                         const StageOptions& options) {
  StageConfig replay = config;
  replay.auxiliary = AuxiliaryTask::kNone;
  StageOptions opts = options;
  if (!opts.provenance_label) opts.provenance_label = "+" + std::string(to_string(config.region));
  return train_stage(input, replay, data, opts);
}

void validate_pipeline(const std::vector<StageConfig>& stages, const PipelineOptions& options) {
  if (stages.empty()) throw InvalidArgument("pipeline has no stages");
  std::set<std::string> names;
  std::size_t last_position = 0;
  for (const auto& s : stages) {
    s.validate();
    if (!names.insert(s.name).second) throw InvalidArgument("duplicate stage name '" + s.name + "'");
    if (options.region_order.empty()) continue;
    auto it = std::find(options.region_order.begin(), options.region_order.end(), s.region);
    if (it == options.region_order.end()) {
      throw InvalidArgument("stage '" + s.name + "' region is not in the configured order");
    }
    const auto position = static_cast<std::size_t>(it - options.region_order.begin());
    if (position < last_position) {
      throw InvalidArgument("stage '" + s.name + "' breaks the configured region order");
    }
    last_position = position;
  }
  const StageConfig* last_hrl = nullptr;
  for (const auto& s : stages) {
    if (s.region != Region::kLRL) last_hrl = &s;
  }
  if (last_hrl != nullptr && !options.pivot_language.empty()) {
    const auto& langs = last_hrl->sr_languages;
    if (std::find(langs.begin(), langs.end(), options.pivot_language) == langs.end()) {
      throw InvalidArgument("pivot language '" + options.pivot_language +
                            "' must train in the last high-resource stage '" + last_hrl->name + "'");
    }
  }
}

PipelineResult run_pipeline(const Checkpoint& initial, const std::vector<StageConfig>& stages,
                            const std::function<StageData(const StageConfig&)>& load_data,
                            const PipelineOptions& options) {
  validate_pipeline(stages, options);
  PipelineResult result;
  result.checkpoint = initial;
  for (const auto& stage : stages) {
    try {
      StageOptions opts;
      opts.access_log = options.access_log;
      if (options.epoch_checkpoint) opts.epoch_checkpoint = options.epoch_checkpoint(stage);
      if (options.on_epoch) {
        opts.on_epoch = [&](const EpochLog& e) { options.on_epoch(stage, e); };
      }
      StageResult r = train_stage(result.checkpoint, stage, load_data(stage), opts);
      result.checkpoint = r.checkpoint;
      result.stage_checkpoints.push_back(std::move(r.checkpoint));
      result.reports.push_back(std::move(r.report));
    } catch (const Error&) {
      result.failure = std::current_exception();
      break;
    }
  }
  return result;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(Encoder<float>&, const GradientSet<float>&, AdamState<float>&, double);
template void adam_step(Encoder<double>&, const GradientSet<double>&, AdamState<double>&, double);

}  // namespace polyreply
