#include "polyreply/model.hpp"

#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "container.hpp"
#include "polyreply/error.hpp"

namespace polyreply {
namespace {

template <typename T>
Matrix<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
  return m;
}

std::string adapter_name(const LanguageTag& lang, const char* part) {
  return "adapter." + lang + "." + part;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= Vocabulary::kNumSpecial) {
    throw InvalidArgument("vocab_size must exceed the number of special ids");
  }
  if (embed_dim < 1 || hidden_dim < 1 || encoder_layers < 1 || adapter_dim < 1 ||
      max_msg_len < 1 || max_reply_len < 1) {
    throw InvalidArgument("model dimensions must be >= 1");
  }
  if (adapter_dim >= hidden_dim || adapter_dim >= adapter_width()) {
    throw InvalidArgument("adapter_dim must be below hidden_dim and the adapted width");
  }
}

std::string_view to_string(AdapterPlacement placement) {
  return placement == AdapterPlacement::kInput ? "input" : "output";
}

AdapterPlacement parse_adapter_placement(std::string_view text) {
  if (text == "input") return AdapterPlacement::kInput;
  if (text == "output") return AdapterPlacement::kOutput;
  throw InvalidArgument("unknown adapter placement '" + std::string(text) + "'");
}

std::string_view to_string(FreezeSelector selector) {
  switch (selector) {
    case FreezeSelector::kNone:
      return "none";
    case FreezeSelector::kEmbedding:
      return "embedding";
    case FreezeSelector::kAllExceptAdapters:
      return "all_except_adapters";
  }
  return "?";
}

FreezeSelector parse_freeze_selector(std::string_view text) {
  if (text == "none") return FreezeSelector::kNone;
  if (text == "embedding") return FreezeSelector::kEmbedding;
  if (text == "all_except_adapters") return FreezeSelector::kAllExceptAdapters;
  throw InvalidArgument("unknown freeze selector '" + std::string(text) + "'");
}

template <typename T>
Encoder<T>::Encoder(ModelConfig config) : config_(config) {
  config_.validate();
  const Eigen::Index vocab = config_.vocab_size;
  const Eigen::Index embed = config_.embed_dim;
  const Eigen::Index hidden = config_.hidden_dim;
  tensors_.push_back({"embedding", Matrix<T>::Zero(vocab, embed), false});
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const Eigen::Index in = l == 0 ? embed : hidden;
    tensors_.push_back({"layer" + std::to_string(l) + ".weight", Matrix<T>::Zero(in, hidden), false});
    tensors_.push_back({"layer" + std::to_string(l) + ".bias", Matrix<T>::Zero(1, hidden), false});
  }
  tensors_.push_back({"output.weight", Matrix<T>::Zero(hidden, hidden), false});
  tensors_.push_back({"output.bias", Matrix<T>::Zero(1, hidden), false});
  tensors_.push_back({"mlm_head.weight", Matrix<T>::Zero(hidden, vocab), false});
  tensors_.push_back({"mlm_head.bias", Matrix<T>::Zero(1, vocab), false});
}

template <typename T>
Encoder<T> Encoder<T>::random(const ModelConfig& config, Rng& rng) {
  Encoder<T> encoder(config);
  auto& t = encoder.tensors_;
  const double hidden_scale = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
  t[embedding_index()].value = normal_matrix<T>(config.vocab_size, config.embed_dim, 1.0, rng);
  for (int l = 0; l < config.encoder_layers; ++l) {
    auto& w = t[encoder.layer_weight_index(l)].value;
    w = normal_matrix<T>(w.rows(), w.cols(), 1.0 / std::sqrt(static_cast<double>(w.rows())), rng);
  }
  auto& out = t[encoder.output_weight_index()].value;
  out = normal_matrix<T>(out.rows(), out.cols(), hidden_scale, rng);
  auto& head = t[encoder.head_weight_index()].value;
  head = normal_matrix<T>(head.rows(), head.cols(), hidden_scale, rng);
  return encoder;
}

template <typename T>
std::size_t Encoder<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].name == name) return i;
  }
  throw InvalidArgument("no tensor named '" + std::string(name) + "'");
}

template <typename T>
void Encoder<T>::install_adapters(const std::vector<LanguageTag>& languages, Rng& rng,
                                  double init_stddev) {
  const Eigen::Index hidden = config_.adapter_width();
  const Eigen::Index bottleneck = config_.adapter_dim;
  for (const LanguageTag& lang : languages) {
    if (adapters_.contains(lang)) continue;
    const std::size_t base = tensors_.size();
    tensors_.push_back({adapter_name(lang, "down.weight"),
                        normal_matrix<T>(hidden, bottleneck, init_stddev, rng), false});
    tensors_.push_back({adapter_name(lang, "down.bias"),
                        normal_matrix<T>(1, bottleneck, init_stddev, rng), false});
    tensors_.push_back({adapter_name(lang, "up.weight"),
                        normal_matrix<T>(bottleneck, hidden, init_stddev, rng), false});
    tensors_.push_back({adapter_name(lang, "up.bias"),
                        normal_matrix<T>(1, hidden, init_stddev, rng), false});
    adapters_.emplace(lang, AdapterSlots{base, base + 1, base + 2, base + 3});
    adapter_order_.push_back(lang);
  }
}

template <typename T>
std::optional<AdapterSlots> Encoder<T>::adapter(const LanguageTag& lang) const {
  if (auto it = adapters_.find(lang); it != adapters_.end()) return it->second;
  return std::nullopt;
}

template <typename T>
void Encoder<T>::freeze(FreezeSelector selector) {
  if (selector == FreezeSelector::kAllExceptAdapters && adapters_.empty()) {
    throw InvalidArgument("all_except_adapters requires installed adapters");
  }
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    switch (selector) {
      case FreezeSelector::kNone:
        tensors_[i].frozen = false;
        break;
      case FreezeSelector::kEmbedding:
        tensors_[i].frozen = i == embedding_index();
        break;
      case FreezeSelector::kAllExceptAdapters:
        tensors_[i].frozen = !is_adapter_tensor(i);
        break;
    }
  }
}

template <typename T>
std::size_t Encoder<T>::base_parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < base_tensor_count(); ++i) {
    n += static_cast<std::size_t>(tensors_[i].value.size());
  }
  return n;
}

template <typename T>
std::size_t Encoder<T>::adapter_parameter_count() const {
  std::size_t n = 0;
  for (std::size_t i = base_tensor_count(); i < tensors_.size(); ++i) {
    n += static_cast<std::size_t>(tensors_[i].value.size());
  }
  return n;
}

template <typename T>
template <typename U>
Encoder<U> Encoder<T>::cast() const {
  Encoder<U> out(config_);
  out.tensors_.clear();
  for (const auto& t : tensors_) {
    out.tensors_.push_back({t.name, t.value.template cast<U>(), t.frozen});
  }
  out.adapters_ = adapters_;
  out.adapter_order_ = adapter_order_;
  return out;
}

template <typename T>
GradientSet<T>::GradientSet(const Encoder<T>& encoder) {
  grads_.resize(encoder.tensors().size());
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    const auto& t = encoder.tensors()[i];
    if (!t.frozen) grads_[i] = Matrix<T>::Zero(t.value.rows(), t.value.cols());
  }
}

template <typename T>
std::size_t GradientSet<T>::entry_count() const {
  std::size_t n = 0;
  for (const auto& g : grads_) n += g.has_value() ? 1 : 0;
  return n;
}

template <typename T>
GradientSet<T>& GradientSet<T>::operator+=(const GradientSet& other) {
  if (grads_.empty()) {
    grads_ = other.grads_;
    return *this;
  }
  if (other.grads_.size() != grads_.size()) throw InvalidArgument("gradient sets do not align");
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (grads_[i].has_value() != other.grads_[i].has_value()) {
      throw InvalidArgument("gradient sets cover different tensors");
    }
    if (grads_[i]) *grads_[i] += *other.grads_[i];
  }
  return *this;
}

template <typename T>
GradientSet<T>& GradientSet<T>::operator*=(T factor) {
  for (auto& g : grads_) {
    if (g) *g *= factor;
  }
  return *this;
}

template <typename T>
EncoderTrace<T> forward(const Encoder<T>& encoder, std::span<const TokenSequence> seqs) {
  const ModelConfig& cfg = encoder.config();
  const auto& t = encoder.tensors();
  const auto n = static_cast<Eigen::Index>(seqs.size());
  EncoderTrace<T> trace;
  trace.pooled = Matrix<T>::Zero(n, cfg.embed_dim);
  const Matrix<T>& embedding = t[Encoder<T>::embedding_index()].value;
  for (Eigen::Index r = 0; r < n; ++r) {
    const TokenSequence& seq = seqs[static_cast<std::size_t>(r)];
    for (const TokenId id : seq.ids) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw InvalidArgument("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(cfg.vocab_size));
      }
      trace.pooled.row(r) += embedding.row(id);
    }
    if (!seq.ids.empty()) trace.pooled.row(r) /= static_cast<T>(seq.ids.size());
    trace.ids.push_back(seq.ids);
    trace.row_adapter.push_back(encoder.adapter(seq.lang));
  }

  const bool input_adapters = cfg.adapter_placement == AdapterPlacement::kInput;
  trace.adapter_hidden = Matrix<T>::Zero(n, cfg.adapter_dim);
  // Residual adapter: x + tanh(x D + bd) U + bu, only for languages that have one.
  auto adapt = [&](const Matrix<T>& in, Matrix<T>& out) {
    out = in;
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto& slots = trace.row_adapter[static_cast<std::size_t>(r)];
      if (!slots) continue;
      const RowVector<T> pre = in.row(r) * t[slots->down_weight].value +
                               t[slots->down_bias].value.row(0);
      trace.adapter_hidden.row(r) = pre.array().tanh().matrix();
      out.row(r) += trace.adapter_hidden.row(r) * t[slots->up_weight].value +
                    t[slots->up_bias].value.row(0);
    }
  };
  if (input_adapters) {
    adapt(trace.pooled, trace.layer_input);
  } else {
    trace.layer_input = trace.pooled;
  }

  // Row by row, so a row's encoding never depends on what else is in the batch.
  for (int l = 0; l < cfg.encoder_layers; ++l) {
    trace.activations.emplace_back(n, cfg.hidden_dim);
  }
  trace.base_output.resize(n, cfg.hidden_dim);
  for (Eigen::Index r = 0; r < n; ++r) {
    RowVector<T> x = trace.layer_input.row(r);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      const RowVector<T> pre = x * t[encoder.layer_weight_index(l)].value +
                               t[encoder.layer_bias_index(l)].value.row(0);
      x = pre.array().tanh().matrix();
      trace.activations[static_cast<std::size_t>(l)].row(r) = x;
    }
    trace.base_output.row(r) =
        x * t[encoder.output_weight_index()].value + t[encoder.output_bias_index()].value.row(0);
  }

  if (input_adapters) {
    trace.output = trace.base_output;
  } else {
    adapt(trace.base_output, trace.output);
  }
  return trace;
}

template <typename T>
void backward(const Encoder<T>& encoder, const EncoderTrace<T>& trace, const Matrix<T>& d_output,
              GradientSet<T>& grads) {
  const ModelConfig& cfg = encoder.config();
  const auto& t = encoder.tensors();
  const Eigen::Index n = trace.output.rows();

  const bool input_adapters = cfg.adapter_placement == AdapterPlacement::kInput;
  bool any_adapter = false;
  for (const auto& slots : trace.row_adapter) any_adapter = any_adapter || slots.has_value();

  // Adapter residual out = x + tanh(x D + bd) U + bu; returns d(loss)/dx given d(loss)/d(out).
  auto adapter_backward = [&](const Matrix<T>& x, const Matrix<T>& d_out) {
    Matrix<T> d_in = d_out;
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto& slots = trace.row_adapter[static_cast<std::size_t>(r)];
      if (!slots) continue;
      const RowVector<T> dy = d_out.row(r);
      const RowVector<T> z = trace.adapter_hidden.row(r);
      if (grads.has(slots->up_weight)) grads.at(slots->up_weight) += z.transpose() * dy;
      if (grads.has(slots->up_bias)) grads.at(slots->up_bias) += dy;
      const RowVector<T> dz = dy * t[slots->up_weight].value.transpose();
      const RowVector<T> dpre = (dz.array() * (1 - z.array().square())).matrix();
      if (grads.has(slots->down_weight)) grads.at(slots->down_weight) += x.row(r).transpose() * dpre;
      if (grads.has(slots->down_bias)) grads.at(slots->down_bias) += dpre;
      d_in.row(r) += dpre * t[slots->down_weight].value.transpose();
    }
    return d_in;
  };

  const Matrix<T> d_base = input_adapters ? d_output : adapter_backward(trace.base_output, d_output);

  const Matrix<T>& last = trace.activations.back();
  if (grads.has(encoder.output_weight_index())) {
    grads.at(encoder.output_weight_index()) += last.transpose() * d_base;
  }
  if (grads.has(encoder.output_bias_index())) {
    grads.at(encoder.output_bias_index()) += d_base.colwise().sum();
  }
  Matrix<T> d_act = d_base * t[encoder.output_weight_index()].value.transpose();

  const bool need_embedding = grads.has(Encoder<T>::embedding_index());
  const bool need_input = need_embedding || (input_adapters && any_adapter);
  for (int l = cfg.encoder_layers - 1; l >= 0; --l) {
    const Matrix<T>& act = trace.activations[static_cast<std::size_t>(l)];
    const Matrix<T>& input =
        l == 0 ? trace.layer_input : trace.activations[static_cast<std::size_t>(l - 1)];
    const Matrix<T> d_pre = (d_act.array() * (1 - act.array().square())).matrix();
    if (grads.has(encoder.layer_weight_index(l))) {
      grads.at(encoder.layer_weight_index(l)) += input.transpose() * d_pre;
    }
    if (grads.has(encoder.layer_bias_index(l))) {
      grads.at(encoder.layer_bias_index(l)) += d_pre.colwise().sum();
    }
    if (l > 0 || need_input) {
      d_act = d_pre * t[encoder.layer_weight_index(l)].value.transpose();
    }
  }
  if (!need_input) return;
  if (input_adapters) d_act = adapter_backward(trace.pooled, d_act);

  if (need_embedding) {
    Matrix<T>& d_embedding = grads.at(Encoder<T>::embedding_index());
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto& ids = trace.ids[static_cast<std::size_t>(r)];
      if (ids.empty()) continue;
      const RowVector<T> share = d_act.row(r) / static_cast<T>(ids.size());
      for (const TokenId id : ids) d_embedding.row(id) += share;
    }
  }
}

template <typename T>
Matrix<T> encode_batch(const Encoder<T>& encoder, std::span<const TokenSequence> seqs) {
  return forward(encoder, seqs).output;
}

template <typename T>
RowVector<T> encode(const Encoder<T>& encoder, const TokenSequence& seq) {
  return forward(encoder, std::span<const TokenSequence>(&seq, 1)).output.row(0);
}

template class Encoder<float>;
template class Encoder<double>;
template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;
template Encoder<float> Encoder<float>::cast<float>() const;
template Encoder<double> Encoder<double>::cast<double>() const;
template class GradientSet<float>;
template class GradientSet<double>;
template EncoderTrace<float> forward(const Encoder<float>&, std::span<const TokenSequence>);
template EncoderTrace<double> forward(const Encoder<double>&, std::span<const TokenSequence>);
template void backward(const Encoder<float>&, const EncoderTrace<float>&, const Matrix<float>&,
                       GradientSet<float>&);
template void backward(const Encoder<double>&, const EncoderTrace<double>&, const Matrix<double>&,
                       GradientSet<double>&);
template Matrix<float> encode_batch(const Encoder<float>&, std::span<const TokenSequence>);
template Matrix<double> encode_batch(const Encoder<double>&, std::span<const TokenSequence>);
template RowVector<float> encode(const Encoder<float>&, const TokenSequence&);
template RowVector<double> encode(const Encoder<double>&, const TokenSequence&);

namespace {

nlohmann::json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"vocab_hash_seed", c.vocab_hash_seed},
          {"embed_dim", c.embed_dim},     {"hidden_dim", c.hidden_dim},
          {"encoder_layers", c.encoder_layers}, {"adapter_dim", c.adapter_dim},
          {"adapter_placement", std::string(to_string(c.adapter_placement))},
          {"max_msg_len", c.max_msg_len}, {"max_reply_len", c.max_reply_len}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.vocab_hash_seed = j.at("vocab_hash_seed").get<std::uint64_t>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.adapter_dim = j.at("adapter_dim").get<int>();
  c.adapter_placement = parse_adapter_placement(j.at("adapter_placement").get<std::string>());
  c.max_msg_len = j.at("max_msg_len").get<int>();
  c.max_reply_len = j.at("max_reply_len").get<int>();
  return c;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  const Encoder<float>& encoder = checkpoint.encoder;
  std::vector<detail::ContainerTensor> tensors;
  for (const auto& t : encoder.tensors()) {
    detail::ContainerTensor out{t.name, t.value.rows(), t.value.cols(), t.frozen, {}};
    out.data.assign(t.value.data(), t.value.data() + t.value.size());
    tensors.push_back(std::move(out));
  }
  std::vector<std::string> adapter_languages;
  for (std::size_t i = encoder.base_tensor_count(); i < encoder.tensors().size(); i += 4) {
    const std::string& name = encoder.tensors()[i].name;
    // "adapter.<lang>.down.weight"
    adapter_languages.push_back(name.substr(8, name.size() - 8 - std::string(".down.weight").size()));
  }
  const nlohmann::json meta{{"config", config_json(encoder.config())},
                            {"provenance", checkpoint.provenance},
                            {"rng_state", checkpoint.rng_state},
                            {"adapter_languages", adapter_languages},
                            {"checkpoint_version", kCheckpointFormatVersion}};
  detail::write_container(path, "checkpoint", meta, tensors);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::Container container = detail::read_container(path, "checkpoint");
  try {
    if (container.meta.at("checkpoint_version").get<int>() != kCheckpointFormatVersion) {
      throw DataError("checkpoint version mismatch in " + path.string());
    }
    const ModelConfig config = config_from_json(container.meta.at("config"));
    Checkpoint checkpoint;
    checkpoint.encoder = Encoder<float>(config);
    const auto adapter_languages =
        container.meta.at("adapter_languages").get<std::vector<std::string>>();
    Rng unused(0);
    checkpoint.encoder.install_adapters(adapter_languages, unused);
    auto& tensors = checkpoint.encoder.tensors();
    if (container.tensors.size() != tensors.size()) {
      throw DataError("checkpoint " + path.string() + " lists " +
                      std::to_string(container.tensors.size()) + " tensors, config implies " +
                      std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& stored = container.tensors[i];
      auto& target = tensors[i];
      if (stored.name != target.name || stored.rows != target.value.rows() ||
          stored.cols != target.value.cols()) {
        throw DataError("tensor " + stored.name + " shape or order does not match the manifest config");
      }
      std::memcpy(target.value.data(), stored.data.data(), stored.data.size() * sizeof(float));
      target.frozen = stored.frozen;
    }
    checkpoint.provenance = container.meta.at("provenance").get<std::vector<std::string>>();
    checkpoint.rng_state = container.meta.at("rng_state").get<std::string>();
    return checkpoint;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("incomplete checkpoint manifest in " + path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw DataError("invalid checkpoint " + path.string() + ": " + e.what());
  }
}

bool tensors_bit_identical(const Encoder<float>& a, const Encoder<float>& b) {
  if (!(a.config() == b.config()) || a.tensors().size() != b.tensors().size()) return false;
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    const auto& x = a.tensors()[i];
    const auto& y = b.tensors()[i];
    if (x.name != y.name || x.frozen != y.frozen || x.value.rows() != y.value.rows() ||
        x.value.cols() != y.value.cols()) {
      return false;
    }
    if (std::memcmp(x.value.data(), y.value.data(), sizeof(float) * static_cast<std::size_t>(x.value.size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace polyreply
