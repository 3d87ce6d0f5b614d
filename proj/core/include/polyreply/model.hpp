#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "polyreply/text.hpp"

namespace polyreply {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Where per-language adapters sit: on the pooled embedding before the tower, or on
/// the tower output.
enum class AdapterPlacement { kInput, kOutput };

std::string_view to_string(AdapterPlacement placement);
AdapterPlacement parse_adapter_placement(std::string_view text);

struct ModelConfig {
  int vocab_size = 30000;
  std::uint64_t vocab_hash_seed = 0;
  int embed_dim = 64;
  int hidden_dim = 64;
  int encoder_layers = 2;
  int adapter_dim = 16;
  AdapterPlacement adapter_placement = AdapterPlacement::kOutput;
  int max_msg_len = 96;
  int max_reply_len = 64;

  /// Throws InvalidArgument when a dimension is < 1 or adapter_dim is not below the
  /// adapted width.
  void validate() const;
  /// embed_dim for input adapters, hidden_dim for output adapters.
  int adapter_width() const {
    return adapter_placement == AdapterPlacement::kInput ? embed_dim : hidden_dim;
  }
  Vocabulary vocabulary() const { return {vocab_size, vocab_hash_seed}; }

  bool operator==(const ModelConfig&) const = default;
};

enum class FreezeSelector { kNone, kEmbedding, kAllExceptAdapters };

std::string_view to_string(FreezeSelector selector);
FreezeSelector parse_freeze_selector(std::string_view text);

template <typename T>
struct Tensor {
  std::string name;
  Matrix<T> value;
  bool frozen = false;
};

/// Indices of one language's adapter tensors inside Encoder::tensors().
struct AdapterSlots {
  std::size_t down_weight;
  std::size_t down_bias;
  std::size_t up_weight;
  std::size_t up_bias;
};

/// Shared-tower dual encoder: mean-pooled embeddings, `encoder_layers` dense tanh
/// layers, a linear output projection, optional per-language residual adapters (on the
/// pooled input or the output), and a mask-prediction head used by the auxiliary tasks.
///
/// Tensor order is fixed: embedding, (layer weight, layer bias) per layer, output
/// weight, output bias, head weight, head bias, then four tensors per adapter
/// language in installation order.
template <typename T>
class Encoder {
 public:
  /// All tensors zero.
  explicit Encoder(ModelConfig config);

  /// Scaled-normal initialization of the base tensors, no adapters.
  static Encoder random(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor<T>>& tensors() { return tensors_; }
  const std::vector<Tensor<T>>& tensors() const { return tensors_; }

  std::size_t find(std::string_view name) const;

  static constexpr std::size_t embedding_index() { return 0; }
  std::size_t layer_weight_index(int layer) const { return 1 + 2 * static_cast<std::size_t>(layer); }
  std::size_t layer_bias_index(int layer) const { return 2 + 2 * static_cast<std::size_t>(layer); }
  std::size_t output_weight_index() const { return 1 + 2 * layers(); }
  std::size_t output_bias_index() const { return 2 + 2 * layers(); }
  std::size_t head_weight_index() const { return 3 + 2 * layers(); }
  std::size_t head_bias_index() const { return 4 + 2 * layers(); }
  std::size_t base_tensor_count() const { return 5 + 2 * layers(); }

  /// Adds N(0, 0.01^2) adapters for languages that do not have one yet.
  void install_adapters(const std::vector<LanguageTag>& languages, Rng& rng,
                        double init_stddev = 0.01);
  std::optional<AdapterSlots> adapter(const LanguageTag& lang) const;
  const std::map<LanguageTag, AdapterSlots>& adapters() const { return adapters_; }
  bool is_adapter_tensor(std::size_t index) const { return index >= base_tensor_count(); }

  void freeze(FreezeSelector selector);

  std::size_t base_parameter_count() const;
  std::size_t adapter_parameter_count() const;

  template <typename U>
  Encoder<U> cast() const;

 private:
  template <typename U>
  friend class Encoder;

  std::size_t layers() const { return static_cast<std::size_t>(config_.encoder_layers); }

  ModelConfig config_;
  std::vector<Tensor<T>> tensors_;
  std::map<LanguageTag, AdapterSlots> adapters_;
  std::vector<LanguageTag> adapter_order_;
};

/// Throws InvalidArgument when selector == kAllExceptAdapters and no adapters are installed.
template <typename T>
void freeze(Encoder<T>& encoder, FreezeSelector selector) {
  encoder.freeze(selector);
}

/// adapter parameters / base parameters. Per language: 2*hidden*adapter + adapter + hidden.
template <typename T>
double adapter_overhead(const Encoder<T>& encoder) {
  return static_cast<double>(encoder.adapter_parameter_count()) /
         static_cast<double>(encoder.base_parameter_count());
}

/// Gradient entries aligned with Encoder::tensors(); frozen tensors have no entry.
template <typename T>
class GradientSet {
 public:
  GradientSet() = default;
  /// Zero entries for every unfrozen tensor.
  explicit GradientSet(const Encoder<T>& encoder);

  bool has(std::size_t index) const { return index < grads_.size() && grads_[index].has_value(); }
  Matrix<T>& at(std::size_t index) { return *grads_.at(index); }
  const Matrix<T>& at(std::size_t index) const { return *grads_.at(index); }
  std::size_t size() const { return grads_.size(); }
  std::size_t entry_count() const;
  bool empty() const { return entry_count() == 0; }

  GradientSet& operator+=(const GradientSet& other);
  GradientSet& operator*=(T factor);

 private:
  std::vector<std::optional<Matrix<T>>> grads_;
};

/// Intermediate values of a batched forward pass, kept for backward().
template <typename T>
struct EncoderTrace {
  std::vector<std::vector<TokenId>> ids;
  std::vector<std::optional<AdapterSlots>> row_adapter;
  Matrix<T> pooled;
  /// Tower input: pooled, plus the adapter residual under input placement.
  Matrix<T> layer_input;
  std::vector<Matrix<T>> activations;
  Matrix<T> base_output;
  Matrix<T> adapter_hidden;
  Matrix<T> output;
};

/// Encodes one sequence. Throws InvalidArgument for ids outside [0, vocab_size).
template <typename T>
RowVector<T> encode(const Encoder<T>& encoder, const TokenSequence& seq);

/// One row per sequence.
template <typename T>
Matrix<T> encode_batch(const Encoder<T>& encoder, std::span<const TokenSequence> seqs);

template <typename T>
EncoderTrace<T> forward(const Encoder<T>& encoder, std::span<const TokenSequence> seqs);

/// Accumulates d(loss)/d(tensor) into `grads` for every entry it holds, given
/// d(loss)/d(output) for each row of the trace.
template <typename T>
void backward(const Encoder<T>& encoder, const EncoderTrace<T>& trace, const Matrix<T>& d_output,
              GradientSet<T>& grads);

struct Checkpoint {
  Encoder<float> encoder{ModelConfig{}};
  std::vector<std::string> provenance;
  std::string rng_state;

  const ModelConfig& config() const { return encoder.config(); }
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Atomic: written to a temporary sibling, then renamed over `path`.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
/// Throws DataError on version mismatch, truncation, checksum or shape mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Bitwise comparison of every tensor value and frozen flag.
bool tensors_bit_identical(const Encoder<float>& a, const Encoder<float>& b);

}  // namespace polyreply
