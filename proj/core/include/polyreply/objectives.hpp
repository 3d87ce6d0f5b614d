#pragma once

#include <span>
#include <string_view>
#include <vector>

#include "polyreply/model.hpp"

namespace polyreply {

/// Per-batch loss: value is the mean of the per-example terms.
struct LossValue {
  double value = 0.0;
  std::vector<double> terms;
};

enum class Task { kSR, kMLM, kTLM };

std::string_view to_string(Task task);

struct SrBatch {
  std::vector<TokenSequence> messages;
  std::vector<TokenSequence> replies;
};

/// Logits s[i][j] = enc(m_i) . enc(r_j).
template <typename T>
Matrix<T> similarity_matrix(const Matrix<T>& messages, const Matrix<T>& replies);

/// Mean over i of -log p(m_i, r_i), where p normalizes exp(s[i][i]) by every entry of
/// row i and column i (the diagonal counted once). Evaluated with log-sum-exp.
template <typename T>
LossValue symmetric_loss(const Matrix<T>& logits);

/// d(symmetric_loss)/d(logits).
template <typename T>
Matrix<T> symmetric_loss_gradient(const Matrix<T>& logits);

/// Head logits for every row of an encoded batch.
template <typename T>
Matrix<T> head_logits(const Encoder<T>& encoder, const Matrix<T>& encoded);

/// Softmax cross-entropy of the head prediction at the masked sample against target_id.
template <typename T>
LossValue masked_lm_loss(const Encoder<T>& encoder, const MaskedSample& sample);

template <typename T>
LossValue masked_lm_loss(const Encoder<T>& encoder, std::span<const MaskedSample> samples);

template <typename T>
struct LossAndGradients {
  LossValue loss;
  GradientSet<T> grads;
};

/// Exact gradients of the batch's symmetric loss with respect to every unfrozen tensor.
/// Throws NumericalError naming the tensor when a gradient is non-finite.
template <typename T>
LossAndGradients<T> gradients(const Encoder<T>& encoder, const SrBatch& batch);

/// Same for a batch of MLM or TLM samples.
template <typename T>
LossAndGradients<T> gradients(const Encoder<T>& encoder, std::span<const MaskedSample> batch);

}  // namespace polyreply
