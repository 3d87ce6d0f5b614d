#include "polyreply/objectives.hpp"

#include <cmath>
#include <limits>

#include "polyreply/error.hpp"

namespace polyreply {
namespace {

template <typename T>
void require_finite(const Matrix<T>& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string("non-finite ") + what);
}

template <typename T>
void check_gradients(const Encoder<T>& encoder, const GradientSet<T>& grads) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads.has(i) && !grads.at(i).allFinite()) {
      throw NumericalError("non-finite gradient for tensor " + encoder.tensors()[i].name);
    }
  }
}

// log of the symmetric-loss denominator for example i: row i plus column i without
// the diagonal.
template <typename T>
double log_denominator(const Matrix<T>& s, Eigen::Index i) {
  const Eigen::Index n = s.rows();
  double peak = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < n; ++j) peak = std::max(peak, static_cast<double>(s(i, j)));
  for (Eigen::Index k = 0; k < n; ++k) peak = std::max(peak, static_cast<double>(s(k, i)));
  double sum = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) sum += std::exp(static_cast<double>(s(i, j)) - peak);
  for (Eigen::Index k = 0; k < n; ++k) {
    if (k != i) sum += std::exp(static_cast<double>(s(k, i)) - peak);
  }
  return peak + std::log(sum);
}

template <typename T>
void check_square(const Matrix<T>& logits) {
  if (logits.rows() < 1 || logits.rows() != logits.cols()) {
    throw InvalidArgument("similarity matrix must be square with n >= 1");
  }
  require_finite(logits, "similarity logits");
}

}  // namespace

std::string_view to_string(Task task) {
  switch (task) {
    case Task::kSR:
      return "SR";
    case Task::kMLM:
      return "MLM";
    case Task::kTLM:
      return "TLM";
  }
  return "?";
}

template <typename T>
Matrix<T> similarity_matrix(const Matrix<T>& messages, const Matrix<T>& replies) {
  return messages * replies.transpose();
}

template <typename T>
LossValue symmetric_loss(const Matrix<T>& logits) {
  check_square(logits);
  const Eigen::Index n = logits.rows();
  LossValue loss;
  loss.terms.resize(static_cast<std::size_t>(n));
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    // Clamp: the diagonal is in the denominator, so the term is >= 0 up to rounding.
    const double term = std::max(0.0, log_denominator(logits, i) - static_cast<double>(logits(i, i)));
    loss.terms[static_cast<std::size_t>(i)] = term;
    total += term;
  }
  loss.value = total / static_cast<double>(n);
  return loss;
}

template <typename T>
Matrix<T> symmetric_loss_gradient(const Matrix<T>& logits) {
  check_square(logits);
  const Eigen::Index n = logits.rows();
  std::vector<double> log_z(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) log_z[static_cast<std::size_t>(i)] = log_denominator(logits, i);

  Matrix<T> grad(n, n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = 0; b < n; ++b) {
      const double s = static_cast<double>(logits(a, b));
      // s[a][b] sits in row a of example a and, off the diagonal, column b of example b.
      double g = std::exp(s - log_z[static_cast<std::size_t>(a)]);
      if (a != b) {
        g += std::exp(s - log_z[static_cast<std::size_t>(b)]);
      } else {
        g -= 1.0;
      }
      grad(a, b) = static_cast<T>(g * inv_n);
    }
  }
  return grad;
}

template <typename T>
Matrix<T> head_logits(const Encoder<T>& encoder, const Matrix<T>& encoded) {
  Matrix<T> logits = encoded * encoder.tensors()[encoder.head_weight_index()].value;
  logits.rowwise() += encoder.tensors()[encoder.head_bias_index()].value.row(0);
  return logits;
}

namespace {

std::vector<TokenSequence> masked_inputs(std::span<const MaskedSample> samples, int vocab_size) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.target_id < 0 || s.target_id >= vocab_size) {
      throw InvalidArgument("mask target id " + std::to_string(s.target_id) + " outside vocabulary");
    }
    if (s.target_pos >= s.ids.size() || s.ids[s.target_pos] != Vocabulary::kMask) {
      throw InvalidArgument("masked sample does not hold MASK at target_pos");
    }
    seqs.push_back({s.ids, s.lang});
  }
  return seqs;
}

// Row-wise log-softmax cross entropy; fills softmax probabilities into `probs` when given.
template <typename T>
LossValue cross_entropy(const Matrix<T>& logits, std::span<const MaskedSample> samples,
                        Matrix<T>* probs) {
  require_finite(logits, "head logits");
  LossValue loss;
  const Eigen::Index n = logits.rows();
  loss.terms.resize(static_cast<std::size_t>(n));
  if (probs) probs->resize(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const double peak = static_cast<double>(logits.row(r).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<double>(logits(r, c)) - peak);
    const double log_z = peak + std::log(sum);
    const TokenId target = samples[static_cast<std::size_t>(r)].target_id;
    const double term = log_z - static_cast<double>(logits(r, target));
    loss.terms[static_cast<std::size_t>(r)] = term;
    total += term;
    if (probs) {
      for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        (*probs)(r, c) = static_cast<T>(std::exp(static_cast<double>(logits(r, c)) - log_z));
      }
    }
  }
  loss.value = n > 0 ? total / static_cast<double>(n) : 0.0;
  return loss;
}

}  // namespace

template <typename T>
LossValue masked_lm_loss(const Encoder<T>& encoder, std::span<const MaskedSample> samples) {
  if (samples.empty()) throw InvalidArgument("masked_lm_loss needs at least one sample");
  const auto seqs = masked_inputs(samples, encoder.config().vocab_size);
  const Matrix<T> encoded = encode_batch(encoder, std::span<const TokenSequence>(seqs));
  return cross_entropy(head_logits(encoder, encoded), samples, static_cast<Matrix<T>*>(nullptr));
}

template <typename T>
LossValue masked_lm_loss(const Encoder<T>& encoder, const MaskedSample& sample) {
  return masked_lm_loss(encoder, std::span<const MaskedSample>(&sample, 1));
}

template <typename T>
LossAndGradients<T> gradients(const Encoder<T>& encoder, const SrBatch& batch) {
  if (batch.messages.size() != batch.replies.size() || batch.messages.empty()) {
    throw InvalidArgument("SR batch needs equal, non-zero numbers of messages and replies");
  }
  LossAndGradients<T> out{{}, GradientSet<T>(encoder)};
  const auto msg_trace = forward(encoder, std::span<const TokenSequence>(batch.messages));
  const auto rep_trace = forward(encoder, std::span<const TokenSequence>(batch.replies));
  const Matrix<T> logits = similarity_matrix(msg_trace.output, rep_trace.output);
  out.loss = symmetric_loss(logits);
  if (out.grads.empty()) return out;

  const Matrix<T> d_logits = symmetric_loss_gradient(logits);
  const Matrix<T> d_messages = d_logits * rep_trace.output;
  const Matrix<T> d_replies = d_logits.transpose() * msg_trace.output;
  backward(encoder, msg_trace, d_messages, out.grads);
  backward(encoder, rep_trace, d_replies, out.grads);
  check_gradients(encoder, out.grads);
  return out;
}

template <typename T>
LossAndGradients<T> gradients(const Encoder<T>& encoder, std::span<const MaskedSample> batch) {
  if (batch.empty()) throw InvalidArgument("masked batch is empty");
  LossAndGradients<T> out{{}, GradientSet<T>(encoder)};
  const auto seqs = masked_inputs(batch, encoder.config().vocab_size);
  const auto trace = forward(encoder, std::span<const TokenSequence>(seqs));
  const Matrix<T> logits = head_logits(encoder, trace.output);
  Matrix<T> probs;
  out.loss = cross_entropy(logits, batch, &probs);
  if (out.grads.empty()) return out;

  // d(mean CE)/d(logits) = (softmax - onehot) / n
  Matrix<T> d_logits = probs;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    d_logits(static_cast<Eigen::Index>(r), batch[r].target_id) -= T(1);
  }
  d_logits /= static_cast<T>(batch.size());

  const std::size_t head_w = encoder.head_weight_index();
  const std::size_t head_b = encoder.head_bias_index();
  if (out.grads.has(head_w)) out.grads.at(head_w) += trace.output.transpose() * d_logits;
  if (out.grads.has(head_b)) out.grads.at(head_b) += d_logits.colwise().sum();
  const Matrix<T> d_output = d_logits * encoder.tensors()[head_w].value.transpose();
  backward(encoder, trace, d_output, out.grads);
  check_gradients(encoder, out.grads);
  return out;
}

#define POLYREPLY_INSTANTIATE(T)                                                              \
  template Matrix<T> similarity_matrix(const Matrix<T>&, const Matrix<T>&);                   \
  template LossValue symmetric_loss(const Matrix<T>&);                                        \
  template Matrix<T> symmetric_loss_gradient(const Matrix<T>&);                               \
  template Matrix<T> head_logits(const Encoder<T>&, const Matrix<T>&);                        \
  template LossValue masked_lm_loss(const Encoder<T>&, const MaskedSample&);                  \
  template LossValue masked_lm_loss(const Encoder<T>&, std::span<const MaskedSample>);        \
  template LossAndGradients<T> gradients(const Encoder<T>&, const SrBatch&);                  \
  template LossAndGradients<T> gradients(const Encoder<T>&, std::span<const MaskedSample>);

POLYREPLY_INSTANTIATE(float)
POLYREPLY_INSTANTIATE(double)

#undef POLYREPLY_INSTANTIATE

}  // namespace polyreply
