#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fedreid/errors.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

// Which terms of the client objective L = L^C + L^E + L^R are active.
struct LossSpec {
  bool classification = true;  // L^C, client cross-entropy
  bool expert = true;          // L^E, expert cross-entropy
  bool regularisation = true;  // L^R, T^2 * KL(Q || P)
  double temperature = 3.0;

  void validate() const {
    if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  }
  bool needs_expert() const noexcept { return expert || regularisation; }
};

namespace detail {

inline void check_labels(const Matrix& logits, std::span<const int> labels) {
  if (logits.rows() == 0) throw InputError("loss on an empty batch");
  if (labels.size() != logits.rows()) throw InputError("label count does not match batch size");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw InputError(concat_message("label ", y, " outside [0, ", logits.cols(), ")"));
    }
  }
}

// log-softmax of one row scaled by 1/T, max-subtracted.
inline void log_softmax_row(std::span<const double> row, double temperature, std::span<double> out) {
  double m = row[0];
  for (double v : row) m = std::max(m, v);
  double sum = 0.0;
  for (std::size_t z = 0; z < row.size(); ++z) {
    out[z] = (row[z] - m) / temperature;
    sum += std::exp(out[z]);
  }
  const double log_sum = std::log(sum);
  for (double& v : out) v -= log_sum;
}

}  // namespace detail

// Mean over the batch of -log softmax(logits)[label]. When `dlogits` is given it
// receives d(loss)/d(logits) = (softmax - one_hot) / B.
inline double cross_entropy(const Matrix& logits, std::span<const int> labels, Matrix* dlogits = nullptr) {
  detail::check_labels(logits, labels);
  const std::size_t n = logits.rows();
  const std::size_t z = logits.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (dlogits) *dlogits = Matrix(n, z);
  std::vector<double> lp(z);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    detail::log_softmax_row(logits.row(r), 1.0, lp);
    total -= lp[static_cast<std::size_t>(labels[r])];
    if (dlogits) {
      for (std::size_t c = 0; c < z; ++c) (*dlogits)(r, c) = std::exp(lp[c]) * inv_n;
      (*dlogits)(r, static_cast<std::size_t>(labels[r])) -= inv_n;
    }
  }
  return total * inv_n;
}

// Row-wise softmax of logits / T.
inline Matrix soften(const Matrix& logits, double temperature) {
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  Matrix out(logits.rows(), logits.cols());
  std::vector<double> lp(logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    detail::log_softmax_row(logits.row(r), temperature, lp);
    for (std::size_t c = 0; c < logits.cols(); ++c) out(r, c) = std::exp(lp[c]);
  }
  return out;
}

// Distillation term: mean over the batch of T^2 * sum_z Q_z log(Q_z / P_z) with
// P = soften(student), Q = soften(teacher). The teacher is treated as constant;
// `dstudent` receives T * (P - Q) / B.
inline double kd_kl(const Matrix& student, const Matrix& teacher, double temperature, Matrix* dstudent = nullptr) {
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw InputError("student and teacher logits differ in shape");
  }
  if (student.rows() == 0) throw InputError("loss on an empty batch");
  const std::size_t n = student.rows();
  const std::size_t z = student.cols();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double t2 = temperature * temperature;
  if (dstudent) *dstudent = Matrix(n, z);
  std::vector<double> lp(z), lq(z);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    detail::log_softmax_row(student.row(r), temperature, lp);
    detail::log_softmax_row(teacher.row(r), temperature, lq);
    double row = 0.0;
    for (std::size_t c = 0; c < z; ++c) {
      const double q = std::exp(lq[c]);
      if (q > 0.0) row += q * (lq[c] - lp[c]);
      if (dstudent) (*dstudent)(r, c) = temperature * (std::exp(lp[c]) - q) * inv_n;
    }
    total += t2 * row;
  }
  return total * inv_n;
}

struct LossComponents {
  double classification = 0.0;
  double expert = 0.0;
  double regularisation = 0.0;

  double total() const noexcept { return classification + expert + regularisation; }
};

struct ClientLoss {
  LossComponents components;
  double total = 0.0;
  Matrix d_client;  // drives the client model (L^C + L^R)
  Matrix d_expert;  // drives the expert (L^E only)
};

// Composes the client objective. The expert logits are required whenever L^E or
// L^R is enabled; the L^R gradient never reaches the expert.
inline ClientLoss client_loss(const Matrix& client_logits, const Matrix* expert_logits, std::span<const int> labels,
                              const LossSpec& spec) {
  spec.validate();
  if (spec.needs_expert() && expert_logits == nullptr) {
    throw InputError("expert logits are required when L^E or L^R is enabled");
  }
  ClientLoss out;
  out.d_client = Matrix(client_logits.rows(), client_logits.cols());
  if (spec.classification) {
    Matrix d;
    out.components.classification = cross_entropy(client_logits, labels, &d);
    out.d_client = std::move(d);
  } else {
    detail::check_labels(client_logits, labels);
  }
  if (spec.expert) {
    out.components.expert = cross_entropy(*expert_logits, labels, &out.d_expert);
  }
  if (spec.regularisation) {
    Matrix d;
    out.components.regularisation = kd_kl(client_logits, *expert_logits, spec.temperature, &d);
    for (std::size_t i = 0; i < d.size(); ++i) out.d_client.data()[i] += d.data()[i];
  }
  out.total = out.components.total();
  return out;
}

}  // namespace fedreid
