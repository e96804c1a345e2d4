#pragma once

#include <algorithm>
#include <cmath>
#include <span>

#include "fedreid/errors.hpp"
#include "fedreid/losses.hpp"
#include "fedreid/nn.hpp"

namespace fedreid {

struct BackwardResult {
  Gradients grads;
  double loss = 0.0;
};

// Loss seen by one model given its logits: L^C and/or L^R per `spec`
// (L^E is the expert's own classification term; pass an expert-only spec to
// get it). `scale` multiplies both loss and gradients.
inline double model_loss(const Matrix& logits, std::span<const int> labels, const LossSpec& spec,
                         const Matrix* teacher_logits, Matrix* dlogits) {
  spec.validate();
  if (spec.regularisation && teacher_logits == nullptr) {
    throw InputError("teacher logits are required when L^R is enabled");
  }
  double loss = 0.0;
  if (dlogits) *dlogits = Matrix(logits.rows(), logits.cols());
  if (spec.classification || spec.expert) {
    Matrix d;
    loss += cross_entropy(logits, labels, dlogits ? &d : nullptr);
    if (dlogits) *dlogits = std::move(d);
  }
  if (spec.regularisation) {
    Matrix d;
    loss += kd_kl(logits, *teacher_logits, spec.temperature, dlogits ? &d : nullptr);
    if (dlogits) {
      for (std::size_t i = 0; i < d.size(); ++i) dlogits->data()[i] += d.data()[i];
    }
  }
  return loss;
}

// Reverse pass for a model whose forward cache holds `logits`.
inline BackwardResult backward(const Model& model, const Matrix& logits, std::span<const int> labels,
                               const LossSpec& spec, const Matrix* teacher_logits = nullptr, double scale = 1.0) {
  if (!model.head.has_cache() || !model.embed.has_cache()) {
    throw UsageError("backward requires a forward pass on this batch first");
  }
  Matrix d;
  BackwardResult out;
  out.loss = scale * model_loss(logits, labels, spec, teacher_logits, &d);
  if (scale != 1.0) {
    for (double& v : d.data()) v *= scale;
  }
  out.grads = model.backward(d);
  return out;
}

namespace detail {

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central differences over every entry of `values`, compared to `analytic`.
template <typename LossFn>
double check_block(std::span<double> values, std::span<const double> analytic, double eps, double floor,
                   LossFn&& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = loss();
    values[i] = saved - eps;
    const double down = loss();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric, floor);
    if (std::isnan(err)) return err;
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace detail

// Default scale below which differences are judged absolutely rather than relatively.
inline constexpr double kGradCheckFloor = 1e-3;

// Maximum relative error between backward() and central differences of the
// loss with respect to every parameter of `model`. Requires a deterministic
// forward: dropout must be off. `train` selects batch-norm batch statistics.
inline double grad_check(Model& model, const Matrix& batch, std::span<const int> labels, const LossSpec& spec,
                         double eps = 1e-5, const Matrix* teacher_logits = nullptr, bool train = false) {
  if (train && model.head.dropout_active()) throw ConfigError("grad_check requires dropout to be disabled");
  auto loss = [&] { return model_loss(model.forward(batch, train, nullptr), labels, spec, teacher_logits, nullptr); };
  Matrix logits = model.forward(batch, train, nullptr);
  const BackwardResult res = backward(model, logits, labels, spec, teacher_logits);
  const double e1 = detail::check_block(model.embed.params().values(), res.grads.embed.values(), eps,
                                        kGradCheckFloor, loss);
  const double e2 = detail::check_block(model.head.params().values(), res.grads.head.values(), eps,
                                        kGradCheckFloor, loss);
  if (std::isnan(e1) || std::isnan(e2)) return std::nan("");
  return std::max(e1, e2);
}

// Checks the full client objective L^C + L^E + L^R: client parameters against
// L^C + L^R with the expert as a fixed teacher, expert parameters against L^E.
inline double grad_check_objective(Model& client, Model& expert, const Matrix& client_batch,
                                   const Matrix& expert_batch, std::span<const int> labels, const LossSpec& spec,
                                   double eps = 1e-5) {
  const Matrix teacher = expert.forward(expert_batch, false, nullptr);
  LossSpec client_spec = spec;
  client_spec.expert = false;
  double worst = 0.0;
  if (client_spec.classification || client_spec.regularisation) {
    worst = grad_check(client, client_batch, labels, client_spec, eps, &teacher);
  }
  if (spec.expert) {
    LossSpec expert_spec{false, true, false, spec.temperature};
    worst = std::max(worst, grad_check(expert, expert_batch, labels, expert_spec, eps));
  }
  return worst;
}

}  // namespace fedreid
