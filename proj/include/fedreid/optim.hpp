#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fedreid/errors.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool nesterov = true;

  bool operator==(const SgdOptions&) const = default;
};

// Momentum buffer for one parameter group.
class OptimizerState {
 public:
  OptimizerState() = default;
  OptimizerState(std::size_t length, SgdOptions opts) : opts_(opts), velocity_(length, 0.0) {}

  const SgdOptions& options() const noexcept { return opts_; }
  std::size_t size() const noexcept { return velocity_.size(); }
  std::span<double> velocity() noexcept { return velocity_; }
  std::span<const double> velocity() const noexcept { return velocity_; }
  void reset() { std::fill(velocity_.begin(), velocity_.end(), 0.0); }

 private:
  SgdOptions opts_;
  std::vector<double> velocity_;
};

// One SGD update in place:
//   g <- grad + wd * w
//   v <- mu * v + g            (when mu > 0)
//   g <- g + mu * v (Nesterov) or g <- v
//   w <- w - lr * g
// With mu = 0 and wd = 0 this is exactly w - lr * grad.
inline void sgd_step(std::span<double> params, std::span<const double> grads, OptimizerState& opt, double lr) {
  if (params.size() != grads.size() || params.size() != opt.size()) {
    throw InputError(concat_message("sgd_step shape mismatch: params ", params.size(), ", grads ", grads.size(),
                                    ", state ", opt.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw NumericError(concat_message("non-finite gradient at index ", i, " (value ", grads[i], ", param ",
                                        params[i], ")"));
    }
  }
  const auto& o = opt.options();
  auto v = opt.velocity();
  for (std::size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    if (o.weight_decay != 0.0) g += o.weight_decay * params[i];
    if (o.momentum != 0.0) {
      v[i] = o.momentum * v[i] + g;
      g = o.nesterov ? g + o.momentum * v[i] : v[i];
    }
    params[i] -= lr * g;
  }
}

// Step decay: rate(e) = base * factor^floor(e / period).
struct LrSchedule {
  double base = 0.01;
  double factor = 0.1;
  int period = 40;

  double at(int epoch) const {
    if (epoch < 0) throw InputError("learning-rate epoch must be non-negative");
    if (period <= 0) return base;
    return base * std::pow(factor, epoch / period);
  }

  bool operator==(const LrSchedule&) const = default;
};

}  // namespace fedreid
