#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "fedreid/errors.hpp"
#include "fedreid/param_block.hpp"
#include "fedreid/rng.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

namespace detail {

// y = x W + b for the dense layer stored at `layer`; W is in_dim x out_dim.
inline Matrix dense_forward(const ParamBlock& p, std::size_t layer, const Matrix& x) {
  const auto& s = p.shape(layer);
  if (x.cols() != s.rows) {
    throw ConfigError(concat_message("dense layer expects ", s.rows, " inputs, got ", x.cols()));
  }
  auto w = p.weights(layer);
  auto b = p.bias(layer);
  Matrix y(x.rows(), s.cols);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto out = y.row(r);
    std::copy(b.begin(), b.end(), out.begin());
    auto in = x.row(r);
    for (std::size_t i = 0; i < s.rows; ++i) {
      const double xi = in[i];
      if (xi == 0.0) continue;
      const double* wi = w.data() + i * s.cols;
      for (std::size_t o = 0; o < s.cols; ++o) out[o] += xi * wi[o];
    }
  }
  return y;
}

// Accumulates dW, db into `grad` and returns dx.
inline Matrix dense_backward(const ParamBlock& p, std::size_t layer, const Matrix& x, const Matrix& dy,
                             ParamBlock& grad, bool need_dx = true) {
  const auto& s = p.shape(layer);
  auto w = p.weights(layer);
  auto gw = grad.weights(layer);
  auto gb = grad.bias(layer);
  Matrix dx = need_dx ? Matrix(x.rows(), s.rows) : Matrix();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto d = dy.row(r);
    auto in = x.row(r);
    for (std::size_t o = 0; o < s.cols; ++o) gb[o] += d[o];
    for (std::size_t i = 0; i < s.rows; ++i) {
      const double xi = in[i];
      double* gwi = gw.data() + i * s.cols;
      const double* wi = w.data() + i * s.cols;
      double acc = 0.0;
      for (std::size_t o = 0; o < s.cols; ++o) {
        gwi[o] += xi * d[o];
        acc += d[o] * wi[o];
      }
      if (need_dx) dx(r, i) = acc;
    }
  }
  return dx;
}

// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); bias zero.
inline void glorot_init(ParamBlock& p, std::size_t layer, Rng& rng) {
  const auto& s = p.shape(layer);
  const double a = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
  std::uniform_real_distribution<double> dist(-a, a);
  for (double& w : p.weights(layer)) w = dist(rng);
  for (double& b : p.bias(layer)) b = 0.0;
}

inline void relu_inplace(Matrix& m) {
  for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

}  // namespace detail

// Feature embedding network: a ReLU multi-layer perceptron over input vectors.
// dims = {input, hidden..., embedding}; no activation after the last layer.
class EmbeddingNet {
 public:
  EmbeddingNet() = default;
  explicit EmbeddingNet(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw ConfigError("embedding net needs at least input and output dims");
    std::vector<LayerShape> shapes;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      if (dims_[l] == 0 || dims_[l + 1] == 0) throw ConfigError("embedding net dims must be positive");
      shapes.push_back({dims_[l], dims_[l + 1], dims_[l + 1]});
    }
    params_ = ParamBlock(std::move(shapes));
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t layer_count() const { return params_.layer_count(); }

  ParamBlock& params() noexcept { return params_; }
  const ParamBlock& params() const noexcept { return params_; }

  void init(Rng& rng) {
    for (std::size_t l = 0; l < params_.layer_count(); ++l) detail::glorot_init(params_, l, rng);
  }

  // Stateless forward pass.
  Matrix infer(const Matrix& x) const { return run(x, nullptr, nullptr); }

  // Forward pass that keeps per-layer inputs and pre-activations for backward.
  Matrix forward(const Matrix& x) {
    inputs_.clear();
    pre_.clear();
    return run(x, &inputs_, &pre_);
  }

  bool has_cache() const noexcept { return !inputs_.empty(); }
  void clear_cache() {
    inputs_.clear();
    pre_.clear();
  }

  // Accumulates parameter gradients into `grad` (same layout as params()) and
  // returns the gradient with respect to the input batch.
  Matrix backward(const Matrix& dout, ParamBlock& grad) const {
    if (!has_cache()) throw UsageError("embedding backward called without a forward cache");
    if (!grad.same_layout(params_)) throw InputError("embedding gradient layout mismatch");
    Matrix d = dout;
    for (std::size_t l = params_.layer_count(); l-- > 0;) {
      if (l + 1 < params_.layer_count()) {
        const Matrix& pre = pre_[l];
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (!(pre.data()[i] > 0.0)) d.data()[i] = 0.0;
        }
      }
      d = detail::dense_backward(params_, l, inputs_[l], d, grad);
    }
    return d;
  }

 private:
  Matrix run(const Matrix& x, std::vector<Matrix>* inputs, std::vector<Matrix>* pre) const {
    if (x.cols() != input_dim()) {
      throw ConfigError(concat_message("embedding net expects ", input_dim(), " input features, got ", x.cols()));
    }
    if (x.rows() == 0) throw ConfigError("embedding forward on an empty batch");
    Matrix h = x;
    for (std::size_t l = 0; l < params_.layer_count(); ++l) {
      if (inputs) inputs->push_back(h);
      h = detail::dense_forward(params_, l, h);
      if (l + 1 < params_.layer_count()) {
        if (pre) pre->push_back(h);
        detail::relu_inplace(h);
      }
    }
    return h;
  }

  std::vector<std::size_t> dims_;
  ParamBlock params_;
  std::vector<Matrix> inputs_;
  std::vector<Matrix> pre_;
};

struct MappingOptions {
  bool batch_norm = false;
  double keep_prob = 1.0;  // dropout keep probability; 1 disables dropout
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;

  bool operator==(const MappingOptions&) const = default;
};

// Classification head: FC -> [batch-norm] -> ReLU -> [dropout] -> FC.
class MappingNet {
 public:
  MappingNet() = default;
  MappingNet(std::size_t input_dim, std::size_t hidden, std::size_t classes, MappingOptions opts = {})
      : input_dim_(input_dim), hidden_(hidden), classes_(classes), opts_(opts) {
    if (input_dim == 0 || hidden == 0 || classes == 0) throw ConfigError("mapping net dims must be positive");
    if (!(opts.keep_prob > 0.0 && opts.keep_prob <= 1.0)) throw ConfigError("keep probability must be in (0, 1]");
    std::vector<LayerShape> shapes{{input_dim, hidden, hidden}};
    if (opts.batch_norm) shapes.push_back({1, hidden, hidden});
    shapes.push_back({hidden, classes, classes});
    params_ = ParamBlock(std::move(shapes));
    if (opts.batch_norm) {
      for (double& g : params_.weights(1)) g = 1.0;
      running_mean_.assign(hidden, 0.0);
      running_var_.assign(hidden, 1.0);
    }
  }

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t hidden_dim() const noexcept { return hidden_; }
  std::size_t classes() const noexcept { return classes_; }
  const MappingOptions& options() const noexcept { return opts_; }
  bool dropout_active() const noexcept { return opts_.keep_prob < 1.0; }

  ParamBlock& params() noexcept { return params_; }
  const ParamBlock& params() const noexcept { return params_; }

  // Batch-norm running statistics (empty when batch-norm is off).
  std::vector<double>& running_mean() noexcept { return running_mean_; }
  std::vector<double>& running_var() noexcept { return running_var_; }
  const std::vector<double>& running_mean() const noexcept { return running_mean_; }
  const std::vector<double>& running_var() const noexcept { return running_var_; }

  void init(Rng& rng) {
    detail::glorot_init(params_, 0, rng);
    if (opts_.batch_norm) {
      for (double& g : params_.weights(1)) g = 1.0;
      for (double& b : params_.bias(1)) b = 0.0;
    }
    detail::glorot_init(params_, last_layer(), rng);
  }

  // Eval mode uses running statistics and no dropout; train mode uses batch
  // statistics, updates the running averages, and draws a dropout mask from
  // `rng` (row-major, one uniform per hidden unit).
  Matrix forward(const Matrix& v, bool train, Rng* rng) {
    if (v.cols() != input_dim_) {
      throw ConfigError(concat_message("mapping net expects ", input_dim_, " features, got ", v.cols()));
    }
    if (v.rows() == 0) throw ConfigError("mapping forward on an empty batch");
    const bool use_dropout = train && dropout_active();
    if (use_dropout && rng == nullptr) throw UsageError("dropout is active but no rng was supplied");

    Cache c;
    c.train = train;
    c.input = v;
    Matrix h = detail::dense_forward(params_, 0, v);
    if (opts_.batch_norm) h = batch_norm_forward(h, train, c);
    c.pre = h;
    detail::relu_inplace(h);
    if (use_dropout) {
      c.mask = Matrix(h.rows(), h.cols());
      const double scale = 1.0 / opts_.keep_prob;
      for (std::size_t i = 0; i < h.size(); ++i) {
        const double m = uniform01(*rng) < opts_.keep_prob ? scale : 0.0;
        c.mask->data()[i] = m;
        h.data()[i] *= m;
      }
    }
    c.hidden = h;
    Matrix logits = detail::dense_forward(params_, last_layer(), h);
    cache_ = std::move(c);
    return logits;
  }

  bool has_cache() const noexcept { return cache_.has_value(); }
  void clear_cache() { cache_.reset(); }

  // Accumulates into `grad` and returns the gradient with respect to the input features.
  Matrix backward(const Matrix& dlogits, ParamBlock& grad) const {
    if (!cache_) throw UsageError("mapping backward called without a forward cache");
    if (!grad.same_layout(params_)) throw InputError("mapping gradient layout mismatch");
    const Cache& c = *cache_;
    Matrix d = detail::dense_backward(params_, last_layer(), c.hidden, dlogits, grad);
    if (c.mask) {
      for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] *= c.mask->data()[i];
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!(c.pre.data()[i] > 0.0)) d.data()[i] = 0.0;
    }
    if (opts_.batch_norm) d = batch_norm_backward(d, grad, c);
    return detail::dense_backward(params_, 0, c.input, d, grad);
  }

 private:
  struct Cache {
    bool train = false;
    Matrix input;
    Matrix normalised;             // x-hat, batch-norm only
    std::vector<double> inv_std;   // batch-norm only
    Matrix pre;                    // input to ReLU
    std::optional<Matrix> mask;    // dropout mask, already scaled by 1/keep
    Matrix hidden;                 // input to the output layer
  };

  std::size_t last_layer() const { return params_.layer_count() - 1; }

  Matrix batch_norm_forward(const Matrix& h, bool train, Cache& c) {
    const std::size_t n = h.rows();
    const std::size_t width = h.cols();
    std::vector<double> mean(width, 0.0), var(width, 0.0);
    if (train) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < width; ++j) mean[j] += h(r, j);
      for (double& m : mean) m /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < width; ++j) var[j] += (h(r, j) - mean[j]) * (h(r, j) - mean[j]);
      const double mom = opts_.bn_momentum;
      for (std::size_t j = 0; j < width; ++j) {
        const double unbiased = n > 1 ? var[j] / static_cast<double>(n - 1) : 0.0;
        var[j] /= static_cast<double>(n);
        running_mean_[j] = mom * running_mean_[j] + (1.0 - mom) * mean[j];
        running_var_[j] = mom * running_var_[j] + (1.0 - mom) * unbiased;
      }
    } else {
      mean = running_mean_;
      var = running_var_;
    }
    auto gamma = params_.weights(1);
    auto beta = params_.bias(1);
    c.inv_std.resize(width);
    for (std::size_t j = 0; j < width; ++j) c.inv_std[j] = 1.0 / std::sqrt(var[j] + opts_.bn_eps);
    c.normalised = Matrix(n, width);
    Matrix out(n, width);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < width; ++j) {
        const double xh = (h(r, j) - mean[j]) * c.inv_std[j];
        c.normalised(r, j) = xh;
        out(r, j) = gamma[j] * xh + beta[j];
      }
    }
    return out;
  }

  Matrix batch_norm_backward(const Matrix& dy, ParamBlock& grad, const Cache& c) const {
    const std::size_t n = dy.rows();
    const std::size_t width = dy.cols();
    auto gamma = params_.weights(1);
    auto ggamma = grad.weights(1);
    auto gbeta = grad.bias(1);
    Matrix dh(n, width);
    for (std::size_t j = 0; j < width; ++j) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        sum_dy += dy(r, j);
        sum_dy_xh += dy(r, j) * c.normalised(r, j);
      }
      ggamma[j] += sum_dy_xh;
      gbeta[j] += sum_dy;
      const double g = gamma[j] * c.inv_std[j];
      if (c.train) {
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          dh(r, j) = g * (dy(r, j) - inv_n * sum_dy - c.normalised(r, j) * inv_n * sum_dy_xh);
        }
      } else {
        for (std::size_t r = 0; r < n; ++r) dh(r, j) = g * dy(r, j);
      }
    }
    return dh;
  }

  std::size_t input_dim_ = 0;
  std::size_t hidden_ = 0;
  std::size_t classes_ = 0;
  MappingOptions opts_;
  ParamBlock params_;
  std::vector<double> running_mean_;
  std::vector<double> running_var_;
  std::optional<Cache> cache_;
};

struct Gradients {
  ParamBlock embed;
  ParamBlock head;
};

// Embedding network plus classification head, i.e. one client model or expert.
struct Model {
  EmbeddingNet embed;
  MappingNet head;

  Model() = default;
  Model(EmbeddingNet e, MappingNet h) : embed(std::move(e)), head(std::move(h)) {
    if (embed.output_dim() != head.input_dim()) throw ConfigError("embedding dim does not match head input dim");
  }

  Matrix forward(const Matrix& x, bool train, Rng* rng) { return head.forward(embed.forward(x), train, rng); }

  Gradients backward(const Matrix& dlogits) const {
    Gradients g{embed.params().zeros_like(), head.params().zeros_like()};
    Matrix dv = head.backward(dlogits, g.head);
    embed.backward(dv, g.embed);
    return g;
  }

  void clear_cache() {
    embed.clear_cache();
    head.clear_cache();
  }
};

// Head parameters plus batch-norm running statistics as one block; the
// statistics are stored as an extra {1, hidden, hidden} layer (mean, var).
inline ParamBlock head_state(const MappingNet& head) {
  if (!head.options().batch_norm) return head.params();
  std::vector<double> stats = head.running_mean();
  stats.insert(stats.end(), head.running_var().begin(), head.running_var().end());
  return concat(head.params(), ParamBlock({{1, head.hidden_dim(), head.hidden_dim()}}, std::move(stats)));
}

inline void set_head_state(MappingNet& head, const ParamBlock& state) {
  const std::size_t n = head.params().layer_count();
  if (!head.options().batch_norm) {
    if (!state.same_layout(head.params())) throw ProtocolError("head state layout mismatch");
    std::copy(state.values().begin(), state.values().end(), head.params().values().begin());
    return;
  }
  if (state.layer_count() != n + 1) throw ProtocolError("head state layout mismatch");
  auto [params, stats] = split_layers(state, n);
  if (!params.same_layout(head.params())) throw ProtocolError("head state layout mismatch");
  std::copy(params.values().begin(), params.values().end(), head.params().values().begin());
  auto mean = stats.weights(0);
  auto var = stats.bias(0);
  std::copy(mean.begin(), mean.end(), head.running_mean().begin());
  std::copy(var.begin(), var.end(), head.running_var().begin());
}

// Every number in a model: embedding, head, then batch-norm statistics.
inline ParamBlock full_state(const Model& m) { return concat(m.embed.params(), head_state(m.head)); }

inline void set_full_state(Model& m, const ParamBlock& state) {
  auto [embed, head] = split_layers(state, m.embed.layer_count());
  if (!embed.same_layout(m.embed.params())) throw ProtocolError("embedding layout mismatch");
  m.embed.params() = std::move(embed);
  set_head_state(m.head, head);
}

}  // namespace fedreid
