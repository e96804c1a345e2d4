#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "fedreid/errors.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

// One dense layer's storage: a rows x cols weight matrix followed by a bias
// vector of length `bias`. Non-dense entries (batch-norm scale/shift) use
// rows = 1.
struct LayerShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t bias = 0;

  std::size_t size() const noexcept { return rows * cols + bias; }
  bool operator==(const LayerShape&) const = default;
};

// Flat parameter (or gradient) storage for a stack of layers.
//
// The values of layer l live at [offset(l), offset(l) + shape(l).size()), weights
// first in row-major order, then bias. The total length always equals the sum of
// the layer sizes.
class ParamBlock {
 public:
  ParamBlock() = default;
  explicit ParamBlock(std::vector<LayerShape> shapes) : shapes_(std::move(shapes)) {
    offsets_.reserve(shapes_.size());
    std::size_t total = 0;
    for (const auto& s : shapes_) {
      offsets_.push_back(total);
      total += s.size();
    }
    values_.assign(total, 0.0);
  }
  ParamBlock(std::vector<LayerShape> shapes, std::vector<double> values) : ParamBlock(std::move(shapes)) {
    if (values.size() != values_.size()) {
      throw InputError(concat_message("parameter length ", values.size(), " does not match layer shapes (",
                                      values_.size(), ")"));
    }
    values_ = std::move(values);
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::size_t layer_count() const noexcept { return shapes_.size(); }
  const std::vector<LayerShape>& shapes() const noexcept { return shapes_; }
  const LayerShape& shape(std::size_t layer) const { return shapes_.at(layer); }
  std::size_t offset(std::size_t layer) const { return offsets_.at(layer); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::vector<double>& storage() noexcept { return values_; }

  std::span<double> layer(std::size_t l) { return {values_.data() + offset(l), shape(l).size()}; }
  std::span<const double> layer(std::size_t l) const { return {values_.data() + offset(l), shape(l).size()}; }

  std::span<double> weights(std::size_t l) { return layer(l).first(shape(l).rows * shape(l).cols); }
  std::span<const double> weights(std::size_t l) const { return layer(l).first(shape(l).rows * shape(l).cols); }
  std::span<double> bias(std::size_t l) { return layer(l).last(shape(l).bias); }
  std::span<const double> bias(std::size_t l) const { return layer(l).last(shape(l).bias); }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }
  bool finite() const { return all_finite(values_); }
  bool same_layout(const ParamBlock& other) const { return shapes_ == other.shapes_; }

  // Zero-filled block with this block's layout.
  ParamBlock zeros_like() const { return ParamBlock(shapes_); }

  bool operator==(const ParamBlock& other) const {
    return shapes_ == other.shapes_ && values_ == other.values_;
  }

 private:
  std::vector<LayerShape> shapes_;
  std::vector<std::size_t> offsets_;
  std::vector<double> values_;
};

// Layout-preserving concatenation: layers of `a` followed by layers of `b`.
inline ParamBlock concat(const ParamBlock& a, const ParamBlock& b) {
  std::vector<LayerShape> shapes = a.shapes();
  shapes.insert(shapes.end(), b.shapes().begin(), b.shapes().end());
  std::vector<double> values(a.values().begin(), a.values().end());
  values.insert(values.end(), b.values().begin(), b.values().end());
  return ParamBlock(std::move(shapes), std::move(values));
}

// Inverse of concat: the first `layers` layers and the rest.
inline std::pair<ParamBlock, ParamBlock> split_layers(const ParamBlock& block, std::size_t layers) {
  if (layers > block.layer_count()) throw InputError("split_layers: not enough layers");
  std::vector<LayerShape> head(block.shapes().begin(), block.shapes().begin() + static_cast<std::ptrdiff_t>(layers));
  std::vector<LayerShape> tail(block.shapes().begin() + static_cast<std::ptrdiff_t>(layers), block.shapes().end());
  const std::size_t cut = layers == block.layer_count() ? block.size() : block.offset(layers);
  auto v = block.values();
  return {ParamBlock(std::move(head), std::vector<double>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(cut))),
          ParamBlock(std::move(tail), std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(cut), v.end()))};
}

}  // namespace fedreid
