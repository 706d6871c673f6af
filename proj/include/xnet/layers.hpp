#pragma once

#include <random>
#include <string>
#include <vector>

#include "xnet/ops.hpp"

namespace xnet {

template <Real T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;  // false for BN running statistics
};

/// Flat, ordered view of a module's tensors. Entries alias the module's
/// storage, so writes through them update the module.
template <Real T>
using ParameterTable = std::vector<NamedTensor<T>>;

/// Gaussian with variance 2/fan_in, drawn in double precision so f32 and f64
/// models built from one seed agree up to rounding.
template <Real T>
Tensor<T> he_normal(Shape shape, Index fan_in, std::mt19937_64& rng);

template <Real T>
struct Conv2d {
  using Scalar = T;

  Tensor<T> weight;  // [Cout×Cin×k×k]
  Tensor<T> bias;    // [Cout]

  Conv2d() = default;
  Conv2d(Index in_channels, Index out_channels, Index kernel, std::mt19937_64& rng);

  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }
  Index kernel_size() const { return weight.dim(2); }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias); }
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

/// k×k per-channel filter (no bias) followed by a biased 1×1 convolution.
template <Real T>
struct DepthwiseSeparableConv {
  using Scalar = T;

  Tensor<T> depthwise;  // [Cin×k×k]
  Conv2d<T> pointwise;

  DepthwiseSeparableConv() = default;
  DepthwiseSeparableConv(Index in_channels, Index out_channels, Index kernel, std::mt19937_64& rng);

  Index in_channels() const { return depthwise.dim(0); }
  Index out_channels() const { return pointwise.out_channels(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return pointwise(depthwise_conv2d(x, depthwise)); }
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

template <Real T>
struct BatchNorm2d {
  using Scalar = T;

  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  BatchNormOptions options;

  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels);

  Index channels() const { return gamma.dim(0); }

  /// Train mode updates the running statistics.
  Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean, running_var, mode, options);
  }
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

/// Trainable scalars only: conv weights, biases, BN gamma/beta.
template <typename Module>
Index count_params(const Module& module) {
  ParameterTable<typename Module::Scalar> table;
  module.collect("", table);
  Index n = 0;
  for (const auto& entry : table) {
    if (entry.trainable) n += entry.tensor.numel();
  }
  return n;
}

/// Trainable tensors of a table with requires_grad turned on.
template <Real T>
void enable_grad(ParameterTable<T>& table) {
  for (auto& entry : table) {
    if (entry.trainable) entry.tensor.set_requires_grad(true);
  }
}

}  // namespace xnet
