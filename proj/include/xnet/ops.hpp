#pragma once

#include <cstdint>

#include "xnet/tensor.hpp"

namespace xnet {

// Elementwise. Operands must have equal shapes, or one of them must hold a
// single element (scalar broadcast). No other broadcasting is supported.
template <Real T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <Real T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <Real T> Tensor<T> add_scalar(const Tensor<T>& a, T value);
template <Real T> Tensor<T> relu(const Tensor<T>& x);
template <Real T> Tensor<T> sigmoid(const Tensor<T>& x);
template <Real T> Tensor<T> log(const Tensor<T>& x);

template <Real T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <Real T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <Real T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <Real T> Tensor<T> operator*(const Tensor<T>& a, T s) { return scale(a, s); }
template <Real T> Tensor<T> operator*(T s, const Tensor<T>& a) { return scale(a, s); }

// Reductions to a scalar (shape ()).
template <Real T> Tensor<T> sum(const Tensor<T>& x);
template <Real T> Tensor<T> mean(const Tensor<T>& x);

/// Same element order, new shape.
template <Real T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <Real T> Tensor<T> transpose(const Tensor<T>& x);

/// [m×k]·[k×n] → [m×n], or batched [B×m×k]·[B×k×n] → [B×m×n].
template <Real T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Max-subtracted softmax along `axis` (negative axes count from the end).
template <Real T> Tensor<T> softmax(const Tensor<T>& x, Index axis);

/// Stride-1 zero-padded "same" convolution. x: [B×Cin×H×W], weight:
/// [Cout×Cin×kh×kw] with odd kh, kw; bias: [Cout] or undefined.
template <Real T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Per-channel "same" convolution, no bias. weight: [C×kh×kw].
template <Real T> Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight);

enum class Mode { train, eval };

struct BatchNormOptions {
  double momentum = 0.99;
  double eps = 1e-5;
};

/// Per-channel normalization over (B, H, W). In train mode batch statistics
/// are used and `running_mean`/`running_var` are updated in place as
/// running = momentum·running + (1−momentum)·batch. In eval mode the running
/// statistics are used.
template <Real T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, Mode mode, BatchNormOptions options = {});

/// 2×2 stride-2 max pooling. Gradient goes to the first maximum in
/// row-major window order.
template <Real T> Tensor<T> max_pool2x2(const Tensor<T>& x);

template <Real T> Tensor<T> upsample_nearest2x(const Tensor<T>& x);

template <Real T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Hash of the branch choices (ReLU signs, max-pool winners) made by ops on
/// this thread while the object is alive. Two evaluations with equal
/// signatures lie on the same smooth piece of a piecewise-smooth network.
class BranchSignature {
 public:
  BranchSignature();
  ~BranchSignature();
  BranchSignature(const BranchSignature&) = delete;
  BranchSignature& operator=(const BranchSignature&) = delete;

  std::uint64_t value() const { return hash_; }
  void mix(std::uint64_t v) { hash_ = (hash_ ^ v) * 1099511628211ull; }

  /// Innermost live signature on this thread, or null.
  static BranchSignature* active();

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  BranchSignature* previous_;
};

}  // namespace xnet
