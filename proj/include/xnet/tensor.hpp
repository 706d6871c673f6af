#pragma once

#include <Eigen/Core>

#include <concepts>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xnet/error.hpp"

namespace xnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

template <Real T>
constexpr DType dtype_of() {
  return std::same_as<T, float> ? DType::f32 : DType::f64;
}

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <Real T>
using ArrayX = Eigen::Array<T, Eigen::Dynamic, 1>;
template <Real T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Tensor storage. A fixed start alignment makes Eigen's vectorized loops
/// split every buffer the same way, so results do not depend on where the
/// allocator happened to place it.
template <Real T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <Real T>
class Tensor;

namespace detail {

template <Real T>
struct TensorImpl;

template <Real T>
class GradContextImpl;

}  // namespace detail

/// Handed to a backward rule: read the forward output and its gradient,
/// accumulate into the gradients of the inputs that need one.
template <Real T>
class GradContext {
 public:
  GradContext(const detail::TensorImpl<T>& out,
              const std::vector<std::shared_ptr<detail::TensorImpl<T>>>& inputs)
      : out_(out), inputs_(inputs) {}

  std::span<const T> output() const;
  std::span<const T> grad_output() const;
  std::size_t num_inputs() const { return inputs_.size(); }
  bool needs_grad(std::size_t i) const;
  /// Zero-initialized on first access; throws if input `i` does not need a gradient.
  std::span<T> grad_input(std::size_t i);
  std::span<const T> input(std::size_t i) const;
  const Shape& input_shape(std::size_t i) const;

 private:
  const detail::TensorImpl<T>& out_;
  const std::vector<std::shared_ptr<detail::TensorImpl<T>>>& inputs_;
};

template <Real T>
using BackwardFn = std::function<void(GradContext<T>&)>;

namespace detail {

template <Real T>
struct TapeNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
  std::uint64_t sequence = 0;
};

template <Real T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Whether ops currently record onto the tape (thread-local).
bool grad_enabled();

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with an optional gradient slot. Copies are shallow
/// handles onto the same storage; use clone() for a deep copy.
template <Real T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  Tensor(Shape shape, Buffer<T> data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<T>& data, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad = false);
  explicit Tensor(Shape shape);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  Index ndim() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const;

  std::span<const T> data() const;
  /// Mutable access for leaves (parameters, buffers). Throws on tape outputs.
  std::span<T> mutable_data();
  Eigen::Map<const ArrayX<T>> array() const;
  T item() const;
  T at(const Shape& index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  Tensor grad_tensor() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar; accumulates into leaf gradients.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  template <Real U>
  Tensor<U> cast() const;

  const char* op_name() const;

  std::shared_ptr<detail::TensorImpl<T>> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Appends an op to the tape. Validates that `data` is finite and matches
/// `shape`; a node is recorded only when grad mode is on and an input needs it.
template <Real T>
Tensor<T> record_op(const char* name, Shape shape, Buffer<T> data,
                    const std::vector<Tensor<T>>& inputs, BackwardFn<T> backward);

template <Real T>
void check_finite(std::span<const T> values, const char* where);

template <Real T>
template <Real U>
Tensor<U> Tensor<T>::cast() const {
  const auto src = data();
  Buffer<U> out(src.begin(), src.end());
  return Tensor<U>(shape(), std::move(out));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace xnet
