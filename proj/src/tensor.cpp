#include "xnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace xnet {

namespace {

thread_local bool tls_grad_enabled = true;
std::atomic<std::uint64_t> next_sequence{1};

}  // namespace

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool grad_enabled() { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

template <Real T>
void check_finite(std::span<const T> values, const char* where) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + where);
  }
}

// GradContext

template <Real T>
std::span<const T> GradContext<T>::output() const {
  return out_.data;
}

template <Real T>
std::span<const T> GradContext<T>::grad_output() const {
  return out_.grad;
}

template <Real T>
bool GradContext<T>::needs_grad(std::size_t i) const {
  return inputs_.at(i)->requires_grad;
}

template <Real T>
std::span<T> GradContext<T>::grad_input(std::size_t i) {
  auto& in = *inputs_.at(i);
  if (!in.requires_grad) throw std::logic_error("grad_input on an input that does not require grad");
  return in.grad_buffer();
}

template <Real T>
std::span<const T> GradContext<T>::input(std::size_t i) const {
  return inputs_.at(i)->data;
}

template <Real T>
const Shape& GradContext<T>::input_shape(std::size_t i) const {
  return inputs_.at(i)->shape;
}

// Tensor

template <Real T>
Tensor<T>::Tensor(Shape shape, Buffer<T> data, bool requires_grad)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + to_string(shape));
  }
  if (xnet::numel(shape) != static_cast<Index>(data.size())) {
    throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                     " elements");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <Real T>
Tensor<T>::Tensor(Shape shape, const std::vector<T>& data, bool requires_grad)
    : Tensor(std::move(shape), Buffer<T>(data.begin(), data.end()), requires_grad) {}

template <Real T>
Tensor<T>::Tensor(Shape shape, std::initializer_list<T> data, bool requires_grad)
    : Tensor(std::move(shape), Buffer<T>(data), requires_grad) {}

template <Real T>
Tensor<T>::Tensor(Shape shape) : Tensor(shape, Buffer<T>(static_cast<std::size_t>(xnet::numel(shape)), T(0))) {}

template <Real T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  return Tensor(std::move(shape));
}

template <Real T>
Tensor<T> Tensor<T>::ones(Shape shape) {
  return full(std::move(shape), T(1));
}

template <Real T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = static_cast<std::size_t>(xnet::numel(shape));
  return Tensor(std::move(shape), Buffer<T>(n, value));
}

template <Real T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, Buffer<T>{value});
}

template <Real T>
Tensor<T> Tensor<T>::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Buffer<T> v(static_cast<std::size_t>(xnet::numel(shape)));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor(std::move(shape), std::move(v));
}

template <Real T>
Tensor<T> Tensor<T>::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Buffer<T> v(static_cast<std::size_t>(xnet::numel(shape)));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor(std::move(shape), std::move(v));
}

template <Real T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw std::logic_error("use of an undefined tensor");
  return impl_->shape;
}

template <Real T>
Index Tensor<T>::dim(Index axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<Index>(s.size());
  if (axis < 0 || axis >= static_cast<Index>(s.size())) throw ShapeError("axis out of range");
  return s[static_cast<std::size_t>(axis)];
}

template <Real T>
Index Tensor<T>::numel() const {
  return static_cast<Index>(impl_->data.size());
}

template <Real T>
std::span<const T> Tensor<T>::data() const {
  return impl_->data;
}

template <Real T>
std::span<T> Tensor<T>::mutable_data() {
  if (impl_->node) throw std::logic_error("cannot mutate the output of a recorded op");
  return impl_->data;
}

template <Real T>
Eigen::Map<const ArrayX<T>> Tensor<T>::array() const {
  return {impl_->data.data(), static_cast<Index>(impl_->data.size())};
}

template <Real T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <Real T>
T Tensor<T>::at(const Shape& index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch");
  Index flat = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (index[i] < 0 || index[i] >= s[i]) throw ShapeError("index out of range");
    flat = flat * s[i] + index[i];
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

template <Real T>
bool Tensor<T>::requires_grad() const {
  return impl_->requires_grad;
}

template <Real T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (impl_->node && !on) throw std::logic_error("cannot clear requires_grad on a recorded op output");
  impl_->requires_grad = on;
  return *this;
}

template <Real T>
bool Tensor<T>::is_leaf() const {
  return impl_->node == nullptr;
}

template <Real T>
bool Tensor<T>::has_grad() const {
  return !impl_->grad.empty();
}

template <Real T>
std::span<const T> Tensor<T>::grad() const {
  return impl_->grad;
}

template <Real T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (impl_->grad.empty()) return zeros(impl_->shape);
  return Tensor(impl_->shape, impl_->grad);
}

template <Real T>
void Tensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <Real T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ShapeError("backward() needs a scalar loss, got shape " + to_string(shape()));
  if (!impl_->requires_grad) throw std::logic_error("backward() on a tensor that does not require grad");

  // Gather every recorded node reachable from the loss, then replay in reverse
  // creation order; creation order is a topological order of the tape.
  std::vector<detail::TensorImpl<T>*> recorded;
  std::unordered_set<const detail::TensorImpl<T>*> seen;
  std::vector<detail::TensorImpl<T>*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!seen.insert(t).second) continue;
    if (!t->node) continue;
    recorded.push_back(t);
    for (const auto& in : t->node->inputs) {
      if (in->requires_grad) stack.push_back(in.get());
    }
  }
  std::sort(recorded.begin(), recorded.end(),
            [](const auto* a, const auto* b) { return a->node->sequence > b->node->sequence; });

  for (auto* t : recorded) t->grad.clear();
  impl_->grad_buffer()[0] += T(1);

  for (auto* t : recorded) {
    if (t->grad.empty()) continue;
    GradContext<T> ctx(*t, t->node->inputs);
    t->node->backward(ctx);
  }
}

template <Real T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template <Real T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(impl_->shape, impl_->data, impl_->requires_grad && !impl_->node);
  return out;
}

template <Real T>
const char* Tensor<T>::op_name() const {
  return impl_->node ? impl_->node->op : "leaf";
}

template <Real T>
Tensor<T> record_op(const char* name, Shape shape, Buffer<T> data, const std::vector<Tensor<T>>& inputs,
                    BackwardFn<T> backward) {
  check_finite<T>(data, name);
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<detail::TapeNode<T>>();
  node->op = name;
  node->inputs.reserve(inputs.size());
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::move(backward);
  node->sequence = next_sequence.fetch_add(1, std::memory_order_relaxed);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

template class GradContext<float>;
template class GradContext<double>;
template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> record_op(const char*, Shape, Buffer<float>, const std::vector<Tensor<float>>&,
                                 BackwardFn<float>);
template Tensor<double> record_op(const char*, Shape, Buffer<double>, const std::vector<Tensor<double>>&,
                                  BackwardFn<double>);
template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);

}  // namespace xnet
