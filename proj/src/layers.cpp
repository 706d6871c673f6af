#include "xnet/layers.hpp"

#include <cmath>

namespace xnet {

template <Real T>
Tensor<T> he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  return Tensor<T>::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <Real T>
Conv2d<T>::Conv2d(Index in_channels, Index out_channels, Index kernel, std::mt19937_64& rng)
    : weight(he_normal<T>({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng)),
      bias(Tensor<T>::zeros({out_channels})) {
  if (kernel % 2 == 0) throw ShapeError("Conv2d: kernel size must be odd");
}

template <Real T>
void Conv2d<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  out.push_back({prefix + "weight", weight, true});
  out.push_back({prefix + "bias", bias, true});
}

template <Real T>
DepthwiseSeparableConv<T>::DepthwiseSeparableConv(Index in_channels, Index out_channels, Index kernel,
                                                  std::mt19937_64& rng)
    : depthwise(he_normal<T>({in_channels, kernel, kernel}, kernel * kernel, rng)),
      pointwise(in_channels, out_channels, 1, rng) {
  if (kernel % 2 == 0) throw ShapeError("DepthwiseSeparableConv: kernel size must be odd");
}

template <Real T>
void DepthwiseSeparableConv<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  out.push_back({prefix + "depthwise", depthwise, true});
  pointwise.collect(prefix + "pointwise.", out);
}

template <Real T>
BatchNorm2d<T>::BatchNorm2d(Index channels)
    : gamma(Tensor<T>::ones({channels})),
      beta(Tensor<T>::zeros({channels})),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::ones({channels})) {}

template <Real T>
void BatchNorm2d<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  out.push_back({prefix + "gamma", gamma, true});
  out.push_back({prefix + "beta", beta, true});
  out.push_back({prefix + "running_mean", running_mean, false});
  out.push_back({prefix + "running_var", running_var, false});
}

template Tensor<float> he_normal<float>(Shape, Index, std::mt19937_64&);
template Tensor<double> he_normal<double>(Shape, Index, std::mt19937_64&);
template struct Conv2d<float>;
template struct Conv2d<double>;
template struct DepthwiseSeparableConv<float>;
template struct DepthwiseSeparableConv<double>;
template struct BatchNorm2d<float>;
template struct BatchNorm2d<double>;

}  // namespace xnet
