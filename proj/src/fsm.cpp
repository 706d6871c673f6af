#include "xnet/fsm.hpp"

namespace xnet {

template <Real T>
FsmLayer<T>::FsmLayer(Index in_channels, std::mt19937_64& rng) {
  if (in_channels < 8) {
    throw ShapeError("FsmLayer: needs at least 8 input channels, got " + std::to_string(in_channels));
  }
  const Index c = in_channels / 8;
  reduce = Conv2d<T>(in_channels, c, 1, rng);
  alpha = Conv2d<T>(c, c, 1, rng);
  beta = Conv2d<T>(c, c, 1, rng);
  value = Conv2d<T>(c, c, 1, rng);
  output = Conv2d<T>(c, in_channels, 1, rng);
}

template <Real T>
void FsmLayer<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  reduce.collect(prefix + "reduce.", out);
  alpha.collect(prefix + "alpha.", out);
  beta.collect(prefix + "beta.", out);
  value.collect(prefix + "value.", out);
  output.collect(prefix + "output.", out);
}

template <Real T>
Tensor<T> fsm_attention(const Tensor<T>& x, const FsmLayer<T>& layer) {
  if (x.ndim() != 4) throw ShapeError("fsm_attention: expected [B×C×H×W], got " + to_string(x.shape()));
  if (x.dim(1) != layer.reduced_channels()) {
    throw ShapeError("fsm_attention: expected " + std::to_string(layer.reduced_channels()) + " channels, got " +
                     std::to_string(x.dim(1)));
  }
  const Index b = x.dim(0), c = x.dim(1), n = x.dim(2) * x.dim(3);
  const auto a = reshape(layer.alpha(x), {b, c, n});
  const auto k = reshape(layer.beta(x), {b, c, n});
  return softmax(matmul(transpose(a), k), -1);
}

template <Real T>
Tensor<T> fsm_forward(const Tensor<T>& x0, const FsmLayer<T>& layer) {
  if (x0.ndim() != 4) throw ShapeError("fsm_forward: expected [B×C0×H×W], got " + to_string(x0.shape()));
  if (x0.dim(1) != layer.in_channels()) {
    throw ShapeError("fsm_forward: layer expects " + std::to_string(layer.in_channels()) + " channels, got " +
                     std::to_string(x0.dim(1)));
  }
  const Index b = x0.dim(0), h = x0.dim(2), w = x0.dim(3);
  const Index c = layer.reduced_channels();
  const Index n = h * w;
  const auto x = layer.reduce(x0);
  const auto f = fsm_attention(x, layer);                  // [B×N×N]
  const auto y = reshape(layer.value(x), {b, c, n});       // [B×C×N]
  // Z[c, i] = Σ_j f[i, j]·Y[c, j] + X[c, i]
  const auto z = matmul(y, transpose(f)) + reshape(x, {b, c, n});
  return layer.output(reshape(z, {b, c, h, w})) + x0;
}

template struct FsmLayer<float>;
template struct FsmLayer<double>;
template Tensor<float> fsm_attention(const Tensor<float>&, const FsmLayer<float>&);
template Tensor<double> fsm_attention(const Tensor<double>&, const FsmLayer<double>&);
template Tensor<float> fsm_forward(const Tensor<float>&, const FsmLayer<float>&);
template Tensor<double> fsm_forward(const Tensor<double>&, const FsmLayer<double>&);

}  // namespace xnet
