#pragma once

#include "xnet/layers.hpp"

namespace xnet {

/// Non-local attention block over all spatial positions.
///
/// The input map (C0 channels) is reduced to C = C0/8 channels by `reduce`.
/// Two 1×1 embeddings `alpha`, `beta` of the reduced map give the affinity
/// softmax_j(alpha_iᵀ beta_j) between every pair of positions (i, j); the
/// affinity-weighted sum of the `value` projection is added back to the
/// reduced map, projected to C0 channels by `output` and summed with the
/// input. Attention never crosses batch elements.
template <Real T>
struct FsmLayer {
  using Scalar = T;

  Conv2d<T> reduce;  // C0 → C
  Conv2d<T> alpha;   // C → C
  Conv2d<T> beta;    // C → C
  Conv2d<T> value;   // C → C
  Conv2d<T> output;  // C → C0

  FsmLayer() = default;
  /// Throws ShapeError when in_channels < 8.
  FsmLayer(Index in_channels, std::mt19937_64& rng);

  Index in_channels() const { return reduce.in_channels(); }
  Index reduced_channels() const { return reduce.out_channels(); }

  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

/// Attention map [B×N×N], N = H·W, for an already reduced map x [B×C×H×W].
/// Row i holds the weights of every position j for position i.
template <Real T>
Tensor<T> fsm_attention(const Tensor<T>& x, const FsmLayer<T>& layer);

/// Full block: x0 [B×C0×H×W] → same shape.
template <Real T>
Tensor<T> fsm_forward(const Tensor<T>& x0, const FsmLayer<T>& layer);

}  // namespace xnet
