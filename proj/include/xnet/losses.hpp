#pragma once

#include "xnet/tensor.hpp"

namespace xnet {

/// Soft Dice over the whole batch:
/// 1 − (2·Σ p·t + smooth) / (Σ p + Σ t + smooth).
template <Real T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double smooth = 1.0);

/// Mean binary cross-entropy with probabilities clamped to [eps, 1 − eps].
/// The clamp has zero derivative outside that interval.
template <Real T>
Tensor<T> bce_loss(const Tensor<T>& probs, const Tensor<T>& target, double eps = 1e-7);

/// dice_loss + bce_loss, unweighted.
template <Real T>
Tensor<T> combined_loss(const Tensor<T>& probs, const Tensor<T>& target);

}  // namespace xnet
