#include "xnet/losses.hpp"

#include <algorithm>
#include <cmath>

#include "xnet/ops.hpp"

namespace xnet {

namespace {

template <Real T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace

template <Real T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double smooth) {
  require_same_shape(probs, target, "dice_loss");
  const auto p = probs.data();
  const auto t = target.data();
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += static_cast<double>(p[i]) * static_cast<double>(t[i]);
    total += static_cast<double>(p[i]) + static_cast<double>(t[i]);
  }
  const double num = 2 * inter + smooth;
  const double den = total + smooth;
  const auto loss = static_cast<T>(1.0 - num / den);
  return record_op<T>("dice_loss", Shape{}, {loss}, {probs, target}, [num, den](GradContext<T>& ctx) {
    const double g = static_cast<double>(ctx.grad_output()[0]);
    // ∂L/∂a_i = −(2·b_i·den − num) / den², symmetric in (probs, target).
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      const auto other = ctx.input(1 - k);
      auto gi = ctx.grad_input(k);
      for (std::size_t i = 0; i < gi.size(); ++i) {
        gi[i] += static_cast<T>(-g * (2 * static_cast<double>(other[i]) * den - num) / (den * den));
      }
    }
  });
}

template <Real T>
Tensor<T> bce_loss(const Tensor<T>& probs, const Tensor<T>& target, double eps) {
  require_same_shape(probs, target, "bce_loss");
  const auto p = probs.data();
  const auto t = target.data();
  const double lo = eps, hi = 1.0 - eps;
  double total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
    const double ti = static_cast<double>(t[i]);
    total -= ti * std::log(pc) + (1 - ti) * std::log(1 - pc);
  }
  const double n = static_cast<double>(p.size());
  return record_op<T>("bce_loss", Shape{}, {static_cast<T>(total / n)}, {probs, target},
                      [lo, hi, n](GradContext<T>& ctx) {
                        const double g = static_cast<double>(ctx.grad_output()[0]) / n;
                        const auto p = ctx.input(0);
                        const auto t = ctx.input(1);
                        if (ctx.needs_grad(0)) {
                          auto gp = ctx.grad_input(0);
                          for (std::size_t i = 0; i < gp.size(); ++i) {
                            const double pi = static_cast<double>(p[i]);
                            if (pi < lo || pi > hi) continue;
                            const double ti = static_cast<double>(t[i]);
                            gp[i] += static_cast<T>(g * (-ti / pi + (1 - ti) / (1 - pi)));
                          }
                        }
                        if (ctx.needs_grad(1)) {
                          auto gt = ctx.grad_input(1);
                          for (std::size_t i = 0; i < gt.size(); ++i) {
                            const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
                            gt[i] += static_cast<T>(-g * (std::log(pc) - std::log(1 - pc)));
                          }
                        }
                      });
}

template <Real T>
Tensor<T> combined_loss(const Tensor<T>& probs, const Tensor<T>& target) {
  return dice_loss(probs, target) + bce_loss(probs, target);
}

template Tensor<float> dice_loss(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> dice_loss(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> bce_loss(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> bce_loss(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> combined_loss(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> combined_loss(const Tensor<double>&, const Tensor<double>&);

}  // namespace xnet
