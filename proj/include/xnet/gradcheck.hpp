#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Entries checked per leaf; 0 checks every entry, otherwise a seeded sample.
  Index max_entries_per_leaf = 0;
  /// Relative error is |a − n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// When a probe point takes a different ReLU or max-pool branch than the
  /// unperturbed input (a kink inside the stencil), the step is divided by
  /// 10, at most this many times. 0 disables the branch check.
  int refinements = 0;
};

/// Leaves are perturbed in place; `loss` must recompute the scalar from
/// their current values every time it is called.
struct GradcheckCase {
  std::vector<std::pair<std::string, TensorD>> leaves;
  std::function<TensorD()> loss;
};

using GradcheckBuilder = std::function<GradcheckCase(std::mt19937_64&)>;

struct LeafError {
  std::string name;
  double max_relative_error = 0;
  Index entries_checked = 0;
  // Worst entry.
  Index worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

struct GradcheckReport {
  std::vector<LeafError> leaves;
  bool passed = false;
  std::string diagnostic;

  double max_relative_error() const;
};

/// Compares reverse-mode gradients against central differences.
GradcheckReport gradcheck(const GradcheckBuilder& builder, std::uint64_t seed, const GradcheckOptions& options = {});

struct NamedGradcheck {
  std::string name;
  GradcheckBuilder builder;
  GradcheckOptions options;
};

/// Every layer of the network plus the loss and an end-to-end reduced-width
/// X-Net, each with its pass threshold.
std::vector<NamedGradcheck> standard_gradcheck_suite();

}  // namespace xnet
