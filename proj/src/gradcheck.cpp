#include "xnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "xnet/fsm.hpp"
#include "xnet/losses.hpp"
#include "xnet/model.hpp"

namespace xnet {

double GradcheckReport::max_relative_error() const {
  double m = 0;
  for (const auto& l : leaves) m = std::max(m, l.max_relative_error);
  return m;
}

GradcheckReport gradcheck(const GradcheckBuilder& builder, std::uint64_t seed, const GradcheckOptions& options) {
  std::mt19937_64 rng(seed);
  GradcheckReport report;
  try {
    auto gc = builder(rng);
    for (auto& [name, leaf] : gc.leaves) {
      leaf.set_requires_grad(true);
      leaf.zero_grad();
    }
    std::uint64_t base_branch = 0;
    {
      NoGradGuard no_grad;
      BranchSignature outer;
      {
        BranchSignature sig;
        gc.loss();
        outer.mix(sig.value());
      }
      base_branch = outer.value();
    }
    const auto loss = gc.loss();
    if (loss.numel() != 1) throw ShapeError("gradcheck: loss is not a scalar");
    loss.backward();

    for (auto& [name, leaf] : gc.leaves) {
      const auto analytic = leaf.grad_tensor();
      std::vector<Index> entries(static_cast<std::size_t>(leaf.numel()));
      std::iota(entries.begin(), entries.end(), Index(0));
      if (options.max_entries_per_leaf > 0 && leaf.numel() > options.max_entries_per_leaf) {
        std::shuffle(entries.begin(), entries.end(), rng);
        entries.resize(static_cast<std::size_t>(options.max_entries_per_leaf));
        std::sort(entries.begin(), entries.end());
      }
      LeafError err{name, 0.0, static_cast<Index>(entries.size())};
      auto values = leaf.mutable_data();
      for (Index e : entries) {
        const auto i = static_cast<std::size_t>(e);
        const double original = values[i];
        // Central difference at `step`, or nullopt when either probe lands on
        // a different ReLU / max-pool branch than the base point.
        auto central = [&](double step) -> std::optional<double> {
          NoGradGuard no_grad;
          BranchSignature sp, sm;
          double plus = 0, minus = 0;
          values[i] = original + step;
          {
            BranchSignature sig;
            plus = gc.loss().item();
            sp.mix(sig.value());
          }
          values[i] = original - step;
          {
            BranchSignature sig;
            minus = gc.loss().item();
            sm.mix(sig.value());
          }
          values[i] = original;
          if (options.refinements > 0 && (sp.value() != base_branch || sm.value() != base_branch)) return std::nullopt;
          return (plus - minus) / (2 * step);
        };
        double step = options.step;
        auto numeric_opt = central(step);
        for (int attempt = 0; !numeric_opt && attempt < options.refinements; ++attempt) {
          step /= 10;
          numeric_opt = central(step);
        }
        if (!numeric_opt) {
          throw NumericError("gradcheck: no kink-free step for " + name + "[" + std::to_string(e) + "]");
        }
        const double numeric = *numeric_opt;
        const double a = analytic.data()[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
        const double rel = std::abs(a - numeric) / denom;
        if (!std::isfinite(rel)) throw NumericError("gradcheck: non-finite difference at " + name);
        if (rel >= err.max_relative_error) {
          err.max_relative_error = rel;
          err.worst_index = e;
          err.worst_analytic = a;
          err.worst_numeric = numeric;
        }
      }
      report.leaves.push_back(err);
    }
    report.passed = report.max_relative_error() < options.tolerance;
    if (!report.passed) {
      std::ostringstream os;
      for (const auto& l : report.leaves) {
        if (l.max_relative_error >= options.tolerance) os << l.name << "[" << l.worst_index << "]: " << l.max_relative_error << " (analytic " << l.worst_analytic
             << ", numeric " << l.worst_numeric << "); ";
      }
      report.diagnostic = "relative error above " + std::to_string(options.tolerance) + " at " + os.str();
    }
  } catch (const NumericError& e) {
    report.passed = false;
    report.diagnostic = e.what();
  }
  return report;
}

namespace {

// Σ out ⊙ R with a fixed random R, so no output direction has a trivially
// zero or constant gradient.
TensorD projection_loss(const TensorD& out, const TensorD& weights) { return sum(out * weights); }

TensorD random_like(const Shape& shape, std::mt19937_64& rng) { return TensorD::randn(shape, rng); }

GradcheckCase layer_case(std::vector<std::pair<std::string, TensorD>> leaves, std::function<TensorD()> forward,
                         const Shape& out_shape, std::mt19937_64& rng) {
  auto weights = random_like(out_shape, rng);
  return {std::move(leaves), [forward = std::move(forward), weights] { return projection_loss(forward(), weights); }};
}

void add_table(std::vector<std::pair<std::string, TensorD>>& leaves, const ParameterTable<double>& table) {
  for (const auto& e : table) {
    if (e.trainable) leaves.emplace_back(e.name, e.tensor);
  }
}

}  // namespace

std::vector<NamedGradcheck> standard_gradcheck_suite() {
  std::vector<NamedGradcheck> suite;
  const GradcheckOptions strict{};

  suite.push_back({"dense+softmax", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({4, 5}, rng);
                     auto w = TensorD::randn({5, 3}, rng);
                     return layer_case({{"x", x}, {"w", w}}, [=] { return softmax(matmul(x, w), 1); }, {4, 3}, rng);
                   },
                   strict});

  suite.push_back({"conv2d 3x3", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({2, 3, 5, 6}, rng);
                     Conv2d<double> conv(3, 4, 3, rng);
                     conv.bias = TensorD::randn({4}, rng);
                     return layer_case({{"x", x}, {"weight", conv.weight}, {"bias", conv.bias}},
                                       [=] { return conv(x); }, {2, 4, 5, 6}, rng);
                   },
                   strict});

  suite.push_back({"depthwise separable conv", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({2, 3, 6, 5}, rng);
                     DepthwiseSeparableConv<double> dsc(3, 4, 3, rng);
                     return layer_case({{"x", x},
                                        {"depthwise", dsc.depthwise},
                                        {"pointwise.weight", dsc.pointwise.weight},
                                        {"pointwise.bias", dsc.pointwise.bias}},
                                       [=] { return dsc(x); }, {2, 4, 6, 5}, rng);
                   },
                   strict});

  suite.push_back({"batchnorm (train)", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({3, 2, 4, 4}, rng);
                     auto bn = std::make_shared<BatchNorm2d<double>>(2);
                     bn->gamma = TensorD::uniform({2}, rng, 0.5, 1.5);
                     bn->beta = TensorD::randn({2}, rng);
                     return layer_case({{"x", x}, {"gamma", bn->gamma}, {"beta", bn->beta}},
                                       [=] { return (*bn)(x, Mode::train); }, {3, 2, 4, 4}, rng);
                   },
                   strict});

  suite.push_back({"max_pool2x2", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({2, 2, 6, 6}, rng);
                     return layer_case({{"x", x}}, [=] { return max_pool2x2(x); }, {2, 2, 3, 3}, rng);
                   },
                   strict});

  suite.push_back({"upsample_nearest2x", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({2, 2, 3, 4}, rng);
                     return layer_case({{"x", x}}, [=] { return upsample_nearest2x(x); }, {2, 2, 6, 8}, rng);
                   },
                   strict});

  suite.push_back({"concat_channels", [](std::mt19937_64& rng) {
                     auto a = TensorD::randn({2, 3, 4, 4}, rng);
                     auto b = TensorD::randn({2, 5, 4, 4}, rng);
                     return layer_case({{"a", a}, {"b", b}}, [=] { return concat_channels(a, b); }, {2, 8, 4, 4},
                                       rng);
                   },
                   strict});

  suite.push_back({"fsm", [](std::mt19937_64& rng) {
                     auto x0 = TensorD::randn({2, 16, 3, 3}, rng);
                     FsmLayer<double> fsm(16, rng);
                     for (auto* c : {&fsm.reduce, &fsm.alpha, &fsm.beta, &fsm.value, &fsm.output}) {
                       c->bias = TensorD::randn(c->bias.shape(), rng, 0.1);
                     }
                     std::vector<std::pair<std::string, TensorD>> leaves{{"x0", x0}};
                     ParameterTable<double> table;
                     fsm.collect("", table);
                     // Softmax is invariant to a per-row shift, and beta's bias
                     // only shifts rows, so its gradient is identically zero.
                     std::erase_if(table, [](const auto& e) { return e.name == "beta.bias"; });
                     add_table(leaves, table);
                     return layer_case(std::move(leaves), [=] { return fsm_forward(x0, fsm); }, {2, 16, 3, 3}, rng);
                   },
                   strict});

  suite.push_back({"xblock (train)", [](std::mt19937_64& rng) {
                     auto x = TensorD::randn({2, 3, 4, 4}, rng);
                     auto block = std::make_shared<XBlock<double>>(3, 4, rng);
                     std::vector<std::pair<std::string, TensorD>> leaves{{"x", x}};
                     ParameterTable<double> table;
                     block->collect("", table);
                     // Every conv bias here feeds a train-mode BN, which
                     // removes it again; those gradients are identically zero.
                     std::erase_if(table, [](const auto& e) { return e.name.ends_with(".bias"); });
                     add_table(leaves, table);
                     return layer_case(std::move(leaves), [=] { return block->forward(x, Mode::train); },
                                       {2, 4, 4, 4}, rng);
                   },
                   strict});

  suite.push_back({"combined loss", [](std::mt19937_64& rng) {
                     auto logits = TensorD::randn({2, 1, 4, 4}, rng);
                     std::bernoulli_distribution coin(0.3);
                     std::vector<double> t(32);
                     for (auto& v : t) v = coin(rng) ? 1.0 : 0.0;
                     TensorD target({2, 1, 4, 4}, t);
                     GradcheckCase gc;
                     gc.leaves = {{"logits", logits}};
                     gc.loss = [=] { return combined_loss(sigmoid(logits), target); };
                     return gc;
                   },
                   strict});

  GradcheckOptions deep;
  deep.tolerance = 1e-3;
  deep.max_entries_per_leaf = 4;
  deep.refinements = 5;
  // Several weights here are structurally inert (1×1 convs on the single
  // input channel and biases ahead of train-mode BN are undone by the
  // normalization), so their true gradient is zero and finite differences
  // return pure round-off; absolute errors below 1e-7 are accepted.
  deep.floor = 1e-4;
  suite.push_back({"x-net (width/8) end-to-end", [](std::mt19937_64& rng) {
                     ModelConfig cfg;
                     cfg.width_divisor = 8;
                     auto model = std::make_shared<Model<double>>(cfg, rng());
                     auto x = TensorD::randn({1, 1, 32, 32}, rng);
                     std::bernoulli_distribution coin(0.2);
                     std::vector<double> t(32 * 32);
                     for (auto& v : t) v = coin(rng) ? 1.0 : 0.0;
                     TensorD target({1, 1, 32, 32}, t);
                     std::vector<std::pair<std::string, TensorD>> leaves{{"input", x}};
                     add_table(leaves, model->parameters());
                     GradcheckCase gc;
                     gc.leaves = std::move(leaves);
                     gc.loss = [=] { return combined_loss(model->forward(x, Mode::train), target); };
                     return gc;
                   },
                   deep});
  return suite;
}

}  // namespace xnet
