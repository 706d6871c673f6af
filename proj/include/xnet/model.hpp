#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "xnet/fsm.hpp"
#include "xnet/layers.hpp"

namespace xnet {

enum class Arch { xnet, unet };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& name);

struct ModelConfig {
  Index in_channels = 1;
  Index out_channels = 1;
  std::array<Index, 5> base_widths{64, 128, 256, 512, 1024};
  Index width_divisor = 1;
  bool fsm_enabled = true;
  Arch arch = Arch::xnet;

  /// base_widths / width_divisor.
  std::array<Index, 5> widths() const;
  /// Throws ConfigError.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& config);
/// Strict: unknown keys and wrong types raise ConfigError. Missing keys keep defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Residual unit: three cascaded depthwise separable 3×3 convolutions, each
/// followed by BN (ReLU after the first two), plus a 1×1 conv + BN shortcut.
/// Output is ReLU(main + shortcut).
template <Real T>
struct XBlock {
  using Scalar = T;

  std::array<DepthwiseSeparableConv<T>, 3> dsc;
  std::array<BatchNorm2d<T>, 3> bn;
  Conv2d<T> residual;
  BatchNorm2d<T> residual_bn;

  XBlock() = default;
  XBlock(Index in_channels, Index out_channels, std::mt19937_64& rng);

  Index in_channels() const { return dsc[0].in_channels(); }
  Index out_channels() const { return dsc[0].out_channels(); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

/// Classic U-Net unit: (3×3 conv → BN → ReLU) × 2.
template <Real T>
struct UNetBlock {
  using Scalar = T;

  Conv2d<T> conv1, conv2;
  BatchNorm2d<T> bn1, bn2;

  UNetBlock() = default;
  UNetBlock(Index in_channels, Index out_channels, std::mt19937_64& rng);

  Index in_channels() const { return conv1.in_channels(); }
  Index out_channels() const { return conv2.out_channels(); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode);
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
};

template <Real T>
using Block = std::variant<XBlock<T>, UNetBlock<T>>;

/// Encoder-decoder segmentation network.
///
/// Graph nodes, in order: enc1..enc5 (blocks separated by 2×2 max pooling),
/// dec4..dec1 (nearest 2× upsampling, concatenation with the matching
/// encoder output, block), head (1×1 conv + sigmoid). An FsmLayer may be
/// attached after any block node; build_model attaches one after enc5 when
/// the config enables it. Input H and W must be divisible by 16.
template <Real T>
class Model {
 public:
  using Scalar = T;

  Model(const ModelConfig& config, std::uint64_t seed);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }

  /// Probabilities in (0, 1), shape (B, out_channels, H, W).
  Tensor<T> forward(const Tensor<T>& x, Mode mode);

  /// Ordered block node names (excluding the head).
  std::vector<std::string> block_names() const;
  Index channels_at(const std::string& node) const;
  bool has_fsm(const std::string& node) const { return fsm_.contains(node); }
  /// Throws ConfigError for unknown nodes or a second FSM at the same node,
  /// ShapeError when the node has fewer than 8 channels.
  void attach_fsm(const std::string& node, std::mt19937_64& rng);

  /// All tensors (trainable + BN running statistics) in graph order.
  ParameterTable<T> parameters() const;
  void collect(const std::string& prefix, ParameterTable<T>& out) const;
  /// Trainable scalar count per node ("enc5.fsm" listed separately).
  std::vector<std::pair<std::string, Index>> param_counts_by_node() const;

  /// Deep copy.
  Model clone() const;

 private:
  Block<T>& block(const std::string& node);
  const Block<T>& block(const std::string& node) const;
  Tensor<T> run_node(const std::string& node, const Tensor<T>& x, Mode mode);

  ModelConfig config_;
  std::vector<Block<T>> encoder_;  // enc1..enc5
  std::vector<Block<T>> decoder_;  // dec4..dec1
  std::map<std::string, FsmLayer<T>> fsm_;
  Conv2d<T> head_;
};

template <Real T>
Model<T> build_model(const ModelConfig& config, std::uint64_t seed) {
  return Model<T>(config, seed);
}

/// Inserts an FsmLayer after `node`, seeded independently of the model's own
/// initialization.
template <Real T>
Model<T>& attach_fsm(Model<T>& model, const std::string& node, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  model.attach_fsm(node, rng);
  return model;
}

/// Eval-mode forward on a [1×1×H×W] image, thresholded: 1 where p > threshold.
template <Real T>
std::vector<std::uint8_t> predict_mask(Model<T>& model, const Tensor<T>& image, double threshold = 0.5);

/// Copies tensor values from `from` into `into` by name; every name in
/// `into` must be present in `from` with the same shape (FormatError otherwise).
template <Real T>
void copy_parameters(const ParameterTable<T>& from, ParameterTable<T>& into);

}  // namespace xnet
