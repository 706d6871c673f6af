#include "xnet/model.hpp"

#include <algorithm>
#include <unordered_map>

namespace xnet {

std::string to_string(Arch arch) { return arch == Arch::xnet ? "xnet" : "unet"; }

Arch arch_from_string(const std::string& name) {
  if (name == "xnet") return Arch::xnet;
  if (name == "unet") return Arch::unet;
  throw ConfigError("unknown arch '" + name + "' (expected xnet or unet)");
}

std::array<Index, 5> ModelConfig::widths() const {
  std::array<Index, 5> w{};
  for (std::size_t i = 0; i < 5; ++i) w[i] = base_widths[i] / width_divisor;
  return w;
}

void ModelConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("channel counts must be positive");
  if (width_divisor < 1) throw ConfigError("width_divisor must be a positive integer");
  for (Index w : base_widths) {
    if (w < 1) throw ConfigError("base widths must be positive");
    if (w % width_divisor != 0) {
      throw ConfigError("width " + std::to_string(w) + " is not divisible by width_divisor " +
                        std::to_string(width_divisor));
    }
  }
  if (fsm_enabled && widths()[4] < 8) throw ConfigError("the deepest width must be at least 8 when fsm is enabled");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"arch", to_string(c.arch)},
          {"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"base_widths", c.base_widths},
          {"width_divisor", c.width_divisor},
          {"fsm_enabled", c.fsm_enabled}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "arch") {
        c.arch = arch_from_string(value.get<std::string>());
      } else if (key == "in_channels") {
        c.in_channels = value.get<Index>();
      } else if (key == "out_channels") {
        c.out_channels = value.get<Index>();
      } else if (key == "base_widths") {
        if (!value.is_array() || value.size() != 5) throw ConfigError("base_widths must list exactly 5 widths");
        for (std::size_t i = 0; i < 5; ++i) c.base_widths[i] = value[i].get<Index>();
      } else if (key == "width_divisor") {
        c.width_divisor = value.get<Index>();
      } else if (key == "fsm_enabled") {
        c.fsm_enabled = value.get<bool>();
      } else {
        throw ConfigError("unknown model config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  c.validate();
  return c;
}

// XBlock

template <Real T>
XBlock<T>::XBlock(Index in_channels, Index out_channels, std::mt19937_64& rng)
    : dsc{DepthwiseSeparableConv<T>(in_channels, out_channels, 3, rng),
          DepthwiseSeparableConv<T>(out_channels, out_channels, 3, rng),
          DepthwiseSeparableConv<T>(out_channels, out_channels, 3, rng)},
      bn{BatchNorm2d<T>(out_channels), BatchNorm2d<T>(out_channels), BatchNorm2d<T>(out_channels)},
      residual(in_channels, out_channels, 1, rng),
      residual_bn(out_channels) {}

template <Real T>
Tensor<T> XBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != in_channels()) {
    throw ShapeError("XBlock: expected " + std::to_string(in_channels()) + " input channels, got shape " +
                     to_string(x.shape()));
  }
  auto main = relu(bn[0](dsc[0](x), mode));
  main = relu(bn[1](dsc[1](main), mode));
  main = bn[2](dsc[2](main), mode);
  auto shortcut = residual_bn(residual(x), mode);
  return relu(main + shortcut);
}

template <Real T>
void XBlock<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  for (std::size_t i = 0; i < 3; ++i) {
    dsc[i].collect(prefix + "dsc" + std::to_string(i + 1) + ".", out);
    bn[i].collect(prefix + "bn" + std::to_string(i + 1) + ".", out);
  }
  residual.collect(prefix + "res.", out);
  residual_bn.collect(prefix + "res_bn.", out);
}

// UNetBlock

template <Real T>
UNetBlock<T>::UNetBlock(Index in_channels, Index out_channels, std::mt19937_64& rng)
    : conv1(in_channels, out_channels, 3, rng),
      conv2(out_channels, out_channels, 3, rng),
      bn1(out_channels),
      bn2(out_channels) {}

template <Real T>
Tensor<T> UNetBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != in_channels()) {
    throw ShapeError("UNetBlock: expected " + std::to_string(in_channels()) + " input channels, got shape " +
                     to_string(x.shape()));
  }
  auto h = relu(bn1(conv1(x), mode));
  return relu(bn2(conv2(h), mode));
}

template <Real T>
void UNetBlock<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  conv1.collect(prefix + "conv1.", out);
  bn1.collect(prefix + "bn1.", out);
  conv2.collect(prefix + "conv2.", out);
  bn2.collect(prefix + "bn2.", out);
}

// Model

namespace {

template <Real T>
Block<T> make_block(Arch arch, Index in, Index out, std::mt19937_64& rng) {
  if (arch == Arch::xnet) return XBlock<T>(in, out, rng);
  return UNetBlock<T>(in, out, rng);
}

const std::array<const char*, 5> kEncoderNames{"enc1", "enc2", "enc3", "enc4", "enc5"};
const std::array<const char*, 4> kDecoderNames{"dec4", "dec3", "dec2", "dec1"};

}  // namespace

template <Real T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto w = config_.widths();
  Index in = config_.in_channels;
  for (std::size_t i = 0; i < 5; ++i) {
    encoder_.push_back(make_block<T>(config_.arch, in, w[i], rng));
    in = w[i];
  }
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t level = 3 - i;  // dec4 merges with enc4, ...
    decoder_.push_back(make_block<T>(config_.arch, in + w[level], w[level], rng));
    in = w[level];
  }
  head_ = Conv2d<T>(w[0], config_.out_channels, 1, rng);
  // FSM parameters are drawn last so the rest of the network is initialized
  // identically with and without it.
  if (config_.fsm_enabled) attach_fsm("enc5", rng);
}

template <Real T>
std::vector<std::string> Model<T>::block_names() const {
  std::vector<std::string> names(kEncoderNames.begin(), kEncoderNames.end());
  names.insert(names.end(), kDecoderNames.begin(), kDecoderNames.end());
  return names;
}

template <Real T>
Block<T>& Model<T>::block(const std::string& node) {
  return const_cast<Block<T>&>(std::as_const(*this).block(node));
}

template <Real T>
const Block<T>& Model<T>::block(const std::string& node) const {
  for (std::size_t i = 0; i < kEncoderNames.size(); ++i) {
    if (node == kEncoderNames[i]) return encoder_[i];
  }
  for (std::size_t i = 0; i < kDecoderNames.size(); ++i) {
    if (node == kDecoderNames[i]) return decoder_[i];
  }
  throw ConfigError("unknown model node '" + node + "'");
}

template <Real T>
Index Model<T>::channels_at(const std::string& node) const {
  return std::visit([](const auto& b) { return b.out_channels(); }, block(node));
}

template <Real T>
void Model<T>::attach_fsm(const std::string& node, std::mt19937_64& rng) {
  const Index c0 = channels_at(node);
  if (fsm_.contains(node)) throw ConfigError("an FSM is already attached at '" + node + "'");
  fsm_.emplace(node, FsmLayer<T>(c0, rng));
}

template <Real T>
Tensor<T> Model<T>::run_node(const std::string& node, const Tensor<T>& x, Mode mode) {
  auto y = std::visit([&](auto& b) { return b.forward(x, mode); }, block(node));
  if (auto it = fsm_.find(node); it != fsm_.end()) y = fsm_forward(y, it->second);
  return y;
}

template <Real T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, Mode mode) {
  if (x.ndim() != 4 || x.dim(1) != config_.in_channels) {
    throw ShapeError("Model: expected input (B," + std::to_string(config_.in_channels) + ",H,W), got " +
                     to_string(x.shape()));
  }
  if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
    throw ShapeError("Model: H and W must be divisible by 16, got " + to_string(x.shape()));
  }
  std::array<Tensor<T>, 5> skips;
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 5; ++i) {
    if (i > 0) h = max_pool2x2(h);
    h = run_node(kEncoderNames[i], h, mode);
    skips[i] = h;
  }
  for (std::size_t i = 0; i < 4; ++i) {
    h = concat_channels(skips[3 - i], upsample_nearest2x(h));
    h = run_node(kDecoderNames[i], h, mode);
  }
  return sigmoid(head_(h));
}

template <Real T>
void Model<T>::collect(const std::string& prefix, ParameterTable<T>& out) const {
  for (const auto& name : block_names()) {
    std::visit([&](const auto& b) { b.collect(prefix + name + ".", out); }, block(name));
    if (auto it = fsm_.find(name); it != fsm_.end()) it->second.collect(prefix + name + ".fsm.", out);
  }
  head_.collect(prefix + "head.", out);
}

template <Real T>
ParameterTable<T> Model<T>::parameters() const {
  ParameterTable<T> table;
  collect("", table);
  return table;
}

template <Real T>
std::vector<std::pair<std::string, Index>> Model<T>::param_counts_by_node() const {
  std::vector<std::pair<std::string, Index>> counts;
  for (const auto& name : block_names()) {
    counts.emplace_back(name, std::visit([](const auto& b) { return count_params(b); }, block(name)));
    if (auto it = fsm_.find(name); it != fsm_.end()) counts.emplace_back(name + ".fsm", count_params(it->second));
  }
  counts.emplace_back("head", count_params(head_));
  return counts;
}

template <Real T>
Model<T> Model<T>::clone() const {
  ModelConfig plain = config_;
  plain.fsm_enabled = false;
  Model copy(plain, 0);
  copy.config_ = config_;
  std::mt19937_64 rng(0);
  for (const auto& [node, layer] : fsm_) copy.attach_fsm(node, rng);
  auto into = copy.parameters();
  copy_parameters(parameters(), into);
  return copy;
}

template <Real T>
std::vector<std::uint8_t> predict_mask(Model<T>& model, const Tensor<T>& image, double threshold) {
  if (image.ndim() != 4 || image.dim(0) != 1 || image.dim(1) != 1) {
    throw ShapeError("predict_mask: expected a [1×1×H×W] image, got " + to_string(image.shape()));
  }
  NoGradGuard no_grad;
  const auto probs = model.forward(image, Mode::eval);
  const auto p = probs.data();
  const auto pixels = static_cast<std::size_t>(image.dim(2) * image.dim(3));
  std::vector<std::uint8_t> mask(pixels);
  for (std::size_t i = 0; i < pixels; ++i) mask[i] = static_cast<double>(p[i]) > threshold ? 1 : 0;
  return mask;
}

template <Real T>
void copy_parameters(const ParameterTable<T>& from, ParameterTable<T>& into) {
  std::unordered_map<std::string, const Tensor<T>*> index;
  for (const auto& e : from) index.emplace(e.name, &e.tensor);
  for (auto& e : into) {
    auto it = index.find(e.name);
    if (it == index.end()) throw FormatError("missing tensor '" + e.name + "'");
    if (it->second->shape() != e.tensor.shape()) {
      throw FormatError("tensor '" + e.name + "' has shape " + to_string(it->second->shape()) + ", expected " +
                        to_string(e.tensor.shape()));
    }
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), e.tensor.mutable_data().begin());
  }
}

template struct XBlock<float>;
template struct XBlock<double>;
template struct UNetBlock<float>;
template struct UNetBlock<double>;
template class Model<float>;
template class Model<double>;
template std::vector<std::uint8_t> predict_mask(Model<float>&, const Tensor<float>&, double);
template std::vector<std::uint8_t> predict_mask(Model<double>&, const Tensor<double>&, double);
template void copy_parameters(const ParameterTable<float>&, ParameterTable<float>&);
template void copy_parameters(const ParameterTable<double>&, ParameterTable<double>&);

}  // namespace xnet
