#include "xnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "xnet/losses.hpp"
#include "xnet/xten.hpp"

namespace xnet {

namespace fs = std::filesystem;

// --- Evaluation --------------------------------------------------------------

template <Real T>
Evaluation evaluate(Model<T>& model, std::span<const Volume* const> volumes, Index height, Index width,
                    Index batch_size) {
  if (volumes.empty()) throw ConfigError("evaluate: no volumes to evaluate");
  NoGradGuard no_grad;
  Evaluation result;
  double loss_sum = 0;
  std::size_t slices = 0;
  const auto pixels = static_cast<std::size_t>(height * width);
  for (const Volume* vol : volumes) {
    BatchStream<T> stream({vol}, height, width, batch_size, 0, false);
    ConfusionCounts counts;
    for (const auto& batch : stream.epoch(0)) {
      const auto probs = model.forward(batch.images, Mode::eval);
      const auto n = static_cast<std::size_t>(batch.images.dim(0));
      loss_sum += static_cast<double>(combined_loss(probs, batch.masks).item()) * static_cast<double>(n);
      slices += n;
      const auto p = probs.data();
      const auto t = batch.masks.data();
      std::vector<std::uint8_t> pred(pixels), truth(pixels);
      for (std::size_t s = 0; s < n; ++s) {
        for (std::size_t i = 0; i < pixels; ++i) {
          pred[i] = static_cast<double>(p[s * pixels + i]) > 0.5 ? 1 : 0;
          truth[i] = t[s * pixels + i] > T(0.5) ? 1 : 0;
        }
        counts += confusion(pred, truth);
      }
    }
    result.report.volumes.push_back({vol->id, counts, metrics_from_counts(counts)});
  }
  result.report.finalize();
  result.mean_loss = loss_sum / static_cast<double>(slices);
  return result;
}

// --- Optimizer and schedule --------------------------------------------------

template <Real T>
void adam_step(ParameterTable<T>& params, AdamState<T>& state) {
  if (!(state.lr >= 0)) throw ConfigError("adam: learning rate must be non-negative");
  for (const auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adam: non-finite gradient for '" + p.name + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.empty()) m.assign(g.size(), T(0));
    if (v.empty()) v.assign(g.size(), T(0));
    if (m.size() != g.size() || v.size() != g.size()) throw ShapeError("adam: moment shape mismatch for '" + p.name + "'");
    auto w = p.tensor.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(state.beta1 * m[i] + (1 - state.beta1) * gi);
      v[i] = static_cast<T>(state.beta2 * v[i] + (1 - state.beta2) * gi * gi);
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

double PlateauScheduler::update(double value, double lr) {
  if (!best || value < *best) {
    best = value;
    stalled = 0;
    return lr;
  }
  if (++stalled >= patience) {
    stalled = 0;
    return std::max(lr * factor, min_lr);
  }
  return lr;
}

// --- Configuration -----------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 1 || epochs > 100) throw ConfigError("epochs must lie in [1, 100]");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(initial_lr > 0)) throw ConfigError("initial_lr must be positive");
  if (folds < 2) throw ConfigError("folds must be at least 2");
  if (fold < 0 || fold >= folds) throw ConfigError("fold must lie in [0, folds)");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("plateau_factor must lie in (0, 1)");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be positive");
  if (!(min_lr > 0)) throw ConfigError("min_lr must be positive");
  if (crop && (crop->first % 16 != 0 || crop->second % 16 != 0 || crop->first <= 0 || crop->second <= 0)) {
    throw ConfigError("crop sides must be positive multiples of 16");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"epochs", c.epochs},
                   {"batch_size", c.batch_size},
                   {"initial_lr", c.initial_lr},
                   {"seed", c.seed},
                   {"deterministic", c.deterministic},
                   {"fold", c.fold},
                   {"folds", c.folds},
                   {"plateau_factor", c.plateau_factor},
                   {"plateau_patience", c.plateau_patience},
                   {"min_lr", c.min_lr}};
  j["crop"] = c.crop ? nlohmann::json::array({c.crop->first, c.crop->second}) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "epochs") {
        c.epochs = value.get<int>();
      } else if (key == "batch_size") {
        c.batch_size = value.get<Index>();
      } else if (key == "initial_lr") {
        c.initial_lr = value.get<double>();
      } else if (key == "seed") {
        c.seed = value.get<std::uint64_t>();
      } else if (key == "deterministic") {
        c.deterministic = value.get<bool>();
      } else if (key == "fold") {
        c.fold = value.get<int>();
      } else if (key == "folds") {
        c.folds = value.get<int>();
      } else if (key == "plateau_factor") {
        c.plateau_factor = value.get<double>();
      } else if (key == "plateau_patience") {
        c.plateau_patience = value.get<int>();
      } else if (key == "min_lr") {
        c.min_lr = value.get<double>();
      } else if (key == "crop") {
        if (value.is_null()) {
          c.crop.reset();
        } else {
          if (!value.is_array() || value.size() != 2) throw ConfigError("crop must be [height, width] or null");
          c.crop = std::pair{value[0].get<Index>(), value[1].get<Index>()};
        }
      } else {
        throw ConfigError("unknown train config key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json history_to_json(std::span<const EpochRecord> history) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : history) {
    out.push_back({{"epoch", r.epoch},
                   {"lr", r.lr},
                   {"train_loss", r.train_loss},
                   {"val_loss", r.val_loss},
                   {"val_dice", r.val_dice}});
  }
  return out;
}

std::vector<EpochRecord> history_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  try {
    for (const auto& r : j) {
      out.push_back({r.at("epoch").get<int>(), r.at("lr").get<double>(), r.at("train_loss").get<double>(),
                     r.at("val_loss").get<double>(), r.at("val_dice").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed history: ") + e.what());
  }
  return out;
}

// --- Checkpoints -------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'X', 'N', 'C', 'K'};

nlohmann::json state_json(int epochs_done, std::uint64_t adam_step, double lr, const PlateauScheduler& s,
                          std::span<const EpochRecord> history, double best_val_dice) {
  return {{"epochs_done", epochs_done},
          {"adam_step", adam_step},
          {"lr", lr},
          {"scheduler",
           {{"factor", s.factor},
            {"patience", s.patience},
            {"min_lr", s.min_lr},
            {"best", s.best ? nlohmann::json(*s.best) : nlohmann::json(nullptr)},
            {"stalled", s.stalled}}},
          {"history", history_to_json(history)},
          {"best_val_dice", best_val_dice}};
}

}  // namespace

template <Real T>
Checkpoint<T> make_checkpoint(const Model<T>& model, const TrainConfig& train_config, const AdamState<T>* adam) {
  Checkpoint<T> ckpt;
  ckpt.model_config = model.config();
  ckpt.train_config = train_config;
  ckpt.lr = train_config.initial_lr;
  ckpt.scheduler = {train_config.plateau_factor, train_config.plateau_patience, train_config.min_lr, {}, 0};
  for (const auto& p : model.parameters()) ckpt.tensors.emplace_back(p.name, p.tensor.detach());
  if (adam) {
    ckpt.adam_step = adam->step;
    ckpt.lr = adam->lr;
    for (const auto& [name, m] : adam->m) {
      const Index n = static_cast<Index>(m.size());
      ckpt.tensors.emplace_back("adam.m/" + name, Tensor<T>({n}, m));
      ckpt.tensors.emplace_back("adam.v/" + name, Tensor<T>({n}, adam->v.at(name)));
    }
  }
  return ckpt;
}

template <Real T>
Model<T> restore_model(const Checkpoint<T>& ckpt) {
  Model<T> model(ckpt.model_config, 0);
  ParameterTable<T> from;
  for (const auto& [name, t] : ckpt.tensors) from.push_back({name, t, true});
  auto into = model.parameters();
  copy_parameters(from, into);
  return model;
}

template <Real T>
AdamState<T> restore_adam(const Checkpoint<T>& ckpt) {
  AdamState<T> s;
  s.lr = ckpt.lr;
  s.step = ckpt.adam_step;
  for (const auto& [name, t] : ckpt.tensors) {
    const auto d = t.data();
    if (name.starts_with("adam.m/")) s.m[name.substr(7)].assign(d.begin(), d.end());
    if (name.starts_with("adam.v/")) s.v[name.substr(7)].assign(d.begin(), d.end());
  }
  return s;
}

template <Real T>
void save_checkpoint(const Checkpoint<T>& ckpt, const fs::path& path) {
  nlohmann::json record{{"model", to_json(ckpt.model_config)},
                        {"train", to_json(ckpt.train_config)},
                        {"state", state_json(ckpt.epochs_done, ckpt.adam_step, ckpt.lr, ckpt.scheduler, ckpt.history,
                                             ckpt.best_val_dice)}};
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(kCheckpointMagic, 4);
    io::write_u32(os, kCheckpointVersion);
    io::write_string(os, record.dump());
    io::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      io::write_string(os, name);
      write_xten(os, t);
    }
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <Real T>
Checkpoint<T> load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError(path.string() + ": truncated checkpoint");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError(path.string() + ": not an XNCK checkpoint");
  const auto version = io::read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint<T> ckpt;
  try {
    const auto record = nlohmann::json::parse(io::read_string(is, "checkpoint config", 1u << 28));
    ckpt.model_config = model_config_from_json(record.at("model"));
    ckpt.train_config = train_config_from_json(record.at("train"));
    const auto& st = record.at("state");
    ckpt.epochs_done = st.at("epochs_done").get<int>();
    ckpt.adam_step = st.at("adam_step").get<std::uint64_t>();
    ckpt.lr = st.at("lr").get<double>();
    const auto& sc = st.at("scheduler");
    ckpt.scheduler.factor = sc.at("factor").get<double>();
    ckpt.scheduler.patience = sc.at("patience").get<int>();
    ckpt.scheduler.min_lr = sc.at("min_lr").get<double>();
    if (!sc.at("best").is_null()) ckpt.scheduler.best = sc.at("best").get<double>();
    ckpt.scheduler.stalled = sc.at("stalled").get<int>();
    ckpt.history = history_from_json(st.at("history"));
    ckpt.best_val_dice = st.at("best_val_dice").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint record: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": invalid checkpoint config: " + e.what());
  }
  const auto count = io::read_u32(is, "checkpoint tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = io::read_string(is, "tensor name", 1u << 16);
    ckpt.tensors.emplace_back(std::move(name), read_xten<T>(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return ckpt;
}

// --- Training loop -----------------------------------------------------------

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const auto tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os << text;
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace

template <Real T>
TrainResult<T> train(const TrainConfig& config, const ModelConfig& model_config, const VolumeDataset& dataset,
                     const TrainHooks& hooks, const Checkpoint<T>* resume) {
  config.validate();
  model_config.validate();
  std::vector<std::string> ids;
  for (const auto& v : dataset.volumes) ids.push_back(v.id);
  const auto folds = split_folds(ids, config.folds, config.seed);
  const auto train_volumes = dataset.select(folds.complement(config.fold));
  const auto val_volumes = dataset.select(folds.fold(config.fold));

  Model<T> model(model_config, config.seed);
  AdamState<T> adam;
  adam.lr = config.initial_lr;
  PlateauScheduler scheduler{config.plateau_factor, config.plateau_patience, config.min_lr, {}, 0};
  TrainResult<T> result;
  double best_dice = -1;
  int start_epoch = 0;

  if (resume) {
    if (!(resume->model_config == model_config)) throw ConfigError("resume checkpoint has a different model config");
    model = restore_model(*resume);
    adam = restore_adam(*resume);
    scheduler = resume->scheduler;
    result.history = resume->history;
    best_dice = resume->best_val_dice;
    start_epoch = resume->epochs_done;
    result.last = *resume;
    if (!hooks.output_dir.empty() && fs::exists(hooks.output_dir / "best.xnck")) {
      result.best = load_checkpoint<T>(hooks.output_dir / "best.xnck");
    } else {
      result.best = *resume;
    }
  }

  BatchStream<T> stream(train_volumes, dataset.height, dataset.width, config.batch_size, config.seed, true);
  auto params = model.parameters();
  enable_grad(params);

  auto snapshot = [&](int epochs_done) {
    auto ckpt = make_checkpoint(model, config, &adam);
    ckpt.epochs_done = epochs_done;
    ckpt.scheduler = scheduler;
    ckpt.history = result.history;
    ckpt.best_val_dice = best_dice;
    return ckpt;
  };

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr_used = adam.lr;
    double loss_sum = 0;
    std::size_t seen = 0;
    try {
      for (const auto& batch : stream.epoch(static_cast<std::size_t>(epoch))) {
        for (auto& p : params) p.tensor.zero_grad();
        const auto probs = model.forward(batch.images, Mode::train);
        const auto loss = combined_loss(probs, batch.masks);
        loss.backward();
        adam_step(params, adam);
        const auto n = static_cast<std::size_t>(batch.images.dim(0));
        loss_sum += static_cast<double>(loss.item()) * static_cast<double>(n);
        seen += n;
      }
    } catch (const NumericError& e) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    for (auto& p : params) p.tensor.zero_grad();

    const auto val = evaluate(model, std::span<const Volume* const>(val_volumes), dataset.height, dataset.width,
                              config.batch_size);
    EpochRecord record{epoch + 1, lr_used, loss_sum / static_cast<double>(seen), val.mean_loss,
                       val.report.aggregate.dice};
    adam.lr = scheduler.update(val.mean_loss, adam.lr);
    result.history.push_back(record);
    const bool improved = record.val_dice > best_dice;
    if (improved) best_dice = record.val_dice;
    result.last = snapshot(epoch + 1);
    if (improved) result.best = result.last;

    if (!hooks.output_dir.empty()) {
      write_text(hooks.output_dir / "history.json", history_to_json(result.history).dump(2) + "\n");
      save_checkpoint(result.last, hooks.output_dir / "last.xnck");
      if (improved) save_checkpoint(result.best, hooks.output_dir / "best.xnck");
    }
    if (hooks.on_epoch) hooks.on_epoch(record);
  }
  if (result.best.tensors.empty()) result.best = result.last;
  return result;
}

#define XNET_INSTANTIATE_TRAINING(T)                                                                              \
  template Evaluation evaluate(Model<T>&, std::span<const Volume* const>, Index, Index, Index);                   \
  template void adam_step(ParameterTable<T>&, AdamState<T>&);                                                     \
  template Checkpoint<T> make_checkpoint(const Model<T>&, const TrainConfig&, const AdamState<T>*);               \
  template Model<T> restore_model(const Checkpoint<T>&);                                                          \
  template AdamState<T> restore_adam(const Checkpoint<T>&);                                                       \
  template void save_checkpoint(const Checkpoint<T>&, const fs::path&);                                           \
  template Checkpoint<T> load_checkpoint<T>(const fs::path&);                                                     \
  template TrainResult<T> train(const TrainConfig&, const ModelConfig&, const VolumeDataset&, const TrainHooks&, \
                                const Checkpoint<T>*);

XNET_INSTANTIATE_TRAINING(float)
XNET_INSTANTIATE_TRAINING(double)

}  // namespace xnet
