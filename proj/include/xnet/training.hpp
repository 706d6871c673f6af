#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xnet/data.hpp"
#include "xnet/metrics.hpp"
#include "xnet/model.hpp"

namespace xnet {

// --- Evaluation --------------------------------------------------------------

struct Evaluation {
  MetricReport report;
  double mean_loss = 0;  // slice-weighted mean of the combined loss
};

/// Eval-mode pass over whole volumes. Confusion counts are pooled over all
/// slices of a volume before its metrics are computed; the aggregate is the
/// mean over volumes. Throws ConfigError for an empty volume list.
template <Real T>
Evaluation evaluate(Model<T>& model, std::span<const Volume* const> volumes, Index height, Index width,
                    Index batch_size = 8);

template <Real T>
MetricReport evaluate_volumes(Model<T>& model, std::span<const Volume* const> volumes, Index height, Index width) {
  return evaluate(model, volumes, height, width).report;
}

// --- Optimizer and schedule --------------------------------------------------

/// Adam moments keyed by parameter name.
template <Real T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
};

/// One bias-corrected Adam update of every trainable entry that has a
/// gradient. Non-finite gradients abort before anything is modified.
template <Real T>
void adam_step(ParameterTable<T>& params, AdamState<T>& state);

struct PlateauScheduler {
  double factor = 0.1;
  int patience = 10;
  double min_lr = 1e-6;
  std::optional<double> best;
  int stalled = 0;

  /// Feeds one epoch's monitored value; returns the (possibly reduced) lr.
  /// Strict improvement resets the stall counter; `patience` consecutive
  /// non-improving epochs multiply lr by `factor`, clamped at `min_lr`.
  double update(double value, double lr);
};

// --- Configuration -----------------------------------------------------------

struct TrainConfig {
  int epochs = 100;
  Index batch_size = 8;
  double initial_lr = 1e-3;
  std::uint64_t seed = 7;
  bool deterministic = true;
  int fold = 0;
  int folds = 5;
  double plateau_factor = 0.1;
  int plateau_patience = 10;
  double min_lr = 1e-6;
  std::optional<std::pair<Index, Index>> crop;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_dice = 0;

  bool operator==(const EpochRecord&) const = default;
};

nlohmann::json history_to_json(std::span<const EpochRecord> history);
std::vector<EpochRecord> history_from_json(const nlohmann::json& j);

// --- Checkpoints -------------------------------------------------------------

/// Everything needed to rebuild a model and resume training. Tensors are deep
/// copies: model parameters and BN statistics by parameter name, Adam moments
/// as "adam.m/<name>" and "adam.v/<name>".
template <Real T>
struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;
  int epochs_done = 0;
  std::uint64_t adam_step = 0;
  double lr = 1e-3;
  PlateauScheduler scheduler;
  std::vector<EpochRecord> history;
  double best_val_dice = -1;
};

template <Real T>
Checkpoint<T> make_checkpoint(const Model<T>& model, const TrainConfig& train_config, const AdamState<T>* adam = nullptr);

/// Builds a model from the checkpoint's config and copies its tensors in.
/// Throws FormatError when a tensor is missing or mis-shaped.
template <Real T>
Model<T> restore_model(const Checkpoint<T>& ckpt);

template <Real T>
AdamState<T> restore_adam(const Checkpoint<T>& ckpt);

// File layout: "XNCK", u32 version (1), u32-length-prefixed JSON record,
// u32 tensor count, then per tensor a u32-length-prefixed name followed by
// an XTEN record.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <Real T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path);

/// Throws FormatError on bad magic, version, truncation or dtype mismatch.
template <Real T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

// --- Training loop -----------------------------------------------------------

class DivergenceError : public NumericError {
 public:
  using NumericError::NumericError;
};

template <Real T>
struct TrainResult {
  Checkpoint<T> best;  // highest validation Dice
  Checkpoint<T> last;
  std::vector<EpochRecord> history;
};

struct TrainHooks {
  /// Called after each epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// When set, history.json, last.xnck and best.xnck are rewritten each epoch.
  std::filesystem::path output_dir;
};

/// Trains on every fold except `config.fold` and validates on that fold.
/// Per epoch: combined loss over the shuffled training batches, then an
/// eval-mode pass over the validation volumes; the scheduler consumes the
/// validation loss. With `resume`, continues from the checkpoint's state
/// until `config.epochs` epochs are complete. A non-finite loss raises
/// DivergenceError; files from the last completed epoch remain on disk.
template <Real T>
TrainResult<T> train(const TrainConfig& config, const ModelConfig& model_config, const VolumeDataset& dataset,
                     const TrainHooks& hooks = {}, const Checkpoint<T>* resume = nullptr);

}  // namespace xnet
