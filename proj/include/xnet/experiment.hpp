#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xnet/metrics.hpp"
#include "xnet/model.hpp"
#include "xnet/training.hpp"

namespace xnet {

/// One training run as recorded on disk: dataset directory, output
/// directory, model and training settings.
struct ExperimentConfig {
  std::filesystem::path data;
  std::filesystem::path output;
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json to_json(const ExperimentConfig& config);

/// Strict parse. Relative paths are resolved against `base_dir` (normally
/// the directory of the config file). Throws ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct LabeledReport {
  std::string label;
  MetricReport report;
};

/// Markdown table of aggregate Dice, IoU, precision and recall (4 decimals),
/// one row per report, followed by each row's Dice difference from the first.
std::string merge_table(const std::vector<LabeledReport>& rows);

}  // namespace xnet
