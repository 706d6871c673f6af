#include "xnet/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace xnet {

namespace fs = std::filesystem;

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"data", c.data.string()}, {"output", c.output.string()}, {"model", to_json(c.model)}, {"train", to_json(c.train)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment config must be an object");
  ExperimentConfig c;
  bool have_data = false;
  auto resolve = [&](const nlohmann::json& v, const char* key) {
    if (!v.is_string()) throw ConfigError(std::string(key) + " must be a path string");
    fs::path p = v.get<std::string>();
    return p.is_absolute() ? p : base_dir / p;
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "data") {
      c.data = resolve(value, "data");
      have_data = true;
    } else if (key == "output") {
      c.output = resolve(value, "output");
    } else if (key == "model") {
      c.model = model_config_from_json(value);
    } else if (key == "train") {
      c.train = train_config_from_json(value);
    } else {
      throw ConfigError("unknown experiment config key '" + key + "'");
    }
  }
  if (!have_data) throw ConfigError("experiment config needs a 'data' path");
  if (c.output.empty()) c.output = base_dir / "run";
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_config_from_json(j, fs::absolute(path).parent_path());
}

std::string merge_table(const std::vector<LabeledReport>& rows) {
  if (rows.empty()) throw ConfigError("merge_table: nothing to merge");
  std::ostringstream os;
  char buf[160];
  os << "| Model | Dice | IoU | Precision | Recall |\n|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const auto& a = r.report.aggregate;
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %.4f | %.4f |\n", r.label.c_str(), a.dice, a.iou, a.precision,
                  a.recall);
    os << buf;
  }
  const double base = rows.front().report.aggregate.dice;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::snprintf(buf, sizeof buf, "\nDice %s vs %s: %+.4f", rows[i].label.c_str(), rows.front().label.c_str(),
                  rows[i].report.aggregate.dice - base);
    os << buf;
  }
  if (rows.size() > 1) os << "\n";
  return os.str();
}

}  // namespace xnet
