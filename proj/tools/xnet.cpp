// xnet: synthetic data, training, evaluation, prediction and verification.
//
// Exit codes: 0 success, 2 usage or configuration, 3 I/O, 4 divergence,
// 5 checkpoint, 6 verification failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "xnet/data.hpp"
#include "xnet/experiment.hpp"
#include "xnet/gradcheck.hpp"
#include "xnet/model.hpp"
#include "xnet/training.hpp"
#include "xnet/xten.hpp"

namespace fs = std::filesystem;
using namespace xnet;

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kIo = 3, kDiverged = 4, kCheckpoint = 5, kVerification = 6 };

struct CliError : std::runtime_error {
  CliError(int code, const std::string& what) : std::runtime_error(what), code(code) {}
  int code;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os || !(os << text)) throw IoError("cannot write " + path.string());
}

std::pair<Index, Index> parse_size(const std::string& text) {
  static const std::regex pattern(R"((\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) throw CliError(kUsage, "--size must look like HxW, got '" + text + "'");
  const Index h = std::stoll(m[1]), w = std::stoll(m[2]);
  if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0) {
    throw CliError(kUsage, "--size sides must be positive multiples of 16, got " + text);
  }
  return {h, w};
}

VolumeDataset load_data(const fs::path& dir, std::optional<std::pair<Index, Index>> crop) {
  try {
    return load_dataset(DatasetManifest::load(dir), crop);
  } catch (const IoError& e) {
    throw CliError(kUsage, std::string("dataset: ") + e.what());
  } catch (const FormatError& e) {
    throw CliError(kUsage, std::string("dataset: ") + e.what());
  }
}

Checkpoint<float> load_model_checkpoint(const fs::path& path) {
  try {
    return load_checkpoint<float>(path);
  } catch (const std::exception& e) {
    throw CliError(kCheckpoint, std::string("checkpoint: ") + e.what());
  }
}

Model<float> restore(const Checkpoint<float>& ckpt) {
  try {
    return restore_model(ckpt);
  } catch (const std::exception& e) {
    throw CliError(kCheckpoint, std::string("checkpoint does not match its model config: ") + e.what());
  }
}

std::vector<const Volume*> fold_volumes(const VolumeDataset& data, const TrainConfig& train, int fold) {
  if (fold < 0 || fold >= train.folds) {
    throw CliError(kUsage, "fold " + std::to_string(fold) + " outside [0, " + std::to_string(train.folds) + ")");
  }
  std::vector<std::string> ids;
  for (const auto& v : data.volumes) ids.push_back(v.id);
  if (static_cast<int>(ids.size()) < train.folds) throw CliError(kUsage, "fewer volumes than folds");
  return data.select(split_folds(ids, train.folds, train.seed).fold(fold));
}

void print_aggregate(const MetricReport& report) {
  const auto& a = report.aggregate;
  std::printf("volumes %zu  dice %.4f  iou %.4f  precision %.4f  recall %.4f\n", report.volumes.size(), a.dice, a.iou,
              a.precision, a.recall);
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  Index volumes = 10;
  Index slices = 20;
  std::string size = "64x64";
  std::uint64_t seed = 7;
};

int cmd_synth(const SynthArgs& a) {
  SyntheticOptions opt;
  opt.volumes = a.volumes;
  opt.slices_per_volume = a.slices;
  std::tie(opt.height, opt.width) = parse_size(a.size);
  opt.seed = a.seed;
  if (a.volumes < 1 || a.slices < 1) throw CliError(kUsage, "--volumes and --slices must be positive");
  const auto summary = generate_synthetic(opt, a.out);
  std::printf("volumes %zu  slices %lld  lesion_fraction %.4f  -> %s\n", summary.manifest.volumes.size(),
              static_cast<long long>(summary.slices), summary.lesion_fraction, a.out.c_str());
  return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<int> fold;
  bool no_fsm = false;
  std::optional<std::string> arch;
  bool deterministic = false;
  std::optional<int> epochs;
  std::optional<std::string> out;
  std::optional<std::string> data;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_experiment_config(a.config);
  if (a.fold) cfg.train.fold = *a.fold;
  if (a.no_fsm) cfg.model.fsm_enabled = false;
  if (a.arch) cfg.model.arch = arch_from_string(*a.arch);
  if (a.deterministic) cfg.train.deterministic = true;
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.out) cfg.output = *a.out;
  if (a.data) cfg.data = *a.data;
  cfg.model.validate();
  cfg.train.validate();
  if (!fs::exists(cfg.data / kManifestName)) throw CliError(kUsage, "no dataset manifest under " + cfg.data.string());

  const auto data = load_data(cfg.data, cfg.train.crop);
  std::error_code ec;
  fs::create_directories(cfg.output, ec);
  if (ec) throw IoError("cannot create " + cfg.output.string() + ": " + ec.message());
  const auto echo = to_json(cfg).dump(2);
  write_file(cfg.output / "config.json", echo + "\n");
  std::printf("%s\n", echo.c_str());

  std::optional<Checkpoint<float>> resume;
  if (a.resume && fs::exists(cfg.output / "last.xnck")) {
    resume = load_model_checkpoint(cfg.output / "last.xnck");
    std::printf("resuming after epoch %d\n", resume->epochs_done);
  }

  TrainHooks hooks;
  hooks.output_dir = cfg.output;
  hooks.on_epoch = [&](const EpochRecord& r) {
    std::printf("epoch %3d/%d  lr %.1e  train_loss %.4f  val_loss %.4f  val_dice %.4f\n", r.epoch, cfg.train.epochs,
                r.lr, r.train_loss, r.val_loss, r.val_dice);
    std::fflush(stdout);
  };
  TrainResult<float> result;
  try {
    result = train<float>(cfg.train, cfg.model, data, hooks, resume ? &*resume : nullptr);
  } catch (const NumericError& e) {
    throw CliError(kDiverged, e.what());
  }

  auto best = restore(result.best);
  const auto val = fold_volumes(data, cfg.train, cfg.train.fold);
  const auto eval = evaluate(best, std::span<const Volume* const>(val), data.height, data.width, cfg.train.batch_size);
  write_file(cfg.output / "metrics.json", eval.report.to_json().dump(2) + "\n");
  std::printf("best epoch val_dice %.4f; validation fold %d: ", result.best.best_val_dice, cfg.train.fold);
  print_aggregate(eval.report);
  return kOk;
}

// --- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::optional<int> fold;
  std::string out;
  std::vector<std::string> merge;
};

int cmd_merge(const EvalArgs& a) {
  std::vector<LabeledReport> rows;
  for (const auto& item : a.merge) {
    const auto eq = item.find('=');
    const fs::path path = eq == std::string::npos ? item : item.substr(eq + 1);
    std::string label = eq == std::string::npos ? path.parent_path().filename().string() : item.substr(0, eq);
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    try {
      rows.push_back({label, MetricReport::from_json(nlohmann::json::parse(is))});
    } catch (const std::exception& e) {
      throw CliError(kUsage, path.string() + ": " + e.what());
    }
  }
  const auto table = merge_table(rows);
  std::fputs(table.c_str(), stdout);
  if (!a.out.empty()) write_file(a.out, table);
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  if (!a.merge.empty()) return cmd_merge(a);
  if (a.model.empty() || a.data.empty() || a.out.empty()) {
    throw CliError(kUsage, "eval needs --model, --data and --out (or --merge)");
  }
  const auto ckpt = load_model_checkpoint(a.model);
  auto model = restore(ckpt);
  const auto data = load_data(a.data, ckpt.train_config.crop);
  const auto val = fold_volumes(data, ckpt.train_config, a.fold.value_or(ckpt.train_config.fold));
  const auto eval = evaluate(model, std::span<const Volume* const>(val), data.height, data.width,
                             ckpt.train_config.batch_size);
  write_file(a.out, eval.report.to_json().dump(2) + "\n");
  print_aggregate(eval.report);
  return kOk;
}

// --- predict -----------------------------------------------------------------

struct PredictArgs {
  std::string model;
  std::string input;
  std::string output;
  std::string prob;
};

int cmd_predict(const PredictArgs& a) {
  const auto ckpt = load_model_checkpoint(a.model);
  auto model = restore(ckpt);
  GrayImage img;
  try {
    img = read_pgm(a.input);
  } catch (const std::exception& e) {
    throw CliError(kUsage, std::string("input image: ") + e.what());
  }
  const Index h = floor_to_multiple_of_16(img.height), w = floor_to_multiple_of_16(img.width);
  if (h < 16 || w < 16) throw CliError(kUsage, "input image is smaller than 16x16");
  std::vector<float> raw(img.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<float>(img.pixels[i]) / img.maxval;
  const auto cropped = center_crop<float>(normalize_intensity(raw), img.height, img.width, h, w);

  NoGradGuard no_grad;
  const auto probs = model.forward(Tensor<float>({1, 1, h, w}, cropped), Mode::eval);
  std::vector<std::uint8_t> mask(cropped.size());
  const auto p = probs.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = static_cast<double>(p[i]) > 0.5 ? 1 : 0;
  write_pgm(a.output, to_mask_image(mask, h, w));
  if (!a.prob.empty()) save_xten(a.prob, probs.detach());
  std::size_t on = 0;
  for (auto v : mask) on += v;
  std::printf("%lldx%lld mask, %zu foreground pixels -> %s\n", static_cast<long long>(h), static_cast<long long>(w), on,
              a.output.c_str());
  return kOk;
}

// --- params ------------------------------------------------------------------

int cmd_params(const std::string& config_path) {
  ModelConfig base;
  if (!config_path.empty()) base = load_experiment_config(config_path).model;
  Index totals[2] = {0, 0};
  const Arch arches[2] = {Arch::xnet, Arch::unet};
  for (int i = 0; i < 2; ++i) {
    ModelConfig c = base;
    c.arch = arches[i];
    if (c.arch == Arch::unet) c.fsm_enabled = false;
    const Model<float> model(c, 0);
    std::printf("%s%s (widths", to_string(c.arch).c_str(), c.fsm_enabled ? " + fsm" : "");
    for (auto w : c.widths()) std::printf(" %lld", static_cast<long long>(w));
    std::printf(")\n");
    for (const auto& [node, n] : model.param_counts_by_node()) {
      std::printf("  %-10s %12lld\n", node.c_str(), static_cast<long long>(n));
      totals[i] += n;
    }
    std::printf("  %-10s %12lld\n", "total", static_cast<long long>(totals[i]));
  }
  std::printf("ratio xnet/unet %.4f\n", static_cast<double>(totals[0]) / static_cast<double>(totals[1]));
  return kOk;
}

// --- gradcheck ---------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed) {
  bool all = true;
  for (const auto& check : standard_gradcheck_suite()) {
    const auto report = gradcheck(check.builder, seed, check.options);
    all = all && report.passed;
    std::printf("%-28s max_rel_err %.3e  tol %.0e  %s\n", check.name.c_str(), report.max_relative_error(),
                check.options.tolerance, report.passed ? "ok" : "FAIL");
    if (!report.passed) std::printf("  %s\n", report.diagnostic.c_str());
    std::fflush(stdout);
  }
  return all ? kOk : kVerification;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"X-Net segmentation: data synthesis, training, evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic lesion dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--volumes", synth.volumes, "Number of volumes");
  s->add_option("--slices", synth.slices, "Slices per volume");
  s->add_option("--size", synth.size, "Slice size HxW (multiples of 16)");
  s->add_option("--seed", synth.seed, "Generator seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on all folds but one");
  t->add_option("--config", tr.config, "Experiment config (JSON)")->required();
  t->add_option("--fold", tr.fold, "Validation fold");
  t->add_flag("--no-fsm", tr.no_fsm, "Disable the feature similarity module");
  t->add_option("--arch", tr.arch, "xnet or unet");
  t->add_flag("--deterministic", tr.deterministic, "Record deterministic mode (always on)");
  t->add_option("--epochs", tr.epochs, "Override the epoch count");
  t->add_option("--out", tr.out, "Override the output directory");
  t->add_option("--data", tr.data, "Override the dataset directory");
  t->add_flag("--resume", tr.resume, "Continue from <out>/last.xnck if present");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on one fold, or merge metric files");
  e->add_option("--model", ev.model, "Checkpoint");
  e->add_option("--data", ev.data, "Dataset directory");
  e->add_option("--fold", ev.fold, "Fold (default: the checkpoint's validation fold)");
  e->add_option("--out", ev.out, "Metrics JSON, or the table file with --merge");
  e->add_option("--merge", ev.merge, "[LABEL=]metrics.json to tabulate (repeatable)");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "Segment one image");
  p->add_option("--model", pr.model, "Checkpoint")->required();
  p->add_option("--input", pr.input, "Input P5 image")->required();
  p->add_option("--output", pr.output, "Output mask (P5, 0/255)")->required();
  p->add_option("--prob", pr.prob, "Optional probability tensor (XTEN)");

  std::string params_config;
  auto* pa = app.add_subcommand("params", "Trainable parameter counts for X-Net and U-Net");
  pa->add_option("--config", params_config, "Experiment config (JSON)");

  std::uint64_t gc_seed = 1;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient checks for every layer");
  g->add_option("--seed", gc_seed, "Seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_predict(pr);
    if (*pa) return cmd_params(params_config);
    if (*g) return cmd_gradcheck(gc_seed);
  } catch (const CliError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return err.code;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const ShapeError& err) {
    std::fprintf(stderr, "shape error: %s\n", err.what());
    return kUsage;
  } catch (const IoError& err) {
    std::fprintf(stderr, "I/O error: %s\n", err.what());
    return kIo;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return kDiverged;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kIo;
  }
  return kUsage;
}
