#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "xnet/losses.hpp"
#include "xnet/training.hpp"

using namespace xnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("xnet_test_training_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ParameterTable<double> single(const std::string& name, const std::vector<double>& w, const std::vector<double>& g) {
  auto t = TensorD({static_cast<Index>(w.size())}, w).set_requires_grad();
  // Give the leaf a gradient by backpropagating Σ g·w.
  const TensorD gt({static_cast<Index>(g.size())}, g);
  sum(t * gt).backward();
  return {{name, t, true}};
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.width_divisor = 16;
  return c;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  c.folds = 5;
  c.fold = 0;
  c.plateau_patience = 1;
  return c;
}

const VolumeDataset& tiny_dataset() {
  static const VolumeDataset ds = [] {
    TempDir tmp("dataset");
    SyntheticOptions o;
    o.volumes = 5;
    o.slices_per_volume = 4;
    o.height = 32;
    o.width = 32;
    o.seed = 2;
    generate_synthetic(o, tmp.path);
    return load_dataset(DatasetManifest::load(tmp.path));
  }();
  return ds;
}

}  // namespace

TEST_CASE("adam examples") {
  SUBCASE("hand-computed first step") {
    auto p = single("w", {1.0}, {0.5});
    AdamState<double> s;
    adam_step(p, s);
    CHECK(s.step == 1);
    // m̂ = 0.5, v̂ = 0.25: w' = 1 − 0.001·0.5/(0.5 + 1e-8).
    CHECK(p[0].tensor.data()[0] == doctest::Approx(1.0 - 0.001 * 0.5 / (0.5 + 1e-8)).epsilon(1e-15));
    CHECK(p[0].tensor.data()[0] == doctest::Approx(0.9990).epsilon(1e-6));
    CHECK(s.m.at("w")[0] == doctest::Approx(0.05));
    CHECK(s.v.at("w")[0] == doctest::Approx(0.00025));
  }
  SUBCASE("zero gradient on a fresh state") {
    auto p = single("w", {1.0, -2.0}, {0.0, 0.0});
    AdamState<double> s;
    adam_step(p, s);
    CHECK(p[0].tensor.data()[0] == 1.0);
    CHECK(p[0].tensor.data()[1] == -2.0);
  }
  SUBCASE("zero learning rate changes nothing") {
    auto p = single("w", {0.3, 0.7, -1.1}, {1.0, -4.0, 0.25});
    AdamState<double> s;
    s.lr = 0;
    for (int i = 0; i < 3; ++i) adam_step(p, s);
    CHECK(oracle::values(p[0].tensor) == std::vector<double>{0.3, 0.7, -1.1});
  }
  SUBCASE("parameters update independently") {
    auto a = single("a", {1.0}, {0.5});
    auto b = single("b", {2.0}, {-3.0});
    ParameterTable<double> both{a[0], b[0]};
    AdamState<double> s;
    adam_step(both, s);

    auto a2 = single("a", {1.0}, {0.5});
    AdamState<double> s2;
    adam_step(a2, s2);
    CHECK(a[0].tensor.data()[0] == a2[0].tensor.data()[0]);
    CHECK(b[0].tensor.data()[0] == doctest::Approx(2.0 + 0.001).epsilon(1e-9));
  }
  SUBCASE("second moments stay non-negative over many steps") {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> d;
    AdamState<double> s;
    auto t = TensorD::randn({16}, rng).set_requires_grad();
    ParameterTable<double> p{{"t", t, true}};
    for (int i = 0; i < 50; ++i) {
      t.zero_grad();
      std::vector<double> g(16);
      for (auto& x : g) x = d(rng);
      sum(t * TensorD({16}, g)).backward();
      adam_step(p, s);
      CHECK(s.step == static_cast<std::uint64_t>(i + 1));
      for (double v : s.v.at("t")) CHECK(v >= 0);
    }
  }
  SUBCASE("non-finite gradient aborts the step") {
    auto t = TensorD({2}, {1.0, 2.0}).set_requires_grad();
    auto u = TensorD({1}, {5.0}).set_requires_grad();
    sum(t).backward();
    sum(u).backward();
    // Poison the gradient through a hand-made op.
    auto bad = TensorD({1}, {0.0}).set_requires_grad();
    record_op<double>("poison", Shape{}, {0.0}, {bad}, [](GradContext<double>& ctx) {
      ctx.grad_input(0)[0] += std::numeric_limits<double>::quiet_NaN();
    }).backward();
    ParameterTable<double> p{{"t", t, true}, {"bad", bad, true}, {"u", u, true}};
    AdamState<double> s;
    CHECK_THROWS_AS(adam_step(p, s), NumericError);
    CHECK(s.step == 0);
    CHECK(oracle::values(t) == std::vector<double>{1.0, 2.0});
    CHECK(u.data()[0] == 5.0);
  }
}

TEST_CASE("plateau scheduler") {
  SUBCASE("strictly decreasing losses keep the rate") {
    PlateauScheduler s;
    double lr = 1e-3;
    for (int i = 0; i < 30; ++i) lr = s.update(1.0 / (i + 1), lr);
    CHECK(lr == 1e-3);
  }
  SUBCASE("patience two trace") {
    PlateauScheduler s;
    s.patience = 2;
    double lr = 1e-3;
    std::vector<double> lrs;
    for (double loss : {1.0, 0.9, 0.95, 0.92}) {
      lr = s.update(loss, lr);
      lrs.push_back(lr);
    }
    CHECK(lrs[0] == 1e-3);
    CHECK(lrs[1] == 1e-3);
    CHECK(lrs[2] == 1e-3);
    CHECK(lrs[3] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.stalled == 0);
  }
  SUBCASE("clamped at the minimum") {
    PlateauScheduler s;
    s.patience = 1;
    double lr = 1e-6;
    for (int i = 0; i < 5; ++i) lr = s.update(1.0, lr);
    CHECK(lr == 1e-6);
  }
  SUBCASE("random traces never increase and respect the floor") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
      PlateauScheduler s;
      s.patience = 1 + trial % 4;
      double lr = 1e-3;
      for (int e = 0; e < 100; ++e) {
        const double next = s.update(u(rng), lr);
        CHECK(next <= lr);
        CHECK(next >= s.min_lr);
        lr = next;
      }
    }
  }
}

TEST_CASE("train config") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.batch_size == 8);
  CHECK(c.initial_lr == 1e-3);
  CHECK(c.epochs == 100);
  c.crop = std::pair<Index, Index>{224, 192};
  const auto back = train_config_from_json(to_json(c));
  CHECK(back.crop == c.crop);
  CHECK(back.epochs == c.epochs);
  CHECK(back.plateau_factor == c.plateau_factor);

  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.epochs = 0; }, [](TrainConfig& t) { t.epochs = 101; },
           [](TrainConfig& t) { t.batch_size = 0; }, [](TrainConfig& t) { t.initial_lr = -1; },
           [](TrainConfig& t) { t.fold = 5; }, [](TrainConfig& t) { t.plateau_factor = 1.5; },
           [](TrainConfig& t) { t.crop = std::pair<Index, Index>{30, 32}; }}) {
    TrainConfig t;
    mutate(t);
    CHECK_THROWS_AS(t.validate(), ConfigError);
  }
  CHECK_THROWS_AS(train_config_from_json({{"epoch", 3}}), ConfigError);
  CHECK_THROWS_AS(train_config_from_json({{"epochs", "three"}}), ConfigError);
}

TEST_CASE("checkpoint roundtrip") {
  TempDir tmp("ckpt");
  ModelConfig cfg;
  cfg.width_divisor = 8;
  auto model = build_model<float>(cfg, 5);
  std::mt19937_64 rng(6);
  const auto x = TensorF::uniform({2, 1, 32, 32}, rng, 0, 1);
  model.forward(x, Mode::train);  // move the BN running statistics off their defaults

  AdamState<float> adam;
  auto params = model.parameters();
  enable_grad(params);
  combined_loss(model.forward(x, Mode::train), TensorF::zeros({2, 1, 32, 32})).backward();
  adam_step(params, adam);
  for (auto& p : params) p.tensor.zero_grad();

  auto ckpt = make_checkpoint(model, TrainConfig{}, &adam);
  ckpt.epochs_done = 3;
  ckpt.history = {{1, 1e-3, 0.9, 0.8, 0.1}, {2, 1e-3, 0.7, 0.6, 0.3}, {3, 1e-4, 0.5, 0.5, 0.4}};
  ckpt.best_val_dice = 0.4;
  ckpt.scheduler.best = 0.5;
  ckpt.scheduler.stalled = 2;
  save_checkpoint(ckpt, tmp.path / "m.xnck");
  const auto back = load_checkpoint<float>(tmp.path / "m.xnck");

  CHECK(back.model_config == cfg);
  CHECK(back.epochs_done == 3);
  CHECK(back.history == ckpt.history);
  CHECK(back.scheduler.best == 0.5);
  CHECK(back.scheduler.stalled == 2);
  CHECK(back.adam_step == 1);
  REQUIRE(back.tensors.size() == ckpt.tensors.size());
  for (std::size_t i = 0; i < back.tensors.size(); ++i) {
    CHECK(back.tensors[i].first == ckpt.tensors[i].first);
    const auto a = back.tensors[i].second.data(), b = ckpt.tensors[i].second.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }

  auto restored = restore_model(back);
  const auto y0 = model.forward(x, Mode::eval);
  const auto y1 = restored.forward(x, Mode::eval);
  CHECK(std::equal(y0.data().begin(), y0.data().end(), y1.data().begin()));
  const auto adam_back = restore_adam(back);
  CHECK(adam_back.m == adam.m);
  CHECK(adam_back.v == adam.v);

  SUBCASE("corrupt files") {
    std::ifstream is(tmp.path / "m.xnck", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), {});
    auto write = [&](const std::string& b) {
      std::ofstream(tmp.path / "bad.xnck", std::ios::binary) << b;
      return tmp.path / "bad.xnck";
    };
    CHECK_THROWS_AS(load_checkpoint<float>(write(bytes.substr(0, bytes.size() / 2))), FormatError);
    CHECK_THROWS_AS(load_checkpoint<float>(write(bytes.substr(0, 6))), FormatError);
    auto v = bytes;
    v[4] = 9;
    CHECK_THROWS_AS(load_checkpoint<float>(write(v)), FormatError);
    auto m = bytes;
    m[0] = 'Y';
    CHECK_THROWS_AS(load_checkpoint<float>(write(m)), FormatError);
    CHECK_THROWS_AS(load_checkpoint<double>(tmp.path / "m.xnck"), FormatError);
    CHECK_THROWS_AS(load_checkpoint<float>(write(bytes + "x")), FormatError);
  }
}

TEST_CASE("overfitting one batch") {
  SyntheticOptions o;
  o.volumes = 1;
  o.slices_per_volume = 8;
  o.seed = 12;
  o.lesions_per_slice = 2;
  std::vector<float> images, masks;
  std::vector<float> all;
  const auto slices = synthesize_volume(o, 0);
  for (const auto& s : slices) all.insert(all.end(), s.image.begin(), s.image.end());
  images = normalize_intensity(all);
  for (const auto& s : slices) masks.insert(masks.end(), s.mask.begin(), s.mask.end());
  const TensorF x({8, 1, 64, 64}, images), t({8, 1, 64, 64}, masks);

  ModelConfig cfg;
  cfg.width_divisor = 8;
  auto model = build_model<float>(cfg, 1);
  auto params = model.parameters();
  enable_grad(params);
  // At 1e-3 this batch needs far more than 200 steps; the smoke test is about
  // capacity and gradient flow, so it runs hotter.
  AdamState<float> adam;
  adam.lr = 1e-2;
  double first = 0, loss = 1e9;
  int steps = 0;
  while (steps < 200 && loss >= 0.05) {
    for (auto& p : params) p.tensor.zero_grad();
    const auto l = combined_loss(model.forward(x, Mode::train), t);
    l.backward();
    adam_step(params, adam);
    loss = l.item();
    if (steps == 0) first = loss;
    ++steps;
  }
  MESSAGE("overfit: " << first << " -> " << loss << " in " << steps << " steps");
  CHECK(loss < 0.05);
}

TEST_CASE("tiny training runs") {
  const auto& ds = tiny_dataset();
  TempDir tmp("runs");
  TrainHooks hooks;
  hooks.output_dir = tmp.path / "full";
  fs::create_directories(hooks.output_dir);
  std::vector<EpochRecord> seen;
  hooks.on_epoch = [&](const EpochRecord& r) { seen.push_back(r); };
  const auto full = train<float>(tiny_train(4), tiny_model(), ds, hooks);

  CHECK(full.history.size() == 4);
  CHECK(seen == full.history);
  double best = -1;
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    const auto& r = full.history[i];
    CHECK(r.epoch == static_cast<int>(i + 1));
    CHECK(std::isfinite(r.train_loss));
    CHECK(r.val_dice >= 0);
    CHECK(r.val_dice <= 1);
    if (i > 0) CHECK(r.lr <= full.history[i - 1].lr);
    best = std::max(best, r.val_dice);
  }
  CHECK(full.best.best_val_dice == best);
  CHECK(full.last.epochs_done == 4);
  CHECK(fs::exists(hooks.output_dir / "history.json"));
  CHECK(fs::exists(hooks.output_dir / "last.xnck"));
  CHECK(fs::exists(hooks.output_dir / "best.xnck"));
  CHECK(history_from_json(nlohmann::json::parse(std::ifstream(hooks.output_dir / "history.json"))) == full.history);

  SUBCASE("deterministic") {
    const auto again = train<float>(tiny_train(4), tiny_model(), ds);
    CHECK(again.history == full.history);
  }
  SUBCASE("resume matches an uninterrupted run") {
    TrainHooks part;
    part.output_dir = tmp.path / "part";
    fs::create_directories(part.output_dir);
    train<float>(tiny_train(2), tiny_model(), ds, part);
    const auto ckpt = load_checkpoint<float>(part.output_dir / "last.xnck");
    CHECK(ckpt.epochs_done == 2);
    const auto resumed = train<float>(tiny_train(4), tiny_model(), ds, part, &ckpt);
    CHECK(resumed.history == full.history);
    const auto a = resumed.last.tensors, b = full.last.tensors;
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
    auto other = tiny_model();
    other.fsm_enabled = false;
    CHECK_THROWS_AS(train<float>(tiny_train(4), other, ds, {}, &ckpt), ConfigError);
  }
  SUBCASE("a huge learning rate diverges") {
    auto cfg = tiny_train(3);
    cfg.initial_lr = 1e30;
    CHECK_THROWS_AS(train<float>(cfg, tiny_model(), ds), DivergenceError);
  }
}
