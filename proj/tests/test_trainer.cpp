#include "i3d/synthgen.hpp"
#include "i3d/trainer.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

using namespace i3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag)
      : path(fs::temp_directory_path() / ("i3d_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<SceneSample> samples(int n, std::uint64_t seed) {
  std::vector<SceneSample> out;
  for (auto& g : synth::generate_split(n, seed)) out.push_back(std::move(g.sample));
  return out;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(f, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST_CASE("config validation and schedule") {
  train::TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = {};
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  c = {};
  c.epochs = 10;
  CHECK(c.lr_at(1) == c.lr);
  CHECK(c.lr_at(10) == c.lr);
  c.cosine_decay = true;
  CHECK(c.lr_at(1) == doctest::Approx(c.lr));
  CHECK(c.lr_at(6) == doctest::Approx(0.5 * c.lr));
  for (int e = 1; e < 10; ++e) CHECK(c.lr_at(e + 1) < c.lr_at(e));

  const auto rc = train::run_config_from_json(train::to_json(train::RunConfig{}));
  CHECK(rc.network == NetworkConfig::toy());
  CHECK(rc.train.lr == train::TrainConfig{}.lr);
}

TEST_CASE("AdamW first step and decoupled decay") {
  train::TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  ParamF w{"w", MatF::Constant(2, 1, 2.0f), MatF::Constant(2, 1, 4.0f)};
  ParamF b{"b", MatF::Constant(1, 1, 2.0f), MatF::Constant(1, 1, -4.0f)};
  train::AdamW opt(cfg);
  opt.step({&w, &b});
  // bias-corrected first step moves by lr * sign(grad); decay touches matrices only
  CHECK(w.value(0, 0) == doctest::Approx(2.0 * (1 - 0.05) - 0.1).epsilon(1e-6));
  CHECK(b.value(0, 0) == doctest::Approx(2.0 + 0.1).epsilon(1e-6));

  std::vector<std::pair<std::string, MatF>> tensors;
  nlohmann::json meta;
  opt.save(tensors, meta);
  train::AdamW back(cfg);
  back.load(tensors, meta);
  CHECK(back.steps() == 1);
  ParamF w2 = w, b2 = b;
  opt.step({&w, &b});
  back.step({&w2, &b2});
  CHECK((w.value.array() == w2.value.array()).all());
  CHECK((b.value.array() == b2.value.array()).all());
}

TEST_CASE("gradient clipping") {
  ParamF a{"a", MatF::Zero(1, 2), MatF(1, 2)};
  a.grad << 3.0f, 4.0f;
  CHECK(train::clip_grad_norm({&a}, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad.norm() == doctest::Approx(1.0));
  CHECK(train::clip_grad_norm({&a}, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad.norm() == doctest::Approx(1.0));
}

TEST_CASE("one epoch on two samples") {
  TempDir dir("train1");
  Network net(NetworkConfig::toy());
  train::TrainConfig cfg;
  cfg.epochs = 1;
  train::TrainOptions opts;
  opts.out_dir = dir.path;
  const auto r = train::train(net, samples(2, 3), {}, cfg, loss::LossConfig{}, opts);
  REQUIRE(r.curve.size() == 1);
  CHECK(std::isfinite(r.curve[0].total));
  double sum = 0;
  for (const auto& [k, v] : r.curve[0].terms) sum += v;
  CHECK(sum == doctest::Approx(r.curve[0].total).epsilon(1e-9));
  const auto lines = csv_lines(dir.path / "loss_curve.csv");
  REQUIRE(lines.size() == 2);
  CHECK(lines[0].rfind("epoch,", 0) == 0);
  CHECK(lines[0].find(",total,val_total") != std::string::npos);
  CHECK(lines[1].rfind("1,", 0) == 0);
  const Network back = network_from_checkpoint(read_checkpoint(r.last_checkpoint));
  CHECK(back.config() == net.config());
  CHECK(fs::exists(r.best_checkpoint));
}

TEST_CASE("training is deterministic and resumes exactly") {
  TempDir dir("resume");
  const auto data = samples(4, 8);
  train::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 3e-4;

  auto run = [&](const fs::path& out, int epochs, std::optional<fs::path> resume) {
    Network net(NetworkConfig::toy());
    train::TrainConfig c = cfg;
    c.epochs = epochs;
    train::TrainOptions opts;
    opts.out_dir = out;
    opts.resume = resume;
    return train::train(net, data, {}, c, loss::LossConfig{}, opts);
  };
  const auto full = run(dir.path / "full", 3, std::nullopt);
  const auto again = run(dir.path / "again", 3, std::nullopt);
  for (size_t i = 0; i < full.curve.size(); ++i)
    CHECK(std::abs(full.curve[i].total - again.curve[i].total) <= 1e-3 * std::abs(full.curve[i].total));

  const auto first = run(dir.path / "first", 2, std::nullopt);
  fs::copy_file(first.last_checkpoint, dir.path / "two.ckpt");
  const auto resumed = run(dir.path / "resumed", 3, dir.path / "two.ckpt");
  REQUIRE(resumed.curve.size() == 3);
  CHECK(resumed.curve[2].epoch == 3);
  CHECK(std::abs(resumed.curve[2].total - full.curve[2].total) <= 1e-3 * std::abs(full.curve[2].total));
  CHECK(resumed.curve[0].total == full.curve[0].total);
}

TEST_CASE("loss at epoch 30 is below epoch 1") {
  TempDir dir("e30");
  Network net(NetworkConfig::toy());
  train::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr = 1e-3;
  cfg.checkpoint_interval = 30;
  train::TrainOptions opts;
  opts.out_dir = dir.path;
  const auto r = train::train(net, samples(6, 12), samples(2, 13), cfg, loss::LossConfig{}, opts);
  REQUIRE(r.curve.size() == 30);
  CHECK(r.curve.back().total < r.curve.front().total);
  CHECK(r.curve.back().val_total.has_value());
  // best.ckpt tracks the validation loss
  double best = std::numeric_limits<double>::infinity();
  for (const auto& l : r.curve) best = std::min(best, *l.val_total);
  CHECK(r.best_score == best);
}

TEST_CASE("a non-finite loss names the offending terms") {
  Network net(NetworkConfig::toy());
  const auto data = samples(1, 4);
  const auto prep = train::prepare(data[0], net.config());
  for (auto* p : net.params())
    if (p->name.find("depth") != std::string::npos) p->value.setConstant(std::numeric_limits<float>::quiet_NaN());
  try {
    train::compute_gradients(net, {&prep}, loss::LossConfig{});
    FAIL("expected TrainingError");
  } catch (const train::TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("depth") != std::string::npos);
    CHECK(msg.find(data[0].image_id) != std::string::npos);
  }
}

TEST_CASE("overfit harness accepts the oracle predictions") {
  const auto data = samples(20, 101);
  std::vector<ImagePrediction> preds;
  for (const auto& s : data) preds.push_back(train::oracle_prediction(s));
  const auto checks = train::overfit_thresholds(metrics::evaluate(preds, data));
  REQUIRE(checks.size() == 6);
  for (const auto& t : checks) {
    INFO(t.name << " = " << t.value);
    CHECK(t.pass);
  }

  metrics::MetricReport empty;
  for (const auto& t : train::overfit_thresholds(empty)) CHECK_FALSE(t.pass);
}

TEST_CASE("an untrained model is near chance on movable") {
  const auto data = samples(20, 101);
  const Network net(NetworkConfig::toy());
  const auto r = metrics::evaluate(train::predict_all(net, data), data);
  CHECK(r.movable_acc.value() < 0.7);
}
