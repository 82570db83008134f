#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/losses.hpp"
#include "i3d/metrics.hpp"
#include "i3d/network.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace i3d::train {

struct TrainConfig {
  double lr = 1e-4;
  int epochs = 60;
  int batch_size = 2;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  int checkpoint_interval = 10;
  bool cosine_decay = false;  // lr follows a half cosine from lr to 0 over epochs
  std::uint64_t seed = 0;

  double lr_at(int epoch) const;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// The JSON document accepted by `train --config`.
struct RunConfig {
  TrainConfig train;
  loss::LossConfig loss;
  NetworkConfig network = NetworkConfig::toy();
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Decoupled weight decay Adam.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(const std::vector<ParamF*>& params);
  long steps() const { return t_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void save(std::vector<std::pair<std::string, MatF>>& tensors, nlohmann::json& meta) const;
  void load(const std::vector<std::pair<std::string, MatF>>& tensors, const nlohmann::json& meta);

 private:
  TrainConfig cfg_;
  long t_ = 0;
  std::map<std::string, MatF> m_, v_;
};

/// Clips in place; returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamF*>& params, double max_norm);

struct EpochLog {
  int epoch = 0;
  std::map<std::string, double> terms;  // weighted contributions, summing to total
  double total = 0.0;
  std::optional<double> val_total;
};

/// Per-sample padded queries and resampled targets.
struct PreparedSample {
  const SceneSample* sample = nullptr;
  PaddedQueries queries;
  loss::ImageTarget target;
};

PreparedSample prepare(const SceneSample& s, const NetworkConfig& cfg);

struct StepResult {
  loss::LossReport report;        // unweighted term means and weighted total
  std::map<std::string, double> weighted;
  double grad_norm = 0.0;
};

/// One forward/backward over a batch, accumulating into Param::grad (which
/// is zeroed first). Throws TrainingError naming the offending terms when the
/// loss is not finite.
StepResult compute_gradients(Network& net, const std::vector<const PreparedSample*>& batch,
                             const loss::LossConfig& loss_cfg, bool skip_invalid = true);

/// Mean weighted loss without touching gradients.
double evaluate_loss(const Network& net, const std::vector<PreparedSample>& data, const loss::LossConfig& loss_cfg);

struct TrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> curve;
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_score = 0.0;  // val total when a val split exists, else train total
};

/// Writes loss_curve.csv every epoch, best.ckpt on improvement and last.ckpt
/// (with optimizer state, resumable) every checkpoint_interval epochs and at
/// the end, all under out_dir.
TrainResult train(Network& net, const std::vector<SceneSample>& train_set, const std::vector<SceneSample>& val_set,
                  const TrainConfig& cfg, const loss::LossConfig& loss_cfg, const TrainOptions& opts);

/// Model predictions for a list of samples.
std::vector<ImagePrediction> predict_all(const Network& net, const std::vector<SceneSample>& samples);

// ---------------------------------------------------------------------------
// Overfit harness.

struct Threshold {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// movable >= 0.95, articulation >= 0.90, axis EA >= 0.75, mask IoU >= 0.60,
/// affordance SIM >= 0.50, depth delta<1.25 >= 0.90. Missing metrics fail.
std::vector<Threshold> overfit_thresholds(const metrics::MetricReport& r);

/// Ground truth written as network outputs at full image resolution.
ImagePrediction oracle_prediction(const SceneSample& s);

struct OverfitResult {
  metrics::MetricReport report;
  std::vector<Threshold> checks;
  TrainResult training;
  bool pass() const;
};

OverfitResult overfit_check(Network& net, const std::vector<SceneSample>& samples, const TrainConfig& cfg,
                            const loss::LossConfig& loss_cfg, const std::filesystem::path& out_dir);

}  // namespace i3d::train
