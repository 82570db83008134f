#include "i3d/trainer.hpp"

#include "i3d/geometry.hpp"
#include "i3d/io.hpp"
#include "i3d/random.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace i3d::train {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(weight_decay >= 0)) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("TrainConfig: eps must be > 0");
  if (checkpoint_interval < 1) throw std::invalid_argument("TrainConfig: checkpoint_interval must be >= 1");
}

double TrainConfig::lr_at(int epoch) const {
  if (!cosine_decay) return lr;
  const double pi = 3.14159265358979323846;
  return 0.5 * lr * (1.0 + std::cos(pi * static_cast<double>(epoch - 1) / static_cast<double>(epochs)));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},       {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"weight_decay", c.weight_decay},
       {"beta1", c.beta1}, {"beta2", c.beta2},   {"eps", c.eps},               {"grad_clip", c.grad_clip},
       {"checkpoint_interval", c.checkpoint_interval}, {"cosine_decay", c.cosine_decay}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
  c.cosine_decay = j.value("cosine_decay", d.cosine_decay);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("loss")) c.loss = j.at("loss").get<loss::LossConfig>();
  if (j.contains("network")) c.network = j.at("network").get<NetworkConfig>();
  return c;
}

nlohmann::json to_json(const RunConfig& c) { return {{"train", c.train}, {"loss", c.loss}, {"network", c.network}}; }

// ---------------------------------------------------------------------------

void AdamW::step(const std::vector<ParamF*>& params) {
  ++t_;
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float c1 = static_cast<float>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  const float c2 = static_cast<float>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  const float lr = static_cast<float>(cfg_.lr), eps = static_cast<float>(cfg_.eps);
  const float wd = static_cast<float>(cfg_.weight_decay);
  for (ParamF* p : params) {
    if (p->grad.size() == 0) continue;
    auto& m = m_[p->name];
    auto& v = v_[p->name];
    if (m.size() == 0) {
      m.setZero(p->value.rows(), p->value.cols());
      v.setZero(p->value.rows(), p->value.cols());
    }
    m = b1 * m + (1 - b1) * p->grad;
    v = (b2 * v.array() + (1 - b2) * p->grad.array().square()).matrix();
    // decay applies to weight matrices only, not to biases, norms or embeddings
    if (wd > 0 && p->value.rows() > 1) p->value *= (1 - lr * wd);
    p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

void AdamW::save(std::vector<std::pair<std::string, MatF>>& tensors, nlohmann::json& meta) const {
  for (const auto& [name, m] : m_) tensors.emplace_back("adam.m/" + name, m);
  for (const auto& [name, v] : v_) tensors.emplace_back("adam.v/" + name, v);
  meta["adam_steps"] = t_;
}

void AdamW::load(const std::vector<std::pair<std::string, MatF>>& tensors, const nlohmann::json& meta) {
  m_.clear();
  v_.clear();
  for (const auto& [name, m] : tensors) {
    if (name.rfind("adam.m/", 0) == 0) m_[name.substr(7)] = m;
    if (name.rfind("adam.v/", 0) == 0) v_[name.substr(7)] = m;
  }
  t_ = meta.value("adam_steps", 0L);
}

double clip_grad_norm(const std::vector<ParamF*>& params, double max_norm) {
  double sq = 0.0;
  for (const ParamF* p : params)
    if (p->grad.size()) sq += p->grad.cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (ParamF* p : params)
      if (p->grad.size()) p->grad *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------

PreparedSample prepare(const SceneSample& s, const NetworkConfig& cfg) {
  PreparedSample p;
  p.sample = &s;
  std::vector<QueryPoint> pts;
  for (const auto& q : s.queries) pts.push_back(q.point);
  p.queries = pad_queries(pts);
  p.target = loss::make_image_target(s, cfg.mask_h, cfg.mask_w, cfg.mask_h, cfg.mask_w);
  return p;
}

namespace {

const RgbImage& network_image(const SceneSample& s, const NetworkConfig& cfg, RgbImage& scratch) {
  if (s.image.width == cfg.input_w && s.image.height == cfg.input_h) return s.image;
  scratch = resize_image(s.image, cfg.input_w, cfg.input_h);
  return scratch;
}

template <size_t N>
void seed_row(TapeF& tape, const VarF& v, const std::array<double, N>& g) {
  MatF m(1, static_cast<Eigen::Index>(N));
  for (size_t k = 0; k < N; ++k) m(0, static_cast<Eigen::Index>(k)) = static_cast<float>(g[k]);
  tape.seed(v, m);
}

void seed_grid(TapeF& tape, const VarF& v, const Grid& g) {
  if (g.size() == 0) return;
  const MatF col = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 1>>(g.data(), g.size()).cast<float>();
  tape.seed(v, col);
}

std::vector<bool> slot_validity(const PaddedQueries& q) { return std::vector<bool>(q.valid.begin(), q.valid.end()); }

void check_finite(const loss::LossReport& r, const std::vector<const PreparedSample*>& batch) {
  if (std::isfinite(r.total)) return;
  std::ostringstream msg;
  msg << "non-finite loss; terms:";
  for (const auto& [name, v] : r.terms)
    if (!std::isfinite(v)) msg << " " << name << "=" << v;
  msg << "; samples:";
  for (const auto* p : batch) msg << " " << p->sample->image_id;
  throw TrainingError(msg.str());
}

}  // namespace

StepResult compute_gradients(Network& net, const std::vector<const PreparedSample*>& batch,
                             const loss::LossConfig& loss_cfg, bool skip_invalid) {
  const auto& cfg = net.config();
  net.zero_grad();
  std::vector<std::unique_ptr<TapeF>> tapes;
  std::vector<ForwardOutputs> outs;
  std::vector<ImagePrediction> preds;
  RgbImage scratch;
  for (const auto* p : batch) {
    tapes.push_back(std::make_unique<TapeF>());
    outs.push_back(net.forward(*tapes.back(), network_image(*p->sample, cfg, scratch), p->queries, skip_invalid));
    preds.push_back(Network::to_prediction(outs.back(), cfg));
    // the angle loss attaches to the tanh pair
    auto& qs = outs.back().queries;
    for (size_t j = 0; j < qs.size(); ++j)
      if (qs[j]) {
        const auto& a = qs[j]->axis_raw.value();
        preds.back().queries[j].axis_enc = {a(0, 0), a(0, 1), a(0, 2)};
      }
  }
  std::vector<loss::BatchEntry> entries;
  for (size_t i = 0; i < batch.size(); ++i) entries.push_back({&preds[i], &batch[i]->target, slot_validity(batch[i]->queries)});
  std::vector<loss::ImageGrad> grads;
  StepResult res;
  res.report = loss::total_loss(entries, loss_cfg, &grads);
  check_finite(res.report, batch);
  for (const auto& [term, v] : res.report.terms) res.weighted[term] = loss::term_weight(loss_cfg, term) * v;

  for (size_t i = 0; i < batch.size(); ++i) {
    TapeF& tape = *tapes[i];
    const auto& g = grads[i];
    for (size_t j = 0; j < g.queries.size(); ++j) {
      if (!batch[i]->queries.valid[j]) continue;
      const auto& q = *outs[i].queries[j];
      const auto& qg = g.queries[j];
      seed_row(tape, q.movable, qg.movable);
      seed_row(tape, q.rigidity, qg.rigidity);
      seed_row(tape, q.articulation, qg.articulation);
      seed_row(tape, q.action, qg.action);
      seed_row(tape, q.box, qg.box);
      seed_row(tape, q.axis_raw, qg.axis);
      seed_grid(tape, q.mask, qg.mask);
      seed_grid(tape, q.affordance, qg.affordance);
    }
    seed_grid(tape, outs[i].depth, g.depth);
    tape.backward();
  }
  res.grad_norm = clip_grad_norm(net.params(), 0.0);
  return res;
}

double evaluate_loss(const Network& net, const std::vector<PreparedSample>& data, const loss::LossConfig& loss_cfg) {
  if (data.empty()) throw std::invalid_argument("evaluate_loss: empty dataset");
  double sum = 0.0;
  for (const auto& p : data) {
    std::vector<QueryPoint> pts;
    for (const auto& q : p.sample->queries) pts.push_back(q.point);
    const ImagePrediction pred = net.predict(p.sample->image, pts);
    const std::vector<loss::BatchEntry> entry{{&pred, &p.target, std::vector<bool>(pts.size(), true)}};
    sum += loss::total_loss(entry, loss_cfg).total;
  }
  return sum / static_cast<double>(data.size());
}

std::vector<ImagePrediction> predict_all(const Network& net, const std::vector<SceneSample>& samples) {
  std::vector<ImagePrediction> out;
  for (const auto& s : samples) {
    std::vector<QueryPoint> pts;
    for (const auto& q : s.queries) pts.push_back(q.point);
    out.push_back(net.predict(s.image, pts));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json log_to_json(const EpochLog& l) {
  nlohmann::json j = {{"epoch", l.epoch}, {"terms", l.terms}, {"total", l.total}};
  j["val_total"] = l.val_total ? nlohmann::json(*l.val_total) : nlohmann::json(nullptr);
  return j;
}

EpochLog log_from_json(const nlohmann::json& j) {
  EpochLog l;
  l.epoch = j.at("epoch").get<int>();
  l.terms = j.at("terms").get<std::map<std::string, double>>();
  l.total = j.at("total").get<double>();
  if (!j.at("val_total").is_null()) l.val_total = j.at("val_total").get<double>();
  return l;
}

std::string curve_csv(const std::vector<EpochLog>& curve) {
  std::ostringstream os;
  os << std::setprecision(9) << "epoch";
  for (const auto& t : loss::term_names()) os << "," << t;
  os << ",total,val_total\n";
  for (const auto& l : curve) {
    os << l.epoch;
    for (const auto& t : loss::term_names()) {
      const auto it = l.terms.find(t);
      os << "," << (it == l.terms.end() ? 0.0 : it->second);
    }
    os << "," << l.total << ",";
    if (l.val_total) os << *l.val_total;
    os << "\n";
  }
  return os.str();
}

}  // namespace

TrainResult train(Network& net, const std::vector<SceneSample>& train_set, const std::vector<SceneSample>& val_set,
                  const TrainConfig& cfg, const loss::LossConfig& loss_cfg, const TrainOptions& opts) {
  cfg.validate();
  loss_cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  std::filesystem::create_directories(opts.out_dir);
  std::vector<PreparedSample> data, val;
  for (const auto& s : train_set) data.push_back(prepare(s, net.config()));
  for (const auto& s : val_set) val.push_back(prepare(s, net.config()));

  AdamW opt(cfg);
  TrainResult res;
  res.last_checkpoint = opts.out_dir / "last.ckpt";
  res.best_checkpoint = opts.out_dir / "best.ckpt";
  double best = std::numeric_limits<double>::infinity();
  int start = 1;
  if (opts.resume) {
    const Checkpoint ck = read_checkpoint(*opts.resume);
    if (!(ck.config == net.config())) throw TrainingError("resume: checkpoint config differs from the model config");
    net.load_state(ck.tensors);
    opt.load(ck.extra, ck.meta);
    start = ck.meta.value("epoch", 0) + 1;
    best = ck.meta.value("best_score", best);
    for (const auto& j : ck.meta.value("curve", nlohmann::json::array())) res.curve.push_back(log_from_json(j));
  }

  const auto params = net.params();
  for (int epoch = start; epoch <= cfg.epochs; ++epoch) {
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);

    opt.set_lr(cfg.lr_at(epoch));
    EpochLog log;
    log.epoch = epoch;
    int batches = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const PreparedSample*> batch;
      for (size_t k = b; k < std::min(order.size(), b + static_cast<size_t>(cfg.batch_size)); ++k)
        batch.push_back(&data[order[k]]);
      const StepResult step = compute_gradients(net, batch, loss_cfg);
      clip_grad_norm(params, cfg.grad_clip);
      opt.step(params);
      for (const auto& [term, v] : step.weighted) log.terms[term] += v;
      log.total += step.report.total;
      ++batches;
    }
    for (auto& [term, v] : log.terms) v /= batches;
    log.total /= batches;
    if (!val.empty()) log.val_total = evaluate_loss(net, val, loss_cfg);
    res.curve.push_back(log);
    if (opts.on_epoch) opts.on_epoch(log);

    write_file_atomic(opts.out_dir / "loss_curve.csv", curve_csv(res.curve));
    const double score = log.val_total.value_or(log.total);
    nlohmann::json meta = {{"epoch", epoch}, {"train", cfg}, {"loss", loss_cfg}};
    if (score < best) {
      best = score;
      meta["best_score"] = best;
      write_checkpoint(res.best_checkpoint, checkpoint_of(net, meta));
    }
    meta["best_score"] = best;
    if (epoch % cfg.checkpoint_interval == 0 || epoch == cfg.epochs) {
      Checkpoint ck = checkpoint_of(net, meta);
      nlohmann::json curve = nlohmann::json::array();
      for (const auto& l : res.curve) curve.push_back(log_to_json(l));
      ck.meta["curve"] = curve;
      opt.save(ck.extra, ck.meta);
      write_checkpoint(res.last_checkpoint, ck);
    }
  }
  res.best_score = best;
  return res;
}

// ---------------------------------------------------------------------------

std::vector<Threshold> overfit_thresholds(const metrics::MetricReport& r) {
  std::vector<Threshold> out;
  auto add = [&](const std::string& name, const std::optional<double>& v, double t) {
    out.push_back({name, v.value_or(std::numeric_limits<double>::quiet_NaN()), t, v.has_value() && *v >= t});
  };
  add("movable_acc", r.movable_acc, 0.95);
  add("articulation_acc", r.articulation_acc, 0.90);
  add("axis_ea", r.axis_ea, 0.75);
  add("mask_iou", r.mask_iou, 0.60);
  add("affordance_sim", r.affordance_sim, 0.50);
  add("depth_delta_1.25", r.depth_delta_1, 0.90);
  return out;
}

ImagePrediction oracle_prediction(const SceneSample& s) {
  const int w = s.image.width, h = s.image.height;
  constexpr double kLogit = 10.0;
  ImagePrediction p;
  for (const auto& q : s.queries) {
    InteractionPrediction ip;
    ip.movable_logits[static_cast<size_t>(q.movable)] = kLogit;
    if (q.rigidity) ip.rigidity_logits[static_cast<size_t>(*q.rigidity)] = kLogit;
    if (q.articulation) ip.articulation_logits[static_cast<size_t>(*q.articulation)] = kLogit;
    if (q.action) ip.action_logits[static_cast<size_t>(*q.action)] = kLogit;
    if (q.box) ip.box = *q.box;
    if (q.axis) ip.axis_enc = encode_axis(*q.axis);
    ip.mask_logits = q.mask ? Grid((q.mask->decode().cast<double>() * 2 - 1) * kLogit) : Grid::Constant(h, w, -kLogit);
    ip.affordance_logits = Grid::Zero(h, w);
    if (q.affordance && q.affordance->keypoint) {
      const Grid b =
          gaussian_bump(*q.affordance->keypoint, q.affordance->radius_px, w, h).cwiseMax(1e-12).cwiseMin(1 - 1e-12);
      ip.affordance_logits = (b / (1.0 - b)).log();
    }
    p.queries.push_back(std::move(ip));
  }
  p.depth = s.depth ? Grid(s.depth->cast<double>()) : Grid::Ones(h, w);
  return p;
}

bool OverfitResult::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const Threshold& t) { return t.pass; });
}

OverfitResult overfit_check(Network& net, const std::vector<SceneSample>& samples, const TrainConfig& cfg,
                            const loss::LossConfig& loss_cfg, const std::filesystem::path& out_dir) {
  OverfitResult r;
  TrainOptions opts;
  opts.out_dir = out_dir;
  r.training = train(net, samples, {}, cfg, loss_cfg, opts);
  r.report = metrics::evaluate(predict_all(net, samples), samples);
  r.checks = overfit_thresholds(r.report);
  return r;
}

}  // namespace i3d::train
