#include "i3d/metrics.hpp"

#include "i3d/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace i3d::metrics {

double box_iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double mask_iou(const BinaryGrid& a, const BinaryGrid& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mask_iou: dimension mismatch");
  const auto ab = a.cast<bool>();
  const auto bb = b.cast<bool>();
  const auto inter = (ab && bb).count();
  const auto uni = (ab || bb).count();
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_iou(const Mask& a, const Mask& b) { return mask_iou(a.decode(), b.decode()); }

double ea_score(const Line2D& pred, const Line2D& gt) {
  const Line2D a = normalize_line(pred);
  const Line2D b = normalize_line(gt);
  const auto sa = clip_line(a, 0, 0, 1, 1);
  const auto sb = clip_line(b, 0, 0, 1, 1);
  if (!sa || !sb) throw GeometryError("ea_score: line does not intersect the image");
  double dtheta = std::abs(a.theta - b.theta);
  dtheta = std::fmod(dtheta, std::numbers::pi);
  dtheta = std::min(dtheta, std::numbers::pi - dtheta);
  const double s_angle = std::max(0.0, 1.0 - dtheta / (std::numbers::pi / 2));
  const Eigen::Vector2d ma = 0.5 * (sa->first + sa->second);
  const Eigen::Vector2d mb = 0.5 * (sb->first + sb->second);
  const double s_dist = std::max(0.0, 1.0 - (ma - mb).norm() / std::sqrt(2.0));
  return s_angle * s_dist;
}

double sim(const Grid& p, const Grid& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols()) throw std::invalid_argument("sim: shape mismatch");
  if (p.size() == 0) throw std::invalid_argument("sim: empty grid");
  if ((p < 0).any() || (q < 0).any()) throw std::invalid_argument("sim: negative values");
  auto normalized = [](const Grid& g) -> Grid {
    const double s = g.sum();
    if (s <= 0) return Grid::Constant(g.rows(), g.cols(), 1.0 / static_cast<double>(g.size()));
    return g / s;
  };
  return normalized(p).min(normalized(q)).sum();
}

namespace {

double median(std::vector<double> v) {
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
  return m;
}

}  // namespace

double depth_delta(const Grid& pred, const Grid& gt, double thresh, bool align, const BinaryGrid* valid) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw std::invalid_argument("depth_delta: shape mismatch");
  std::vector<double> pv, gv;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (valid && !valid->data()[i]) continue;
    const double p = pred.data()[i], g = gt.data()[i];
    if (!(p > 0) || !(g > 0)) throw std::invalid_argument("depth_delta: depths must be positive");
    pv.push_back(p);
    gv.push_back(g);
  }
  if (pv.empty()) throw std::invalid_argument("depth_delta: no valid pixels");
  const double scale = align ? median(gv) / median(pv) : 1.0;
  long hits = 0;
  for (size_t i = 0; i < pv.size(); ++i) {
    const double p = pv[i] * scale;
    if (std::max(p / gv[i], gv[i] / p) < thresh) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pv.size());
}

Grid affordance_distribution(const Grid& logits) {
  const Grid p = 1.0 / (1.0 + (-logits).exp());
  const double lo = p.minCoeff(), hi = p.maxCoeff();
  if (!(hi > lo)) return Grid::Constant(logits.rows(), logits.cols(), 1.0 / static_cast<double>(logits.size()));
  const Grid q = (p - lo) / (hi - lo);
  return q / q.sum();
}

Grid align_depth_ssi(const Grid& pred, const Grid& gt, const BinaryGrid& valid) {
  std::vector<double> pv, gv;
  for (Eigen::Index i = 0; i < pred.size(); ++i)
    if (valid.data()[i]) {
      pv.push_back(pred.data()[i]);
      gv.push_back(gt.data()[i]);
    }
  if (pv.size() < 2) throw std::invalid_argument("align_depth_ssi: need at least 2 valid pixels");
  const double mp = median(pv), mg = median(gv);
  double sp = 0, sg = 0;
  for (size_t i = 0; i < pv.size(); ++i) {
    sp += std::abs(pv[i] - mp);
    sg += std::abs(gv[i] - mg);
  }
  sp = std::max(sp / pv.size(), 1e-6);
  sg /= gv.size();
  const double floor = 1e-3 * std::max(mg, 1e-6);
  return ((pred - mp) / sp * sg + mg).max(floor);
}

// ---------------------------------------------------------------------------

namespace {

struct Mean {
  double sum = 0;
  long n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> get() const { return n > 0 ? std::optional<double>(sum / n) : std::nullopt; }
};

template <size_t N>
int argmax(const std::array<double, N>& a) {
  return static_cast<int>(std::max_element(a.begin(), a.end()) - a.begin());
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

MetricReport evaluate(const std::vector<ImagePrediction>& preds, const std::vector<SceneSample>& samples,
                      double mask_threshold) {
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) throw std::invalid_argument("evaluate: mask_threshold");
  const double mask_logit = std::log(mask_threshold / (1.0 - mask_threshold));
  if (preds.size() != samples.size()) throw std::invalid_argument("evaluate: missing predictions for some images");
  Mean movable, rigidity, articulation, action, box, mask, axis, afford, d1, d2;
  MetricReport r;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto& p = preds[i];
    if (p.queries.size() < s.queries.size())
      throw std::invalid_argument("evaluate: missing predictions for " + s.image_id);
    ++r.num_images;
    for (size_t j = 0; j < s.queries.size(); ++j) {
      const auto& gt = s.queries[j];
      const auto& q = p.queries[j];
      ++r.num_queries;
      movable.add(argmax(q.movable_logits) == static_cast<int>(gt.movable));
      if (gt.rigidity) rigidity.add(argmax(q.rigidity_logits) == static_cast<int>(*gt.rigidity));
      if (gt.articulation) articulation.add(argmax(q.articulation_logits) == static_cast<int>(*gt.articulation));
      if (gt.action) action.add(argmax(q.action_logits) == static_cast<int>(*gt.action));
      if (gt.box) box.add(box_iou(q.box, *gt.box));
      if (gt.mask) {
        const Grid logits = resize_bilinear(q.mask_logits, gt.mask->height(), gt.mask->width());
        const BinaryGrid pm = (logits > mask_logit).cast<std::uint8_t>();
        mask.add(mask_iou(pm, gt.mask->decode()));
      }
      if (gt.axis) {
        double score = 0.0;
        try {
          score = ea_score(decode_axis(q.axis_enc), *gt.axis);
        } catch (const GeometryError&) {
          score = 0.0;
        }
        axis.add(score);
      }
      if (gt.affordance && gt.affordance->keypoint) {
        const auto& lg = q.affordance_logits;
        const Grid bump = gaussian_bump(*gt.affordance->keypoint, gt.affordance->radius_px, static_cast<int>(lg.cols()),
                                        static_cast<int>(lg.rows()));
        afford.add(sim(affordance_distribution(lg), bump));
      }
    }
    if (s.depth && p.depth.size() > 0) {
      const Grid full = s.depth->cast<double>();
      const int h = static_cast<int>(p.depth.rows()), w = static_cast<int>(p.depth.cols());
      const Grid gt = (full.rows() % h == 0 && full.cols() % w == 0) ? downsample_area(full, h, w)
                                                                      : resize_bilinear(full, h, w);
      const BinaryGrid valid = (gt > 0.0).cast<std::uint8_t>();
      const Grid aligned = align_depth_ssi(p.depth, gt, valid);
      d1.add(depth_delta(aligned, gt, 1.25, true, &valid));
      d2.add(depth_delta(aligned, gt, 1.25 * 1.25, true, &valid));
    }
  }
  r.movable_acc = movable.get();
  r.rigidity_acc = rigidity.get();
  r.articulation_acc = articulation.get();
  r.action_acc = action.get();
  r.box_iou = box.get();
  r.mask_iou = mask.get();
  r.axis_ea = axis.get();
  r.affordance_sim = afford.get();
  r.depth_delta_1 = d1.get();
  r.depth_delta_2 = d2.get();
  return r;
}

nlohmann::json MetricReport::to_json() const {
  return {{"movable_acc", opt(movable_acc)},
          {"rigidity_acc", opt(rigidity_acc)},
          {"articulation_acc", opt(articulation_acc)},
          {"action_acc", opt(action_acc)},
          {"box_iou", opt(box_iou)},
          {"mask_iou", opt(mask_iou)},
          {"axis_ea", opt(axis_ea)},
          {"affordance_sim", opt(affordance_sim)},
          {"depth_delta", {{"1.25", opt(depth_delta_1)}, {"1.5625", opt(depth_delta_2)}}},
          {"num_images", num_images},
          {"num_queries", num_queries}};
}

std::string MetricReport::table() const {
  auto cell = [](const std::optional<double>& v, bool percent) {
    std::ostringstream ss;
    if (!v) return std::string("-");
    ss << std::fixed << std::setprecision(percent ? 1 : 3) << (percent ? 100.0 * *v : *v);
    return ss.str();
  };
  const std::vector<std::pair<std::string, std::string>> cols{
      {"Movable", cell(movable_acc, true)},      {"Box", cell(box_iou, true)},
      {"Mask", cell(mask_iou, true)},            {"Rigidity", cell(rigidity_acc, true)},
      {"Articulation Cat.", cell(articulation_acc, true)}, {"Axis", cell(axis_ea, true)},
      {"Action", cell(action_acc, true)},        {"Affordance", cell(affordance_sim, false)},
      {"Depth d<1.25", cell(depth_delta_1, true)}, {"Depth d<1.25^2", cell(depth_delta_2, true)}};
  std::ostringstream head, row;
  for (const auto& [name, value] : cols) {
    const auto w = std::max(name.size(), value.size()) + 2;
    head << std::setw(static_cast<int>(w)) << name;
    row << std::setw(static_cast<int>(w)) << value;
  }
  return head.str() + "\n" + row.str() + "\n";
}

}  // namespace i3d::metrics
