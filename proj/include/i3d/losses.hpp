#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/grid.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

// Every loss returns its value and, when a gradient pointer is given, writes
// d(loss)/d(input) of the same shape as the differentiated input.

namespace i3d::loss {

template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

inline constexpr double kLogitClamp = 15.0;
inline constexpr double kScaleFloor = 1e-6;

namespace detail {

template <typename S>
S softplus(S x) {
  return x > S(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename S>
S sigmoid(S x) {
  return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

template <typename S>
S sign(S x) {
  return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
}

/// Median over the selected entries and, per entry, d(median)/d(entry).
template <typename S>
S median_with_weights(const std::vector<S>& v, std::vector<S>* weights) {
  const size_t n = v.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  const size_t mid = n / 2;
  std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(mid), order.end(),
                   [&](size_t a, size_t b) { return v[a] < v[b]; });
  if (weights) weights->assign(n, S(0));
  if (n % 2 == 1) {
    if (weights) (*weights)[order[mid]] = S(1);
    return v[order[mid]];
  }
  const auto lo_it = std::max_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(mid),
                                      [&](size_t a, size_t b) { return v[a] < v[b]; });
  if (weights) {
    (*weights)[order[mid]] += S(0.5);
    (*weights)[*lo_it] += S(0.5);
  }
  return S(0.5) * (v[order[mid]] + v[*lo_it]);
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// -log softmax(logits)[label].
template <typename S>
S ce_loss(const VecX<S>& logits, int label, VecX<S>* grad = nullptr) {
  if (label < 0 || label >= logits.size()) throw std::invalid_argument("ce_loss: label out of range");
  const S mx = logits.maxCoeff();
  const VecX<S> e = (logits.array() - mx).exp().matrix();
  const S z = e.sum();
  if (grad) {
    *grad = e / z;
    (*grad)(label) -= S(1);
  }
  return std::log(z) + mx - logits(label);
}

enum class AlphaSplit {
  kPerTerm,    // alpha weights the positive term, 1 - alpha the negative term
  kThreshold,  // the whole pixel is weighted alpha when target >= 0.5, else 1 - alpha
};

/// Binary focal loss averaged over pixels; p = sigmoid(logit) with logits
/// clamped to +-15 (zero gradient outside the clamp).
template <typename S>
S focal_loss(const GridT<S>& logits, const GridT<S>& target, S alpha, S gamma, GridT<S>* grad = nullptr,
             AlphaSplit split = AlphaSplit::kPerTerm) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols())
    throw std::invalid_argument("focal_loss: shape mismatch");
  const auto n = logits.size();
  if (grad) grad->resize(logits.rows(), logits.cols());
  S total = S(0);
  const S clamp = S(kLogitClamp);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S raw = logits.data()[i];
    const S x = std::clamp(raw, -clamp, clamp);
    const S t = target.data()[i];
    const S p = detail::sigmoid(x);
    const S log_p = -detail::softplus(-x);
    const S log_q = -detail::softplus(x);
    S w_pos = alpha, w_neg = S(1) - alpha;
    if (split == AlphaSplit::kThreshold) w_pos = w_neg = (t >= S(0.5) ? alpha : S(1) - alpha);
    const S pos = -w_pos * std::pow(S(1) - p, gamma) * t * log_p;
    const S neg = -w_neg * std::pow(p, gamma) * (S(1) - t) * log_q;
    total += pos + neg;
    if (grad) {
      S g = S(0);
      if (raw > -clamp && raw < clamp) {
        const S dpos = -w_pos * t * std::pow(S(1) - p, gamma) * ((S(1) - p) - gamma * p * log_p);
        const S dneg = -w_neg * (S(1) - t) * std::pow(p, gamma) * (gamma * (S(1) - p) * log_q - p);
        g = dpos + dneg;
      }
      grad->data()[i] = g / static_cast<S>(n);
    }
  }
  return total / static_cast<S>(n);
}

/// 1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1), differentiated w.r.t. p.
template <typename S>
S dice_loss(const GridT<S>& prob, const GridT<S>& target, GridT<S>* grad = nullptr) {
  if (prob.rows() != target.rows() || prob.cols() != target.cols())
    throw std::invalid_argument("dice_loss: shape mismatch");
  const S eps = S(1);
  const S inter = (prob * target).sum();
  const S denom = prob.sum() + target.sum() + eps;
  const S num = S(2) * inter + eps;
  if (grad) *grad = -(S(2) * target * denom - num) / (denom * denom);
  return S(1) - num / denom;
}

template <typename S>
struct BoxLossResult {
  S l1 = S(0);
  S giou = S(0);  // 1 - GIoU
  std::array<S, 4> grad_l1{};
  std::array<S, 4> grad_giou{};
};

/// L1 over (x1, y1, x2, y2) and generalized-IoU loss; gradients w.r.t. pred.
template <typename S>
BoxLossResult<S> box_losses(const std::array<S, 4>& pred, const std::array<S, 4>& gt) {
  const auto [x1, y1, x2, y2] = pred;
  const auto [gx1, gy1, gx2, gy2] = gt;
  if (!(gx2 > gx1) || !(gy2 > gy1)) throw std::invalid_argument("box_losses: degenerate ground-truth box");
  if (!(x2 > x1) || !(y2 > y1)) throw std::invalid_argument("box_losses: degenerate predicted box");
  BoxLossResult<S> out;
  for (int k = 0; k < 4; ++k) {
    out.l1 += std::abs(pred[k] - gt[k]);
    out.grad_l1[k] = detail::sign(pred[k] - gt[k]);
  }
  const S iw = std::max(S(0), std::min(x2, gx2) - std::max(x1, gx1));
  const S ih = std::max(S(0), std::min(y2, gy2) - std::max(y1, gy1));
  const S inter = iw * ih;
  const S ap = (x2 - x1) * (y2 - y1);
  const S ag = (gx2 - gx1) * (gy2 - gy1);
  const S uni = ap + ag - inter;
  const S cw = std::max(x2, gx2) - std::min(x1, gx1);
  const S ch = std::max(y2, gy2) - std::min(y1, gy1);
  const S area_c = cw * ch;
  out.giou = S(2) - inter / uni - uni / area_c;

  std::array<S, 4> d_inter{}, d_ap{}, d_c{};
  if (iw > S(0) && ih > S(0)) {
    d_inter[0] = x1 > gx1 ? -ih : S(0);
    d_inter[2] = x2 < gx2 ? ih : S(0);
    d_inter[1] = y1 > gy1 ? -iw : S(0);
    d_inter[3] = y2 < gy2 ? iw : S(0);
  }
  d_ap = {-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)};
  d_c[0] = x1 < gx1 ? -ch : S(0);
  d_c[2] = x2 > gx2 ? ch : S(0);
  d_c[1] = y1 < gy1 ? -cw : S(0);
  d_c[3] = y2 > gy2 ? cw : S(0);
  for (int k = 0; k < 4; ++k) {
    const S d_uni = d_ap[k] - d_inter[k];
    const S d_iou = (d_inter[k] * uni - inter * d_uni) / (uni * uni);
    const S d_ratio = (d_uni * area_c - uni * d_c[k]) / (area_c * area_c);
    out.grad_giou[k] = -d_iou - d_ratio;
  }
  return out;
}

template <typename S>
struct AxisLossResult {
  S angle = S(0);
  S offset = S(0);
  std::array<S, 3> grad_angle{};   // w.r.t. (s2, c2, r)
  std::array<S, 3> grad_offset{};
};

/// L1 on the (sin 2theta, cos 2theta) pair and on r, kept as separate terms.
template <typename S>
AxisLossResult<S> axis_loss(const std::array<S, 3>& pred, const std::array<S, 3>& gt) {
  AxisLossResult<S> out;
  out.angle = std::abs(pred[0] - gt[0]) + std::abs(pred[1] - gt[1]);
  out.offset = std::abs(pred[2] - gt[2]);
  out.grad_angle = {detail::sign(pred[0] - gt[0]), detail::sign(pred[1] - gt[1]), S(0)};
  out.grad_offset = {S(0), S(0), detail::sign(pred[2] - gt[2])};
  return out;
}

// ---------------------------------------------------------------------------
// Scale- and shift-invariant depth supervision.

/// Per-image alignment (x - median) / max(eps, mean|x - median|) over valid
/// pixels; keeps what the backward pass needs.
template <typename S>
struct SsiAlignment {
  GridT<S> aligned;  // zero outside the valid set
  S shift = S(0);
  S scale = S(1);
  bool floored = false;
  std::vector<Eigen::Index> index;  // flat indices of valid pixels
  std::vector<S> median_weight;     // d(median)/dx per valid pixel
  std::vector<S> dev_sign;          // sign(x - median) per valid pixel

  /// Maps d(loss)/d(aligned) to d(loss)/d(input).
  GridT<S> backward(const GridT<S>& grad_aligned) const {
    GridT<S> g = GridT<S>::Zero(grad_aligned.rows(), grad_aligned.cols());
    const auto n = static_cast<S>(index.size());
    S sum_g = S(0), sum_ga = S(0), sum_sign = S(0);
    for (size_t i = 0; i < index.size(); ++i) {
      sum_g += grad_aligned.data()[index[i]];
      sum_ga += grad_aligned.data()[index[i]] * aligned.data()[index[i]];
      sum_sign += dev_sign[i];
    }
    for (size_t k = 0; k < index.size(); ++k) {
      const S dm = median_weight[k];
      const S ds = floored ? S(0) : (dev_sign[k] - sum_sign * dm) / n;
      g.data()[index[k]] = grad_aligned.data()[index[k]] / scale - sum_g * dm / scale - sum_ga * ds / scale;
    }
    return g;
  }
};

template <typename S>
SsiAlignment<S> ssi_align(const GridT<S>& x, const BinaryGrid& valid) {
  if (x.rows() != valid.rows() || x.cols() != valid.cols()) throw std::invalid_argument("ssi_align: shape mismatch");
  SsiAlignment<S> a;
  std::vector<S> vals;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (valid.data()[i]) {
      a.index.push_back(i);
      vals.push_back(x.data()[i]);
    }
  if (vals.size() < 2) throw std::invalid_argument("ssi_align: need at least 2 valid pixels");
  a.shift = detail::median_with_weights(vals, &a.median_weight);
  S mad = S(0);
  a.dev_sign.resize(vals.size());
  for (size_t i = 0; i < vals.size(); ++i) {
    mad += std::abs(vals[i] - a.shift);
    a.dev_sign[i] = detail::sign(vals[i] - a.shift);
  }
  mad /= static_cast<S>(vals.size());
  a.floored = !(mad > S(kScaleFloor));
  a.scale = a.floored ? S(kScaleFloor) : mad;
  a.aligned = GridT<S>::Zero(x.rows(), x.cols());
  for (size_t i = 0; i < vals.size(); ++i) a.aligned.data()[a.index[i]] = (vals[i] - a.shift) / a.scale;
  return a;
}

/// Mean L1 between independently aligned prediction and ground truth.
template <typename S>
S ssi_depth_loss(const GridT<S>& pred, const GridT<S>& gt, const BinaryGrid& valid, GridT<S>* grad = nullptr) {
  const auto ap = ssi_align(pred, valid);
  const auto ag = ssi_align(gt, valid);
  const auto n = static_cast<S>(ap.index.size());
  S total = S(0);
  GridT<S> g_aligned = GridT<S>::Zero(pred.rows(), pred.cols());
  for (auto i : ap.index) {
    const S d = ap.aligned.data()[i] - ag.aligned.data()[i];
    total += std::abs(d);
    g_aligned.data()[i] = detail::sign(d) / n;
  }
  if (grad) *grad = ap.backward(g_aligned);
  return total / n;
}

/// Sum over `scales` dyadic subsamplings of the mean absolute horizontal and
/// vertical differences of the aligned residual.
template <typename S>
S gradient_matching_loss(const GridT<S>& pred, const GridT<S>& gt, const BinaryGrid& valid, int scales = 4,
                         GridT<S>* grad = nullptr) {
  const auto ap = ssi_align(pred, valid);
  const auto ag = ssi_align(gt, valid);
  const GridT<S> res = ap.aligned - ag.aligned;
  GridT<S> g_res = GridT<S>::Zero(pred.rows(), pred.cols());
  S total = S(0);
  const auto rows = pred.rows(), cols = pred.cols();
  for (int k = 0; k < scales; ++k) {
    const Eigen::Index step = Eigen::Index(1) << k;
    S sum = S(0);
    long pairs = 0;
    auto visit = [&](Eigen::Index r0, Eigen::Index c0, Eigen::Index r1, Eigen::Index c1, bool accumulate_grad,
                     S scale) {
      if (!valid(r0, c0) || !valid(r1, c1)) return;
      const S d = res(r1, c1) - res(r0, c0);
      if (!accumulate_grad) {
        sum += std::abs(d);
        ++pairs;
      } else {
        const S s = detail::sign(d) * scale;
        g_res(r1, c1) += s;
        g_res(r0, c0) -= s;
      }
    };
    for (int pass = 0; pass < 2; ++pass) {
      const bool accumulate = pass == 1;
      if (accumulate && pairs == 0) break;
      const S scale = pairs > 0 ? S(1) / static_cast<S>(pairs) : S(0);
      for (Eigen::Index r = 0; r < rows; r += step)
        for (Eigen::Index c = 0; c < cols; c += step) {
          if (c + step < cols) visit(r, c, r, c + step, accumulate, scale);
          if (r + step < rows) visit(r, c, r + step, c, accumulate, scale);
        }
    }
    if (pairs > 0) total += sum / static_cast<S>(pairs);
  }
  if (grad) *grad = ap.backward(g_res);
  return total;
}

// ---------------------------------------------------------------------------
// Weighted combination.

struct LossConfig {
  double w_movable = 0.5;
  double w_rigidity = 0.5;
  double w_articulation = 0.5;
  double w_action = 0.5;
  double w_mask_focal = 2.0;
  double w_mask_dice = 2.0;
  double w_box_l1 = 5.0;
  double w_box_giou = 2.0;
  double w_axis_angle = 1.0;
  double w_axis_offset = 10.0;
  double w_affordance = 100.0;
  double w_depth = 1.0;
  double focal_gamma = 2.0;
  double mask_focal_alpha = 0.25;
  double affordance_alpha = 0.95;
  int depth_grad_scales = 4;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

inline const std::vector<std::string>& term_names() {
  static const std::vector<std::string> names{"movable",     "rigidity",   "articulation", "action",
                                              "mask_focal",  "mask_dice",  "box_l1",       "box_giou",
                                              "axis_angle",  "axis_offset", "affordance",  "depth_ssi",
                                              "depth_grad"};
  return names;
}

double term_weight(const LossConfig& cfg, const std::string& term);

struct LossReport {
  std::map<std::string, double> terms;  // only terms with at least one contributing item
  double total = 0.0;
};

/// Supervision for one query, resampled to the prediction grids.
struct QueryTarget {
  QueryAnnotation ann;
  Grid mask;        // binary, at mask-logit resolution (empty when no mask)
  Grid affordance;  // gaussian bump at affordance resolution (empty when none)
};

struct ImageTarget {
  std::vector<QueryTarget> queries;
  Grid depth;          // empty when the sample has no depth
  BinaryGrid depth_valid;
};

ImageTarget make_image_target(const SceneSample& s, int mask_h, int mask_w, int depth_h, int depth_w);

struct QueryGrad {
  std::array<double, kNumMovable> movable{};
  std::array<double, kNumRigidity> rigidity{};
  std::array<double, kNumArticulation> articulation{};
  std::array<double, kNumAction> action{};
  std::array<double, 4> box{};   // w.r.t. (x1, y1, x2, y2)
  std::array<double, 3> axis{};  // w.r.t. (s2, c2, r)
  Grid mask;                     // w.r.t. mask logits; empty when untouched
  Grid affordance;               // w.r.t. affordance logits; empty when untouched
};

struct ImageGrad {
  std::vector<QueryGrad> queries;
  Grid depth;  // empty when untouched
};

struct BatchEntry {
  const ImagePrediction* pred = nullptr;
  const ImageTarget* target = nullptr;
  std::vector<bool> valid;  // per prediction slot; slot i pairs with target->queries[i]
};

/// Weighted total over a batch. Every term is the mean over the items it
/// applies to: classification over valid queries with that label, axis over
/// rotation targets, depth over images with depth. Throws when no slot is valid.
LossReport total_loss(const std::vector<BatchEntry>& batch, const LossConfig& cfg, std::vector<ImageGrad>* grads = nullptr);

}  // namespace i3d::loss
