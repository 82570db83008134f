#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/grid.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace i3d::metrics {

double box_iou(const BoxXYXY& a, const BoxXYXY& b);

/// |a & b| / |a | b|, 1.0 when both are empty.
double mask_iou(const BinaryGrid& a, const BinaryGrid& b);
double mask_iou(const Mask& a, const Mask& b);

/// Product of an angle score and a midpoint-distance score after clipping both
/// lines to the unit square:
///   S_angle = max(0, 1 - dtheta / (pi/2)),  dtheta the acute angle between lines
///   S_dist  = max(0, 1 - |mid_a - mid_b| / sqrt(2))
/// Throws GeometryError when a line misses the unit square.
double ea_score(const Line2D& pred, const Line2D& gt);

/// Histogram intersection of the sum-normalized maps (zero-sum maps become
/// uniform). Throws on negative entries.
double sim(const Grid& p, const Grid& q);

/// Fraction of pixels with max(p/g, g/p) < thresh after scaling pred by
/// median(gt)/median(pred) (unless align is false). Optional validity mask.
double depth_delta(const Grid& pred, const Grid& gt, double thresh, bool align = true,
                   const BinaryGrid* valid = nullptr);

/// Per-pixel sigmoid probabilities, min-max rescaled then sum-normalized into
/// a distribution over locations; uniform when the map is flat.
Grid affordance_distribution(const Grid& logits);

/// Maps pred into gt's per-image median / mean-absolute-deviation frame over
/// valid pixels, flooring at a small positive depth.
Grid align_depth_ssi(const Grid& pred, const Grid& gt, const BinaryGrid& valid);

struct MetricReport {
  std::optional<double> movable_acc, rigidity_acc, articulation_acc, action_acc;
  std::optional<double> box_iou, mask_iou, axis_ea, affordance_sim;
  std::optional<double> depth_delta_1, depth_delta_2;  // thresholds 1.25 and 1.25^2
  int num_images = 0;
  int num_queries = 0;

  nlohmann::json to_json() const;
  /// Columns in the order Movable, Box, Mask, Rigidity, Articulation Cat.,
  /// Axis, Action, Affordance, then depth.
  std::string table() const;
};

/// Averages each property over the queries where it is annotated. Predicted
/// masks are thresholded at mask_threshold after bilinear resampling to the
/// annotation resolution; depth is compared after SSI alignment.
MetricReport evaluate(const std::vector<ImagePrediction>& preds, const std::vector<SceneSample>& samples,
                      double mask_threshold = 0.5);

}  // namespace i3d::metrics
