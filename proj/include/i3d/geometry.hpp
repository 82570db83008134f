#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/grid.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace i3d {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Pinhole intrinsics in pixels. Pixel (i, j) has its center at (i + 0.5, j + 0.5).
struct CameraModel {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  /// Principal point at the image center, square pixels, given vertical FOV.
  static CameraModel from_vertical_fov(int width, int height, double vfov_deg = 60.0);
  /// Same camera expressed on a grid resampled by (sx, sy).
  CameraModel scaled(double sx, double sy) const { return {fx * sx, fy * sy, cx * sx, cy * sy}; }
};

struct Line3D {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitZ();
};

/// 3x3 projective map normalized so H(2,2) == 1.
struct Homography {
  Eigen::Matrix3d H = Eigen::Matrix3d::Identity();

  Eigen::Vector2d apply(const Eigen::Vector2d& p) const {
    const Eigen::Vector3d q = H * p.homogeneous();
    return q.hnormalized();
  }
  Homography inverse() const;
  static Homography normalized(const Eigen::Matrix3d& m);
};

// ---------------------------------------------------------------------------
// 2D lines and the continuous axis encoding.

/// Canonical (theta in [0, pi)) representative; (theta + pi, r) == (theta, -r).
inline Line2D normalize_line(Line2D l) {
  constexpr double pi = std::numbers::pi;
  double t = std::fmod(l.theta, 2 * pi);
  double r = l.r;
  if (t < 0) t += 2 * pi;
  if (t >= pi) {
    t -= pi;
    r = -r;
  }
  if (t >= pi) t = 0.0;
  return {t, r};
}

inline AxisEncoding encode_axis(const Line2D& line) {
  const Line2D l = normalize_line(line);
  return {std::sin(2 * l.theta), std::cos(2 * l.theta), l.r};
}

/// Inverse of encode_axis; (s2, c2) need not be unit length.
inline Line2D decode_axis(const AxisEncoding& e) {
  const double n = std::hypot(e.s2, e.c2);
  if (!(n > 1e-12)) throw GeometryError("decode_axis: degenerate (sin 2theta, cos 2theta) pair");
  double theta = 0.5 * std::atan2(e.s2 / n, e.c2 / n);
  if (theta < 0) theta += std::numbers::pi;
  if (theta >= std::numbers::pi) theta = 0.0;
  return {theta, e.r};
}

/// Line through two distinct points (same coordinate frame as the points).
Line2D line_through(const Eigen::Vector2d& a, const Eigen::Vector2d& b);

/// Segment of the line inside the axis-aligned box [x0,x1]x[y0,y1].
std::optional<std::pair<Eigen::Vector2d, Eigen::Vector2d>> clip_line(const Line2D& l, double x0, double y0, double x1,
                                                                     double y1);

/// Soft keypoint target drawn as in CornerNet: exp(-d^2 / (2 sigma^2)) with
/// sigma = (2 radius_px + 1) / 6 inside the (2 radius_px + 1)^2 window around
/// the pixel containing the center, zero elsewhere.
Grid gaussian_bump(const QueryPoint& center, int radius_px, int out_w, int out_h);

// ---------------------------------------------------------------------------
// Pinhole geometry.

template <typename Scalar>
Vec3<Scalar> backproject(Scalar u, Scalar v, Scalar depth, const CameraModel& cam) {
  if (!(depth > Scalar(0))) throw GeometryError("backproject: depth must be positive");
  return {depth * (u - Scalar(cam.cx)) / Scalar(cam.fx), depth * (v - Scalar(cam.cy)) / Scalar(cam.fy), depth};
}

template <typename Scalar>
Vec2<Scalar> project(const Vec3<Scalar>& p, const CameraModel& cam) {
  return {Scalar(cam.fx) * p.x() / p.z() + Scalar(cam.cx), Scalar(cam.fy) * p.y() / p.z() + Scalar(cam.cy)};
}

/// Per-pixel unit normals (x, y, z channels) from backprojected finite
/// differences; central in the interior, one-sided on borders, n_z <= 0.
std::array<GridF, 3> normals_from_depth(const GridF& depth, const CameraModel& cam);

/// Mean of the normals inside a binary mask (same grid), renormalized.
Eigen::Vector3d mean_normal(const std::array<GridF, 3>& normals, const BinaryGrid& mask);

struct LiftOptions {
  int samples = 32;            // points sampled along the clipped 2D axis (>= 16)
  double box_dilation = 0.10;  // mask box grows by this fraction of its size per side
  double mad_k = 3.0;          // depth outlier cut in robust standard deviations
};

/// Backprojects the 2D axis (normalized coordinates) through the depth grid
/// and fits a 3D line by principal direction. `cam` must be expressed in the
/// pixel frame of `depth`.
Line3D lift_axis_to_3d(const Line2D& axis, const GridF& depth, const Mask& mask, const CameraModel& cam,
                       const LiftOptions& opts = {});

/// Rodrigues rotation of each column about the axis through axis.origin.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, Eigen::Dynamic> rotate_points_about_axis(const Eigen::Matrix<Scalar, 3, Eigen::Dynamic>& pts,
                                                                  const Line3D& axis, Scalar angle) {
  const Vec3<Scalar> o = axis.origin.cast<Scalar>();
  const Vec3<Scalar> k = axis.direction.cast<Scalar>().normalized();
  const Eigen::Matrix<Scalar, 3, 3> R = Eigen::AngleAxis<Scalar>(angle, k).toRotationMatrix();
  return (R * (pts.colwise() - o)).colwise() + o;
}

// ---------------------------------------------------------------------------
// Homographies.

/// Normalized DLT over all correspondences (>= 4).
Homography fit_homography_dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& dst);

struct RansacResult {
  Homography model;
  std::vector<bool> inliers;
  int inlier_count = 0;
};

/// 4-point RANSAC, then DLT refits on the inliers until the inlier set is
/// stable. Deterministic for a given seed.
RansacResult fit_homography_ransac(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& dst, double thresh_px = 2.0,
                                   int iters = 1000, std::uint64_t seed = 0);

}  // namespace i3d
