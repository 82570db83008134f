#include "i3d/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace i3d::render {

std::vector<double> default_angles() {
  const double d = std::numbers::pi / 180.0;
  return {0.0, 11.25 * d, 22.5 * d, 33.75 * d, 45.0 * d};
}

std::vector<double> default_offsets() { return {0.0, 0.05, 0.10, 0.15, 0.20}; }

namespace {

struct ObjectPoints {
  Eigen::Matrix3Xd world;  // camera frame
  Eigen::Matrix2Xd pixel;  // pixel-center coordinates
};

GridF depth_at_image_res(const GridF& depth, int w, int h) {
  if (depth.rows() == h && depth.cols() == w) return depth;
  return resize_bilinear(depth, h, w);
}

ObjectPoints backproject_mask(const BinaryGrid& mask, const GridF& depth, const CameraModel& cam, int max_points) {
  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < mask.rows(); ++y)
    for (int x = 0; x < mask.cols(); ++x)
      if (mask(y, x) && depth(y, x) > 0 && std::isfinite(depth(y, x))) px.emplace_back(x, y);
  if (px.size() < 4) throw GeometryError("renderer: fewer than 4 mask pixels with valid depth");
  const size_t stride = std::max<size_t>(1, (px.size() + static_cast<size_t>(max_points) - 1) / static_cast<size_t>(max_points));
  ObjectPoints out;
  const size_t n = (px.size() + stride - 1) / stride;
  out.world.resize(3, static_cast<Eigen::Index>(n));
  out.pixel.resize(2, static_cast<Eigen::Index>(n));
  for (size_t k = 0; k < n; ++k) {
    const auto [x, y] = px[k * stride];
    const double u = x + 0.5, v = y + 0.5;
    out.world.col(static_cast<Eigen::Index>(k)) = backproject(u, v, static_cast<double>(depth(y, x)), cam);
    out.pixel.col(static_cast<Eigen::Index>(k)) = Eigen::Vector2d(u, v);
  }
  return out;
}

Eigen::Matrix2Xd project_all(const Eigen::Matrix3Xd& pts, const CameraModel& cam) {
  Eigen::Matrix2Xd out(2, pts.cols());
  for (Eigen::Index k = 0; k < pts.cols(); ++k) {
    const Eigen::Vector3d p = pts.col(k);
    if (!(p.z() > 1e-6)) throw GeometryError("renderer: moved point behind the camera");
    out.col(k) = project(p, cam);
  }
  return out;
}

ClipFrame make_frame(const RgbImage& image, const BinaryGrid& mask, const Homography& h, double parameter) {
  ClipFrame f;
  f.parameter = parameter;
  f.homography = h;
  const int w = image.width, hgt = image.height;
  const Homography inv = h.inverse();
  const GridF m = mask.cast<float>();
  f.mask = BinaryGrid::Zero(hgt, w);
  f.alpha = GridF::Zero(hgt, w);
  f.region = RgbImage(w, hgt);
  for (int y = 0; y < hgt; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d s = inv.apply({x + 0.5, y + 0.5});
      if (!(s.x() >= 0 && s.y() >= 0 && s.x() <= w && s.y() <= hgt)) continue;
      const float a = sample_bilinear(m, s.x(), s.y());
      if (a <= 0) continue;
      f.alpha(y, x) = a;
      f.mask(y, x) = a >= 0.5f;
      const int sx = std::clamp(static_cast<int>(s.x()), 0, w - 1), sy = std::clamp(static_cast<int>(s.y()), 0, hgt - 1);
      for (int c = 0; c < 3; ++c) f.region.at(x, y, c) = image.at(sx, sy, c);
    }
  return f;
}

ArticulationClip animate(const RgbImage& image, const BinaryGrid& mask, const ObjectPoints& pts,
                         const CameraModel& cam, const std::vector<double>& params, const RenderOptions& opts,
                         const auto& move) {
  ArticulationClip clip;
  for (const double p : params) {
    Homography h;
    if (p != 0.0) {
      const Eigen::Matrix2Xd dst = project_all(move(pts.world, p), cam);
      const RansacResult r = fit_homography_ransac(pts.pixel, dst, opts.ransac_thresh_px, opts.ransac_iters, opts.seed);
      if (!r.model.H.allFinite()) throw GeometryError("renderer: homography fit failed");
      h = r.model;
    }
    clip.frames.push_back(make_frame(image, mask, h, p));
  }
  return clip;
}

void check_inputs(const RgbImage& image, const Mask& mask) {
  if (image.width <= 0 || image.height <= 0) throw std::invalid_argument("renderer: empty image");
  if (mask.width() != image.width || mask.height() != image.height)
    throw std::invalid_argument("renderer: mask size must match the image");
}

}  // namespace

ArticulationClip render_rotation(const RgbImage& image, const Mask& mask, const Line2D& axis2d, const GridF& depth,
                                 const CameraModel& cam, const std::vector<double>& angles,
                                 const RenderOptions& opts) {
  check_inputs(image, mask);
  const GridF d = depth_at_image_res(depth, image.width, image.height);
  const Line3D axis = lift_axis_to_3d(axis2d, d, mask, cam, opts.lift);
  const BinaryGrid m = mask.decode();
  const ObjectPoints pts = backproject_mask(m, d, cam, opts.max_points);
  // positive angles bring the object toward the camera
  const double before = pts.world.row(2).mean();
  const double after = rotate_points_about_axis<double>(pts.world, axis, 0.1).row(2).mean();
  const double sign = after <= before ? 1.0 : -1.0;
  auto move = [&](const Eigen::Matrix3Xd& w, double a) { return rotate_points_about_axis<double>(w, axis, sign * a); };
  ArticulationClip clip = animate(image, m, pts, cam, angles, opts, move);
  clip.kind = ArticulationClass::kRotation;
  clip.axis = axis;
  return clip;
}

ArticulationClip render_translation(const RgbImage& image, const Mask& mask, const GridF& depth,
                                    const CameraModel& cam, const std::vector<double>& offsets,
                                    const RenderOptions& opts) {
  check_inputs(image, mask);
  const GridF d = depth_at_image_res(depth, image.width, image.height);
  const BinaryGrid m = mask.decode();
  const Eigen::Vector3d n = mean_normal(normals_from_depth(d, cam), m);
  if (!n.allFinite() || n.norm() < 0.5) throw GeometryError("renderer: degenerate mean normal");
  const ObjectPoints pts = backproject_mask(m, d, cam, opts.max_points);
  auto move = [&](const Eigen::Matrix3Xd& w, double t) -> Eigen::Matrix3Xd { return w.colwise() + t * n; };
  ArticulationClip clip = animate(image, m, pts, cam, offsets, opts, move);
  clip.kind = ArticulationClass::kTranslation;
  clip.direction = n;
  return clip;
}

BinaryGrid warp_mask(const BinaryGrid& mask, const Homography& h) {
  const Homography inv = h.inverse();
  const GridF m = mask.cast<float>();
  const auto w = static_cast<double>(mask.cols()), hgt = static_cast<double>(mask.rows());
  BinaryGrid out = BinaryGrid::Zero(mask.rows(), mask.cols());
  for (Eigen::Index y = 0; y < mask.rows(); ++y)
    for (Eigen::Index x = 0; x < mask.cols(); ++x) {
      const Eigen::Vector2d s = inv.apply({static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5});
      if (!(s.x() >= 0 && s.y() >= 0 && s.x() <= w && s.y() <= hgt)) continue;
      out(y, x) = sample_bilinear(m, s.x(), s.y()) >= 0.5f;
    }
  return out;
}

RgbImage composite(const RgbImage& image, const ClipFrame& frame) {
  RgbImage out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const float a = frame.alpha(y, x);
      if (a <= 0) continue;
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<std::uint8_t>(
            std::lround(a * static_cast<float>(frame.region.at(x, y, c)) + (1 - a) * static_cast<float>(image.at(x, y, c))));
    }
  return out;
}

}  // namespace i3d::render
