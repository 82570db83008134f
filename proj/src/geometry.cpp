#include "i3d/geometry.hpp"

#include "i3d/random.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <array>

namespace i3d {

CameraModel CameraModel::from_vertical_fov(int width, int height, double vfov_deg) {
  const double f = 0.5 * height / std::tan(0.5 * vfov_deg * std::numbers::pi / 180.0);
  return {f, f, 0.5 * width, 0.5 * height};
}

Homography Homography::normalized(const Eigen::Matrix3d& m) {
  Homography h;
  if (std::abs(m(2, 2)) > 1e-12) {
    h.H = m / m(2, 2);
  } else {
    h.H = m / m.norm();
  }
  return h;
}

Homography Homography::inverse() const { return normalized(H.inverse()); }

Line2D line_through(const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d d = b - a;
  if (d.norm() < 1e-15) throw GeometryError("line_through: coincident points");
  const Eigen::Vector2d n = Eigen::Vector2d(-d.y(), d.x()).normalized();
  return normalize_line({std::atan2(n.y(), n.x()), n.dot(a)});
}

std::optional<std::pair<Eigen::Vector2d, Eigen::Vector2d>> clip_line(const Line2D& l, double x0, double y0, double x1,
                                                                     double y1) {
  const Eigen::Vector2d n(std::cos(l.theta), std::sin(l.theta));
  const Eigen::Vector2d d(-n.y(), n.x());
  const Eigen::Vector2d p0 = l.r * n;
  double tmin = -std::numeric_limits<double>::infinity();
  double tmax = std::numeric_limits<double>::infinity();
  auto clip_axis = [&](double p, double dir, double lo, double hi) {
    if (std::abs(dir) < 1e-15) return p >= lo && p <= hi;
    double ta = (lo - p) / dir;
    double tb = (hi - p) / dir;
    if (ta > tb) std::swap(ta, tb);
    tmin = std::max(tmin, ta);
    tmax = std::min(tmax, tb);
    return true;
  };
  if (!clip_axis(p0.x(), d.x(), x0, x1) || !clip_axis(p0.y(), d.y(), y0, y1)) return std::nullopt;
  if (!(tmax - tmin > 1e-12)) return std::nullopt;
  return std::make_pair(Eigen::Vector2d(p0 + tmin * d), Eigen::Vector2d(p0 + tmax * d));
}

Grid gaussian_bump(const QueryPoint& center, int radius_px, int out_w, int out_h) {
  if (radius_px < 1) throw std::invalid_argument("gaussian_bump: radius must be >= 1");
  const double sigma = (2 * radius_px + 1) / 6.0;
  const int cx = std::clamp(static_cast<int>(std::floor(center.x * out_w)), 0, out_w - 1);
  const int cy = std::clamp(static_cast<int>(std::floor(center.y * out_h)), 0, out_h - 1);
  Grid g = Grid::Zero(out_h, out_w);
  const double denom = 2.0 * sigma * sigma;
  for (int y = std::max(0, cy - radius_px); y <= std::min(out_h - 1, cy + radius_px); ++y)
    for (int x = std::max(0, cx - radius_px); x <= std::min(out_w - 1, cx + radius_px); ++x) {
      const double d2 = static_cast<double>((x - cx) * (x - cx) + (y - cy) * (y - cy));
      g(y, x) = std::exp(-d2 / denom);
    }
  return g;
}

std::array<GridF, 3> normals_from_depth(const GridF& depth, const CameraModel& cam) {
  const auto rows = depth.rows();
  const auto cols = depth.cols();
  std::array<GridF, 3> out{GridF(rows, cols), GridF(rows, cols), GridF(rows, cols)};
  auto point = [&](Eigen::Index r, Eigen::Index c) {
    return backproject<double>(c + 0.5, r + 0.5, static_cast<double>(depth(r, c)), cam);
  };
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      const Eigen::Index cl = c > 0 ? c - 1 : c;
      const Eigen::Index cr = c + 1 < cols ? c + 1 : c;
      const Eigen::Index ru = r > 0 ? r - 1 : r;
      const Eigen::Index rd = r + 1 < rows ? r + 1 : r;
      Eigen::Vector3d n(0, 0, -1);
      if (cl != cr && ru != rd) {
        const Eigen::Vector3d du = point(r, cr) - point(r, cl);
        const Eigen::Vector3d dv = point(rd, c) - point(ru, c);
        const Eigen::Vector3d x = du.cross(dv);
        if (x.norm() > 1e-12) n = x.normalized();
        if (n.z() > 0) n = -n;
      }
      for (int k = 0; k < 3; ++k) out[k](r, c) = static_cast<float>(n[k]);
    }
  return out;
}

Eigen::Vector3d mean_normal(const std::array<GridF, 3>& normals, const BinaryGrid& mask) {
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      if (mask(r, c)) acc += Eigen::Vector3d(normals[0](r, c), normals[1](r, c), normals[2](r, c));
  if (acc.norm() < 1e-12) throw GeometryError("mean_normal: empty mask or cancelling normals");
  return acc.normalized();
}

namespace {

double median_of(std::vector<double> v) {
  const auto mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double m = v[mid];
  if (v.size() % 2 == 0) {
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    m = 0.5 * (m + lo);
  }
  return m;
}

}  // namespace

Line3D lift_axis_to_3d(const Line2D& axis, const GridF& depth, const Mask& mask, const CameraModel& cam,
                       const LiftOptions& opts) {
  if (opts.samples < 2) throw std::invalid_argument("lift_axis_to_3d: need at least 2 samples");
  double bx0 = 0, by0 = 0, bx1 = 1, by1 = 1;
  if (const auto b = mask.pixel_bounds()) {
    bx0 = static_cast<double>((*b)[0]) / mask.width();
    by0 = static_cast<double>((*b)[1]) / mask.height();
    bx1 = static_cast<double>((*b)[2]) / mask.width();
    by1 = static_cast<double>((*b)[3]) / mask.height();
    const double dx = opts.box_dilation * (bx1 - bx0);
    const double dy = opts.box_dilation * (by1 - by0);
    bx0 = std::max(0.0, bx0 - dx);
    by0 = std::max(0.0, by0 - dy);
    bx1 = std::min(1.0, bx1 + dx);
    by1 = std::min(1.0, by1 + dy);
  }
  const auto seg = clip_line(normalize_line(axis), bx0, by0, bx1, by1);
  if (!seg) throw GeometryError("lift_axis_to_3d: axis does not cross the object region");

  const double w = static_cast<double>(depth.cols());
  const double h = static_cast<double>(depth.rows());
  std::vector<Eigen::Vector3d> pts;
  std::vector<double> zs;
  for (int k = 0; k < opts.samples; ++k) {
    const double t = (k + 0.5) / opts.samples;
    const Eigen::Vector2d p = (1 - t) * seg->first + t * seg->second;
    const double u = p.x() * w;
    const double v = p.y() * h;
    const double z = sample_bilinear(depth, u, v);
    if (!(z > 0) || !std::isfinite(z)) continue;
    pts.push_back(backproject(u, v, z, cam));
    zs.push_back(z);
  }
  if (pts.size() < 2) throw GeometryError("lift_axis_to_3d: fewer than 2 valid depth samples");

  const double med = median_of(zs);
  std::vector<double> dev(zs.size());
  for (size_t i = 0; i < zs.size(); ++i) dev[i] = std::abs(zs[i] - med);
  const double mad = median_of(dev);
  const double cut = opts.mad_k * 1.4826 * mad;
  std::vector<Eigen::Vector3d> kept;
  for (size_t i = 0; i < pts.size(); ++i)
    if (mad <= 0 || dev[i] <= cut) kept.push_back(pts[i]);
  if (kept.size() < 2) throw GeometryError("lift_axis_to_3d: fewer than 2 inlier depth samples");

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : kept) mean += p;
  mean /= static_cast<double>(kept.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : kept) cov += (p - mean) * (p - mean).transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  Eigen::Vector3d dir = es.eigenvectors().col(2).normalized();
  // deterministic orientation: prefer image-down, then image-right
  if (dir.y() < -1e-9 || (std::abs(dir.y()) <= 1e-9 && dir.x() < 0)) dir = -dir;
  return {mean, dir};
}

// ---------------------------------------------------------------------------

namespace {

Eigen::Matrix3d normalizing_transform(const Eigen::Matrix2Xd& pts) {
  const Eigen::Vector2d c = pts.rowwise().mean();
  const double mean_dist = (pts.colwise() - c).colwise().norm().mean();
  const double s = mean_dist > 1e-15 ? std::sqrt(2.0) / mean_dist : 1.0;
  Eigen::Matrix3d T;
  T << s, 0, -s * c.x(), 0, s, -s * c.y(), 0, 0, 1;
  return T;
}

bool collinear_triple(const Eigen::Matrix2Xd& p, const std::array<int, 4>& idx) {
  const double scale = 1e-9 * std::max(1.0, p.cwiseAbs().maxCoeff());
  for (int a = 0; a < 4; ++a)
    for (int b = a + 1; b < 4; ++b)
      for (int c = b + 1; c < 4; ++c) {
        const Eigen::Vector2d u = p.col(idx[b]) - p.col(idx[a]);
        const Eigen::Vector2d v = p.col(idx[c]) - p.col(idx[a]);
        if (std::abs(u.x() * v.y() - u.y() * v.x()) <= scale * std::max(1.0, u.norm() * v.norm())) return true;
      }
  return false;
}

int count_inliers(const Homography& h, const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& dst, double thresh,
                  std::vector<bool>* flags) {
  const double t2 = thresh * thresh;
  int count = 0;
  if (flags) flags->assign(static_cast<size_t>(src.cols()), false);
  for (Eigen::Index i = 0; i < src.cols(); ++i) {
    const Eigen::Vector3d q = h.H * src.col(i).homogeneous();
    if (std::abs(q.z()) < 1e-15) continue;
    const double e2 = (q.hnormalized() - dst.col(i)).squaredNorm();
    if (e2 < t2) {
      ++count;
      if (flags) (*flags)[static_cast<size_t>(i)] = true;
    }
  }
  return count;
}

}  // namespace

Homography fit_homography_dlt(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& dst) {
  if (src.cols() != dst.cols()) throw std::invalid_argument("fit_homography_dlt: size mismatch");
  if (src.cols() < 4) throw GeometryError("fit_homography_dlt: need at least 4 correspondences");
  const Eigen::Matrix3d Ts = normalizing_transform(src);
  const Eigen::Matrix3d Td = normalizing_transform(dst);
  const Eigen::Index n = src.cols();
  Eigen::MatrixXd A(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d s = Ts * src.col(i).homogeneous();
    const Eigen::Vector3d d = Td * dst.col(i).homogeneous();
    const double x = s.x() / s.z(), y = s.y() / s.z();
    const double u = d.x() / d.z(), v = d.y() / d.z();
    A.row(2 * i) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    A.row(2 * i + 1) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d Hn;
  Hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d H = Td.inverse() * Hn * Ts;
  if (std::abs(H.determinant()) < 1e-14 * std::pow(H.norm(), 3)) throw GeometryError("fit_homography_dlt: singular fit");
  return Homography::normalized(H);
}

RansacResult fit_homography_ransac(const Eigen::Matrix2Xd& src, const Eigen::Matrix2Xd& dst, double thresh_px, int iters,
                                   std::uint64_t seed) {
  if (src.cols() != dst.cols()) throw std::invalid_argument("fit_homography_ransac: size mismatch");
  const int n = static_cast<int>(src.cols());
  if (n < 4) throw GeometryError("fit_homography_ransac: need at least 4 correspondences");
  Rng rng(seed);
  Homography best;
  int best_count = -1;
  std::array<int, 4> idx{};
  Eigen::Matrix2Xd s4(2, 4), d4(2, 4);
  for (int it = 0; it < iters; ++it) {
    for (int k = 0; k < 4; ++k) {
      bool fresh = false;
      while (!fresh) {
        idx[k] = rng.uniform_int(0, n - 1);
        fresh = std::find(idx.begin(), idx.begin() + k, idx[k]) == idx.begin() + k;
      }
    }
    if (n > 4 && (collinear_triple(src, idx) || collinear_triple(dst, idx))) continue;
    for (int k = 0; k < 4; ++k) {
      s4.col(k) = src.col(idx[k]);
      d4.col(k) = dst.col(idx[k]);
    }
    Homography h;
    try {
      h = fit_homography_dlt(s4, d4);
    } catch (const GeometryError&) {
      continue;
    }
    const int c = count_inliers(h, src, dst, thresh_px, nullptr);
    if (c > best_count) {
      best_count = c;
      best = h;
    }
    if (n == 4) break;
  }
  if (best_count < 4) throw GeometryError("fit_homography_ransac: no model with at least 4 inliers");

  // re-estimate on the consensus set and re-collect inliers until it stops changing
  RansacResult out;
  out.model = best;
  std::vector<bool> flags;
  count_inliers(best, src, dst, thresh_px, &flags);
  for (int round = 0; round < 10; ++round) {
    const auto count = std::count(flags.begin(), flags.end(), true);
    if (count < 4) break;
    Eigen::Matrix2Xd si(2, count), di(2, count);
    for (int i = 0, k = 0; i < n; ++i)
      if (flags[static_cast<size_t>(i)]) {
        si.col(k) = src.col(i);
        di.col(k) = dst.col(i);
        ++k;
      }
    try {
      out.model = fit_homography_dlt(si, di);
    } catch (const GeometryError&) {
      break;
    }
    std::vector<bool> next;
    count_inliers(out.model, src, dst, thresh_px, &next);
    if (next == flags) break;
    flags = std::move(next);
  }
  out.inliers = std::move(flags);
  out.inlier_count = static_cast<int>(std::count(out.inliers.begin(), out.inliers.end(), true));
  return out;
}

}  // namespace i3d
