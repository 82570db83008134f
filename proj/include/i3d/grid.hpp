#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace i3d {

// Dense 2D grids are row-major: rows index image rows (y), cols index x.
template <typename Scalar>
using GridT = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Grid = GridT<double>;
using GridF = GridT<float>;
using BinaryGrid = GridT<std::uint8_t>;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // interleaved RGB, row-major

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }

  bool operator==(const RgbImage&) const = default;
};

/// Bilinear sample at continuous pixel coordinates where pixel (i, j) has its
/// center at (i + 0.5, j + 0.5). Coordinates are clamped to the border.
template <typename Derived>
typename Derived::Scalar sample_bilinear(const Eigen::ArrayBase<Derived>& g, double u, double v) {
  using S = typename Derived::Scalar;
  const auto rows = g.rows();
  const auto cols = g.cols();
  double x = u - 0.5;
  double y = v - 0.5;
  x = std::clamp(x, 0.0, static_cast<double>(cols - 1));
  y = std::clamp(y, 0.0, static_cast<double>(rows - 1));
  const auto x0 = static_cast<Eigen::Index>(x);
  const auto y0 = static_cast<Eigen::Index>(y);
  const auto x1 = std::min<Eigen::Index>(x0 + 1, cols - 1);
  const auto y1 = std::min<Eigen::Index>(y0 + 1, rows - 1);
  const double fx = x - static_cast<double>(x0);
  const double fy = y - static_cast<double>(y0);
  const double top = (1 - fx) * static_cast<double>(g(y0, x0)) + fx * static_cast<double>(g(y0, x1));
  const double bot = (1 - fx) * static_cast<double>(g(y1, x0)) + fx * static_cast<double>(g(y1, x1));
  return static_cast<S>((1 - fy) * top + fy * bot);
}

/// Resize with bilinear sampling at output pixel centers (align_corners = false).
template <typename Scalar>
GridT<Scalar> resize_bilinear(const GridT<Scalar>& g, int out_h, int out_w) {
  GridT<Scalar> out(out_h, out_w);
  const double sy = static_cast<double>(g.rows()) / out_h;
  const double sx = static_cast<double>(g.cols()) / out_w;
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c) out(r, c) = sample_bilinear(g, (c + 0.5) * sx, (r + 0.5) * sy);
  return out;
}

/// Box-filter downsampling by an integer factor in each direction.
template <typename Scalar>
GridT<Scalar> downsample_area(const GridT<Scalar>& g, int out_h, int out_w) {
  if (g.rows() % out_h != 0 || g.cols() % out_w != 0)
    throw std::invalid_argument("downsample_area: size is not an integer multiple");
  const int fy = static_cast<int>(g.rows()) / out_h;
  const int fx = static_cast<int>(g.cols()) / out_w;
  GridT<Scalar> out(out_h, out_w);
  for (int r = 0; r < out_h; ++r)
    for (int c = 0; c < out_w; ++c) out(r, c) = g.block(r * fy, c * fx, fy, fx).mean();
  return out;
}

RgbImage resize_image(const RgbImage& img, int out_w, int out_h);

}  // namespace i3d
