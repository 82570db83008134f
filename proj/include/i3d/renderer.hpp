#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/geometry.hpp"
#include "i3d/grid.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace i3d::render {

struct ClipFrame {
  double parameter = 0.0;  // angle in radians or offset in depth units
  Homography homography;   // original pixel -> moved pixel
  BinaryGrid mask;         // warped object mask at image resolution
  RgbImage region;         // warped object pixels; zero outside the mask
  GridF alpha;             // bilinear coverage of the warped region in [0, 1]
};

struct ArticulationClip {
  ArticulationClass kind = ArticulationClass::kRotation;
  std::vector<ClipFrame> frames;
  std::optional<Line3D> axis;  // rotation clips, camera frame at image resolution
  Eigen::Vector3d direction = Eigen::Vector3d::Zero();  // translation clips, unit
};

struct RenderOptions {
  int max_points = 2000;  // correspondences handed to RANSAC
  double ransac_thresh_px = 1.0;
  int ransac_iters = 500;
  std::uint64_t seed = 0;
  LiftOptions lift;
};

/// Default sweep: 0 to 45 degrees in 5 frames.
std::vector<double> default_angles();
/// Default drawer sweep in depth units.
std::vector<double> default_offsets();

/// Rotates the object about its lifted hinge. Positive angles swing the
/// object toward the camera. `mask` must match the image size; `depth` may be
/// at any resolution and is resampled; `cam` is in image pixels.
/// Throws GeometryError on a degenerate axis or a failed homography fit.
ArticulationClip render_rotation(const RgbImage& image, const Mask& mask, const Line2D& axis2d, const GridF& depth,
                                 const CameraModel& cam, const std::vector<double>& angles,
                                 const RenderOptions& opts = {});

/// Translates the object along its mean surface normal. Positive offsets move
/// it toward the camera.
ArticulationClip render_translation(const RgbImage& image, const Mask& mask, const GridF& depth,
                                    const CameraModel& cam, const std::vector<double>& offsets,
                                    const RenderOptions& opts = {});

/// Inverse-mapped bilinear warp of a binary mask; samples outside the source
/// are empty.
BinaryGrid warp_mask(const BinaryGrid& mask, const Homography& h);

/// Draws the frame's region over `image`.
RgbImage composite(const RgbImage& image, const ClipFrame& frame);

}  // namespace i3d::render
