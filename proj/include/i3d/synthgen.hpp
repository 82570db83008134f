#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/geometry.hpp"
#include "i3d/grid.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace i3d::synth {

enum class ObjectKind { kDoor, kDrawer, kBox, kBlob };
inline constexpr int kNumObjectKinds = 4;

enum class HingeSide { kLeft, kRight, kTop, kBottom };

/// Wall objects (door, drawer, blob) sit on the back wall: position is the
/// face center (X, Y) in world units, size is (width, height, -). Boxes stand
/// on the floor: position is the base center (X, Z), size is (width, height,
/// depth), yaw turns them about the vertical.
struct ObjectSpec {
  ObjectKind kind = ObjectKind::kDoor;
  Eigen::Vector2d position = Eigen::Vector2d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  double yaw = 0.0;
  HingeSide hinge = HingeSide::kLeft;
  Eigen::Vector2d handle{0.85, 0.5};  // face coordinates in [0, 1]^2
  Eigen::Vector3d albedo{0.5, 0.5, 0.5};
  std::vector<double> blob_radii;  // relative outline radii, blobs only
  double open_angle = 0.0;         // doors, radians, swing toward the camera
  double pull_offset = 0.0;        // drawers, world units toward the camera

  bool large() const { return kind == ObjectKind::kBox && size.maxCoeff() >= 0.5; }
};

/// World frame: camera at the origin, Y down, back wall at Z = wall_distance,
/// floor at Y = camera_height. The camera is yawed then pitched down.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::string image_id = "synth";
  int width = 256;
  int height = 192;
  double wall_distance = 3.5;
  double camera_height = 1.4;
  double yaw = 0.0;
  double pitch = 0.15;
  Eigen::Vector3d wall_albedo{0.80, 0.76, 0.68};
  Eigen::Vector3d floor_albedo{0.45, 0.36, 0.28};
  int fixture_queries = 2;
  std::vector<ObjectSpec> objects;

  CameraModel camera() const { return CameraModel::from_vertical_fov(width, height, 60.0); }
  /// Camera-to-world rotation.
  Eigen::Matrix3d rotation() const;
};

/// A planar piece of the scene in camera coordinates. Unbounded planes (wall,
/// floor) have an empty polygon. The plane is normal . X = offset, with the
/// normal facing the camera.
struct Primitive {
  int object = -1;  // kWall, kFloor or an index into SceneSpec::objects
  int part = 0;     // 0 face, 1 handle; box faces 0..5
  std::vector<Eigen::Vector3d> polygon;
  Eigen::Vector3d normal = -Eigen::Vector3d::UnitZ();
  double offset = 0.0;
  Eigen::Vector3d albedo{0.5, 0.5, 0.5};
};

inline constexpr int kWall = -1;
inline constexpr int kFloor = -2;

struct Rendering {
  RgbImage image;
  GridF depth;                    // z-depth in world units
  std::array<GridF, 3> normals;   // camera frame, facing the camera
  GridT<int> object;              // kWall, kFloor or object index
  std::vector<Primitive> primitives;
};

struct ObjectTruth {
  int object = 0;
  int query = -1;                  // index into SceneSample::queries
  std::optional<Line3D> hinge;     // doors, camera frame, lift_axis_to_3d orientation
  Eigen::Vector3d face_normal = -Eigen::Vector3d::UnitZ();
  BinaryGrid mask;
};

struct GeneratedSample {
  SceneSample sample;
  SceneSpec spec;
  std::vector<ObjectTruth> objects;
};

struct LayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Random scene with 1..4 objects; the first one has first_kind when given.
/// Throws LayoutError when an object cannot be placed in 100 attempts.
SceneSpec random_spec(std::uint64_t seed, int width = 256, int height = 192,
                      std::optional<ObjectKind> first_kind = std::nullopt);

std::vector<Primitive> scene_primitives(const SceneSpec& spec);

/// Polygon rasterization at pixel centers plus plane-equation depth.
Rendering render(const SceneSpec& spec);

GeneratedSample generate(const SceneSpec& spec);

/// n samples with per-sample seeds derived from (seed, index); the first
/// object kind cycles through the four kinds.
std::vector<GeneratedSample> generate_split(int n, std::uint64_t seed, int width = 256, int height = 192);

/// Mask of `object` after swinging the door by angle (radians) or pulling the
/// drawer by offset, everything else unchanged.
BinaryGrid render_opened_door(const SceneSpec& spec, int object, double angle);
BinaryGrid render_pulled_drawer(const SceneSpec& spec, int object, double offset);

}  // namespace i3d::synth
