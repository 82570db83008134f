#pragma once

#include "i3d/grid.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace i3d {

inline constexpr int kMaxQueries = 15;

enum class MovableClass { kFixture = 0, kOneHand = 1, kTwoHands = 2 };
enum class RigidityClass { kRigid = 0, kNonrigid = 1 };
enum class ArticulationClass { kRotation = 0, kTranslation = 1, kFreeform = 2 };
enum class ActionClass { kPull = 0, kPush = 1, kOther = 2 };

inline constexpr int kNumMovable = 3;
inline constexpr int kNumRigidity = 2;
inline constexpr int kNumArticulation = 3;
inline constexpr int kNumAction = 3;

std::string_view to_string(MovableClass v);
std::string_view to_string(RigidityClass v);
std::string_view to_string(ArticulationClass v);
std::string_view to_string(ActionClass v);

/// Thrown by deserialization and validation; the message starts with the JSON
/// path of the first violated invariant.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Image location as fractions of width (x) and height (y).
struct QueryPoint {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const QueryPoint&) const = default;
};

struct BoxXYXY {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool operator==(const BoxXYXY&) const = default;
};

/// 2D line x*cos(theta) + y*sin(theta) = r in normalized image coordinates
/// (origin top-left). Canonical form has theta in [0, pi).
struct Line2D {
  double theta = 0.0;
  double r = 0.0;
  bool operator==(const Line2D&) const = default;
};

/// Continuous training encoding (sin 2theta, cos 2theta, r).
struct AxisEncoding {
  double s2 = 0.0;
  double c2 = 1.0;
  double r = 0.0;
  bool operator==(const AxisEncoding&) const = default;
};

/// Binary mask stored as COCO-style uncompressed RLE: column-major run lengths
/// starting with a (possibly empty) run of zeros.
class Mask {
 public:
  Mask() = default;
  /// Validates that runs sum to width*height and only the first run is empty.
  Mask(int width, int height, std::vector<std::uint32_t> counts);

  static Mask encode(const BinaryGrid& grid);
  BinaryGrid decode() const;

  int width() const { return width_; }
  int height() const { return height_; }
  const std::vector<std::uint32_t>& counts() const { return counts_; }
  std::int64_t area() const;
  /// Tight pixel bounding box (x0, y0, x1, y1) with exclusive upper bounds;
  /// nullopt for an empty mask.
  std::optional<std::array<int, 4>> pixel_bounds() const;

  bool operator==(const Mask&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint32_t> counts_;
};

struct AffordanceTarget {
  std::optional<QueryPoint> keypoint;
  int radius_px = 5;
  bool operator==(const AffordanceTarget&) const = default;
};

struct QueryAnnotation {
  QueryPoint point;
  MovableClass movable = MovableClass::kFixture;
  std::optional<RigidityClass> rigidity;
  std::optional<ArticulationClass> articulation;
  std::optional<ActionClass> action;
  std::optional<BoxXYXY> box;
  std::optional<Mask> mask;
  std::optional<Line2D> axis;
  std::optional<AffordanceTarget> affordance;

  bool operator==(const QueryAnnotation&) const = default;
};

struct SceneSample {
  std::string image_id;
  RgbImage image;
  std::optional<GridF> depth;                   // per-image arbitrary units, > 0
  std::optional<std::array<GridF, 3>> normals;  // unit vectors, camera frame
  std::vector<QueryAnnotation> queries;
  std::string source;
};

bool operator==(const SceneSample& a, const SceneSample& b);

/// Per-query network output.
struct InteractionPrediction {
  std::array<double, kNumMovable> movable_logits{};
  std::array<double, kNumRigidity> rigidity_logits{};
  std::array<double, kNumArticulation> articulation_logits{};
  std::array<double, kNumAction> action_logits{};
  BoxXYXY box;
  AxisEncoding axis_enc;
  Grid mask_logits;
  Grid affordance_logits;
};

/// Everything the model says about one image.
struct ImagePrediction {
  std::vector<InteractionPrediction> queries;
  Grid depth;
};

// ---------------------------------------------------------------------------
// Validation and (de)serialization.

/// Throws SchemaError naming the path of the first violated invariant.
void validate(const QueryAnnotation& q, const std::string& path = "query");
void validate(const SceneSample& s);

nlohmann::json to_json(const QueryAnnotation& q);
QueryAnnotation query_from_json(const nlohmann::json& j, const std::string& path = "query");

/// JSON document of a sample; image/depth/normals are referenced as sidecar
/// file names relative to the JSON file.
nlohmann::json to_json(const SceneSample& s);

/// Writes {image_id}.json, {image_id}.png and, when present,
/// {image_id}_depth.npy and {image_id}_normals.npy into dir.
void serialize_sample(const SceneSample& s, const std::filesystem::path& dir);
/// Reads and validates a sample from its JSON file.
SceneSample deserialize_sample(const std::filesystem::path& json_path);
/// Parses and validates a JSON document; sidecars are resolved against dir.
SceneSample deserialize_sample(const nlohmann::json& doc, const std::filesystem::path& dir);

/// All *.json samples in dir, sorted by image_id.
std::vector<SceneSample> load_split(const std::filesystem::path& dir);

struct PaddedQueries {
  std::array<QueryPoint, kMaxQueries> points{};
  std::array<bool, kMaxQueries> valid{};
  int count = 0;
};

/// Pads to the fixed decoder budget. Pads sit at the image center and are
/// flagged invalid; throws std::invalid_argument past the budget.
PaddedQueries pad_queries(const std::vector<QueryPoint>& qs);

}  // namespace i3d
