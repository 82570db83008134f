#include "i3d/datamodel.hpp"

#include "i3d/io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace i3d {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename E, size_t N>
E parse_enum(const json& j, const std::array<std::string_view, N>& names, const std::string& path) {
  if (!j.is_string()) throw SchemaError(path + ": expected a string");
  const auto s = j.get<std::string>();
  for (size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<E>(i);
  throw SchemaError(path + ": unknown value '" + s + "'");
}

constexpr std::array<std::string_view, 3> kMovableNames{"fixture", "one_hand", "two_hands"};
constexpr std::array<std::string_view, 2> kRigidityNames{"rigid", "nonrigid"};
constexpr std::array<std::string_view, 3> kArticulationNames{"rotation", "translation", "freeform"};
constexpr std::array<std::string_view, 3> kActionNames{"pull", "push", "other"};

double get_number(const json& j, const char* key, const std::string& path) {
  if (!j.contains(key)) throw SchemaError(path + "." + key + ": missing");
  const auto& v = j.at(key);
  if (!v.is_number()) throw SchemaError(path + "." + key + ": expected a number");
  return v.get<double>();
}

const json* nullable(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return nullptr;
  return &j.at(key);
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

json point_json(const QueryPoint& p) { return {{"x", p.x}, {"y", p.y}}; }

QueryPoint point_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  return {get_number(j, "x", path), get_number(j, "y", path)};
}

}  // namespace

std::string_view to_string(MovableClass v) { return kMovableNames[static_cast<size_t>(v)]; }
std::string_view to_string(RigidityClass v) { return kRigidityNames[static_cast<size_t>(v)]; }
std::string_view to_string(ArticulationClass v) { return kArticulationNames[static_cast<size_t>(v)]; }
std::string_view to_string(ActionClass v) { return kActionNames[static_cast<size_t>(v)]; }

// ---------------------------------------------------------------------------
// Mask

Mask::Mask(int width, int height, std::vector<std::uint32_t> counts)
    : width_(width), height_(height), counts_(std::move(counts)) {
  if (width < 0 || height < 0) throw SchemaError("mask: negative dimensions");
  std::uint64_t total = 0;
  for (size_t i = 0; i < counts_.size(); ++i) {
    if (i > 0 && counts_[i] == 0) throw SchemaError("mask.data[" + std::to_string(i) + "]: empty run");
    total += counts_[i];
  }
  if (total != static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height))
    throw SchemaError("mask.data: runs sum to " + std::to_string(total) + ", expected " +
                      std::to_string(static_cast<std::uint64_t>(width) * height));
}

Mask Mask::encode(const BinaryGrid& grid) {
  const int h = static_cast<int>(grid.rows());
  const int w = static_cast<int>(grid.cols());
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (int x = 0; x < w; ++x)
    for (int y = 0; y < h; ++y) {
      const std::uint8_t v = grid(y, x) ? 1 : 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  if (run > 0 || counts.empty()) counts.push_back(run);
  Mask m;
  m.width_ = w;
  m.height_ = h;
  m.counts_ = std::move(counts);
  return m;
}

BinaryGrid Mask::decode() const {
  BinaryGrid g = BinaryGrid::Zero(height_, width_);
  std::uint64_t idx = 0;
  std::uint8_t value = 0;
  for (auto run : counts_) {
    for (std::uint32_t k = 0; k < run; ++k, ++idx) {
      const auto x = static_cast<Eigen::Index>(idx / static_cast<std::uint64_t>(height_));
      const auto y = static_cast<Eigen::Index>(idx % static_cast<std::uint64_t>(height_));
      g(y, x) = value;
    }
    value ^= 1;
  }
  return g;
}

std::int64_t Mask::area() const {
  std::int64_t a = 0;
  for (size_t i = 1; i < counts_.size(); i += 2) a += counts_[i];
  return a;
}

std::optional<std::array<int, 4>> Mask::pixel_bounds() const {
  if (area() == 0) return std::nullopt;
  const BinaryGrid g = decode();
  int x0 = width_, y0 = height_, x1 = -1, y1 = -1;
  for (int y = 0; y < height_; ++y)
    for (int x = 0; x < width_; ++x)
      if (g(y, x)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  return std::array<int, 4>{x0, y0, x1 + 1, y1 + 1};
}

// ---------------------------------------------------------------------------
// Validation

void validate(const QueryAnnotation& q, const std::string& path) {
  if (!in_unit(q.point.x) || !in_unit(q.point.y))
    throw SchemaError(path + ".point: coordinates must lie in [0, 1]");
  if (q.movable == MovableClass::kFixture) {
    const char* field = q.rigidity       ? "rigidity"
                        : q.articulation ? "articulation"
                        : q.action       ? "action"
                        : q.box          ? "box"
                        : q.mask         ? "mask"
                        : q.axis         ? "axis"
                        : q.affordance   ? "affordance"
                                         : nullptr;
    if (field) throw SchemaError(path + "." + field + ": must be null for a fixture");
  }
  if (q.axis.has_value() != (q.articulation == ArticulationClass::kRotation)) {
    throw SchemaError(path + ".axis: " + (q.axis ? std::string("present but articulation is not rotation")
                                                 : std::string("missing for a rotation articulation")));
  }
  if (q.rigidity == RigidityClass::kNonrigid && q.articulation)
    throw SchemaError(path + ".articulation: must be null for a nonrigid object");
  if (q.box) {
    const auto& b = *q.box;
    if (!in_unit(b.x1) || !in_unit(b.y1) || !in_unit(b.x2) || !in_unit(b.y2))
      throw SchemaError(path + ".box: coordinates must lie in [0, 1]");
    if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw SchemaError(path + ".box: requires x1 < x2 and y1 < y2");
  }
  if (q.axis) {
    if (!(q.axis->theta >= 0.0 && q.axis->theta < std::numbers::pi))
      throw SchemaError(path + ".axis.theta: must lie in [0, pi)");
    if (!std::isfinite(q.axis->r)) throw SchemaError(path + ".axis.r: must be finite");
  }
  if (q.affordance) {
    if (q.affordance->radius_px < 1) throw SchemaError(path + ".affordance.radius_px: must be >= 1");
    if (q.affordance->keypoint && (!in_unit(q.affordance->keypoint->x) || !in_unit(q.affordance->keypoint->y)))
      throw SchemaError(path + ".affordance.keypoint: coordinates must lie in [0, 1]");
  }
}

void validate(const SceneSample& s) {
  if (s.image_id.empty()) throw SchemaError("image_id: must be non-empty");
  if (s.queries.empty() || s.queries.size() > kMaxQueries)
    throw SchemaError("queries: expected 1.." + std::to_string(kMaxQueries) + " entries, got " +
                      std::to_string(s.queries.size()));
  if (s.image.width <= 0 || s.image.height <= 0) throw SchemaError("image: empty");
  if (s.depth) {
    if (s.depth->rows() != s.image.height || s.depth->cols() != s.image.width)
      throw SchemaError("depth: shape does not match the image");
    if (!(s.depth->minCoeff() > 0.0f)) throw SchemaError("depth: values must be positive");
  }
  if (s.normals) {
    for (const auto& ch : *s.normals)
      if (ch.rows() != s.image.height || ch.cols() != s.image.width)
        throw SchemaError("normals: shape does not match the image");
  }
  for (size_t i = 0; i < s.queries.size(); ++i) {
    const std::string path = "queries[" + std::to_string(i) + "]";
    validate(s.queries[i], path);
    if (s.queries[i].mask &&
        (s.queries[i].mask->width() != s.image.width || s.queries[i].mask->height() != s.image.height))
      throw SchemaError(path + ".mask: shape does not match the image");
  }
}

bool operator==(const SceneSample& a, const SceneSample& b) {
  auto grid_eq = [](const std::optional<GridF>& x, const std::optional<GridF>& y) {
    if (x.has_value() != y.has_value()) return false;
    if (!x) return true;
    return x->rows() == y->rows() && x->cols() == y->cols() && (*x == *y).all();
  };
  if (a.normals.has_value() != b.normals.has_value()) return false;
  if (a.normals)
    for (size_t k = 0; k < 3; ++k)
      if (!grid_eq((*a.normals)[k], (*b.normals)[k])) return false;
  return a.image_id == b.image_id && a.image == b.image && grid_eq(a.depth, b.depth) && a.queries == b.queries &&
         a.source == b.source;
}

// ---------------------------------------------------------------------------
// JSON

json to_json(const QueryAnnotation& q) {
  json j;
  j["point"] = point_json(q.point);
  j["movable"] = to_string(q.movable);
  j["rigidity"] = q.rigidity ? json(to_string(*q.rigidity)) : json(nullptr);
  j["articulation"] = q.articulation ? json(to_string(*q.articulation)) : json(nullptr);
  j["action"] = q.action ? json(to_string(*q.action)) : json(nullptr);
  j["box"] = q.box ? json{{"x1", q.box->x1}, {"y1", q.box->y1}, {"x2", q.box->x2}, {"y2", q.box->y2}} : json(nullptr);
  j["mask"] = q.mask ? json{{"width", q.mask->width()}, {"height", q.mask->height()}, {"data", q.mask->counts()}}
                     : json(nullptr);
  j["axis"] = q.axis ? json{{"theta", q.axis->theta}, {"r", q.axis->r}} : json(nullptr);
  if (q.affordance) {
    j["affordance"] = {
        {"keypoint", q.affordance->keypoint ? point_json(*q.affordance->keypoint) : json(nullptr)},
        {"radius_px", q.affordance->radius_px}};
  } else {
    j["affordance"] = nullptr;
  }
  return j;
}

QueryAnnotation query_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw SchemaError(path + ": expected an object");
  QueryAnnotation q;
  if (!j.contains("point")) throw SchemaError(path + ".point: missing");
  q.point = point_from_json(j.at("point"), path + ".point");
  if (!j.contains("movable")) throw SchemaError(path + ".movable: missing");
  q.movable = parse_enum<MovableClass>(j.at("movable"), kMovableNames, path + ".movable");
  if (auto* v = nullable(j, "rigidity")) q.rigidity = parse_enum<RigidityClass>(*v, kRigidityNames, path + ".rigidity");
  if (auto* v = nullable(j, "articulation"))
    q.articulation = parse_enum<ArticulationClass>(*v, kArticulationNames, path + ".articulation");
  if (auto* v = nullable(j, "action")) q.action = parse_enum<ActionClass>(*v, kActionNames, path + ".action");
  if (auto* v = nullable(j, "box")) {
    const std::string p = path + ".box";
    q.box = BoxXYXY{get_number(*v, "x1", p), get_number(*v, "y1", p), get_number(*v, "x2", p), get_number(*v, "y2", p)};
  }
  if (auto* v = nullable(j, "mask")) {
    const std::string p = path + ".mask";
    if (!v->contains("data") || !v->at("data").is_array()) throw SchemaError(p + ".data: expected an array");
    std::vector<std::uint32_t> counts;
    for (const auto& c : v->at("data")) {
      if (!c.is_number_unsigned() && !(c.is_number_integer() && c.get<long long>() >= 0))
        throw SchemaError(p + ".data: run lengths must be non-negative integers");
      counts.push_back(c.get<std::uint32_t>());
    }
    try {
      q.mask = Mask(static_cast<int>(get_number(*v, "width", p)), static_cast<int>(get_number(*v, "height", p)),
                    std::move(counts));
    } catch (const SchemaError& e) {
      throw SchemaError(path + "." + e.what());
    }
  }
  if (auto* v = nullable(j, "axis")) q.axis = Line2D{get_number(*v, "theta", path + ".axis"), get_number(*v, "r", path + ".axis")};
  if (auto* v = nullable(j, "affordance")) {
    AffordanceTarget a;
    if (auto* k = nullable(*v, "keypoint")) a.keypoint = point_from_json(*k, path + ".affordance.keypoint");
    if (v->contains("radius_px")) {
      if (!v->at("radius_px").is_number_integer()) throw SchemaError(path + ".affordance.radius_px: expected an integer");
      a.radius_px = v->at("radius_px").get<int>();
    }
    q.affordance = a;
  }
  validate(q, path);
  return q;
}

json to_json(const SceneSample& s) {
  json j;
  j["image_id"] = s.image_id;
  j["image"] = s.image_id + ".png";
  j["width"] = s.image.width;
  j["height"] = s.image.height;
  j["depth"] = s.depth ? json(s.image_id + "_depth.npy") : json(nullptr);
  j["normals"] = s.normals ? json(s.image_id + "_normals.npy") : json(nullptr);
  j["source"] = s.source;
  j["queries"] = json::array();
  for (const auto& q : s.queries) j["queries"].push_back(to_json(q));
  return j;
}

void serialize_sample(const SceneSample& s, const fs::path& dir) {
  validate(s);
  fs::create_directories(dir);
  write_png(dir / (s.image_id + ".png"), s.image);
  if (s.depth) write_npy(dir / (s.image_id + "_depth.npy"), *s.depth);
  if (s.normals) write_npy3(dir / (s.image_id + "_normals.npy"), {(*s.normals)[0], (*s.normals)[1], (*s.normals)[2]});
  write_file_atomic(dir / (s.image_id + ".json"), to_json(s).dump(1) + "\n");
}

SceneSample deserialize_sample(const json& doc, const fs::path& dir) {
  if (!doc.is_object()) throw SchemaError("$: expected an object");
  SceneSample s;
  if (!doc.contains("image_id") || !doc.at("image_id").is_string()) throw SchemaError("image_id: missing");
  s.image_id = doc.at("image_id").get<std::string>();
  if (!doc.contains("image") || !doc.at("image").is_string()) throw SchemaError("image: missing");
  s.image = read_png(dir / doc.at("image").get<std::string>());
  if (doc.contains("width") && doc.at("width") != s.image.width) throw SchemaError("width: does not match image file");
  if (doc.contains("height") && doc.at("height") != s.image.height) throw SchemaError("height: does not match image file");
  if (auto* v = nullable(doc, "depth")) s.depth = read_npy(dir / v->get<std::string>());
  if (auto* v = nullable(doc, "normals")) {
    auto ch = read_npy3(dir / v->get<std::string>());
    if (ch.size() != 3) throw SchemaError("normals: expected 3 channels");
    s.normals = std::array<GridF, 3>{ch[0], ch[1], ch[2]};
  }
  s.source = doc.value("source", std::string());
  if (!doc.contains("queries") || !doc.at("queries").is_array()) throw SchemaError("queries: expected an array");
  const auto& qs = doc.at("queries");
  for (size_t i = 0; i < qs.size(); ++i) s.queries.push_back(query_from_json(qs[i], "queries[" + std::to_string(i) + "]"));
  validate(s);
  return s;
}

SceneSample deserialize_sample(const fs::path& json_path) {
  json doc;
  try {
    doc = json::parse(read_file(json_path));
  } catch (const json::parse_error& e) {
    throw SchemaError(json_path.string() + ": " + e.what());
  }
  return deserialize_sample(doc, json_path.parent_path());
}

std::vector<SceneSample> load_split(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<SceneSample> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(deserialize_sample(f));
  return out;
}

PaddedQueries pad_queries(const std::vector<QueryPoint>& qs) {
  if (qs.size() > kMaxQueries)
    throw std::invalid_argument("pad_queries: " + std::to_string(qs.size()) + " queries exceed the budget of " +
                                std::to_string(kMaxQueries));
  PaddedQueries out;
  out.count = static_cast<int>(qs.size());
  for (int i = 0; i < kMaxQueries; ++i) {
    const bool real = i < out.count;
    out.points[i] = real ? qs[i] : QueryPoint{0.5, 0.5};
    out.valid[i] = real;
  }
  return out;
}

}  // namespace i3d
