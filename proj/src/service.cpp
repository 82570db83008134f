#include "i3d/service.hpp"

#include "i3d/geometry.hpp"
#include "i3d/io.hpp"
#include "i3d/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace i3d::service {

namespace {

template <size_t N>
std::array<double, N> softmax(const std::array<double, N>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::array<double, N> p{};
  double sum = 0.0;
  for (size_t k = 0; k < N; ++k) sum += p[k] = std::exp(z[k] - mx);
  for (auto& v : p) v /= sum;
  return p;
}

template <typename Enum, size_t N>
nlohmann::json class_json(const std::array<double, N>& logits) {
  const auto p = softmax(logits);
  nlohmann::json probs = nlohmann::json::object();
  for (size_t k = 0; k < N; ++k) probs[std::string(to_string(static_cast<Enum>(k)))] = p[k];
  const auto best = static_cast<size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  return {{"label", std::string(to_string(static_cast<Enum>(best)))}, {"probabilities", probs}};
}

template <size_t N>
size_t argmax(const std::array<double, N>& z) {
  return static_cast<size_t>(std::max_element(z.begin(), z.end()) - z.begin());
}

nlohmann::json mask_json(const Mask& m) {
  return {{"width", m.width()}, {"height", m.height()}, {"counts", m.counts()}};
}

nlohmann::json affordance_json(const Grid& logits) {
  const Grid dist = metrics::affordance_distribution(logits);
  const double peak = dist.maxCoeff();
  std::vector<int> values, runs;
  for (Eigen::Index r = 0; r < dist.rows(); ++r)
    for (Eigen::Index c = 0; c < dist.cols(); ++c) {
      const int v = peak > 0 ? static_cast<int>(std::lround(255.0 * dist(r, c) / peak)) : 0;
      if (!values.empty() && values.back() == v)
        ++runs.back();
      else {
        values.push_back(v);
        runs.push_back(1);
      }
    }
  Eigen::Index br = 0, bc = 0;
  logits.maxCoeff(&br, &bc);
  return {{"width", dist.cols()},
          {"height", dist.rows()},
          {"values", values},
          {"runs", runs},
          {"argmax",
           {{"x", (static_cast<double>(bc) + 0.5) / static_cast<double>(dist.cols())},
            {"y", (static_cast<double>(br) + 0.5) / static_cast<double>(dist.rows())}}}};
}

nlohmann::json depth_json(const Grid& d) {
  const double lo = d.minCoeff(), hi = d.maxCoeff();
  const double span = hi > lo ? hi - lo : 1.0;
  std::string bytes(static_cast<size_t>(d.size()) * 2, '\0');
  size_t k = 0;
  for (Eigen::Index r = 0; r < d.rows(); ++r)
    for (Eigen::Index c = 0; c < d.cols(); ++c) {
      const auto q = static_cast<std::uint16_t>(std::lround(65535.0 * (d(r, c) - lo) / span));
      bytes[k++] = static_cast<char>(q & 0xff);
      bytes[k++] = static_cast<char>(q >> 8);
    }
  return {{"width", d.cols()}, {"height", d.rows()}, {"min", lo},
          {"max", hi},       {"encoding", "uint16le"}, {"data", base64_encode(bytes)}};
}

Mask image_mask(const Grid& logits, int w, int h) {
  const Grid up = (logits.rows() == h && logits.cols() == w) ? logits : resize_bilinear(logits, h, w);
  return Mask::encode((up > 0.0).cast<std::uint8_t>());
}

std::string image_field(const nlohmann::json& body) {
  if (!body.contains("image") || !body.at("image").is_string())
    throw ServiceError(400, "request needs \"image\" as a base64 PNG string");
  try {
    return base64_decode(body.at("image").get<std::string>());
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("image is not valid base64: ") + e.what());
  }
}

QueryPoint parse_point(const nlohmann::json& p) {
  if (!p.is_object() || !p.contains("x") || !p.contains("y") || !p.at("x").is_number() || !p.at("y").is_number())
    throw ServiceError(400, "each point needs numeric \"x\" and \"y\"");
  const QueryPoint q{p.at("x").get<double>(), p.at("y").get<double>()};
  if (!(q.x >= 0 && q.x <= 1 && q.y >= 0 && q.y <= 1))
    throw ServiceError(400, "point coordinates must be normalized to [0, 1]");
  return q;
}

}  // namespace

RgbImage decode_image(std::string_view png_bytes, const Limits& limits) {
  RgbImage img;
  try {
    img = decode_png(png_bytes);
  } catch (const std::exception& e) {
    throw ServiceError(400, std::string("image is not a readable PNG: ") + e.what());
  }
  if (img.width > limits.max_image_side || img.height > limits.max_image_side)
    throw ServiceError(413, "image side exceeds " + std::to_string(limits.max_image_side) + " pixels");
  return img;
}

std::vector<QueryPoint> parse_points(const nlohmann::json& points) {
  if (!points.is_array()) throw ServiceError(400, "\"points\" must be an array");
  if (points.empty()) throw ServiceError(400, "at least one query point is required");
  if (points.size() > static_cast<size_t>(kMaxQueries))
    throw ServiceError(422, "at most " + std::to_string(kMaxQueries) + " query points per image");
  std::vector<QueryPoint> out;
  for (const auto& p : points) out.push_back(parse_point(p));
  return out;
}

PredictRequest parse_predict_request(const nlohmann::json& body, const Limits& limits) {
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  PredictRequest req;
  if (!body.contains("points")) throw ServiceError(400, "request needs \"points\"");
  req.points = parse_points(body.at("points"));
  req.image = decode_image(image_field(body), limits);
  if (body.contains("include_depth")) {
    if (!body.at("include_depth").is_boolean()) throw ServiceError(400, "\"include_depth\" must be a boolean");
    req.include_depth = body.at("include_depth").get<bool>();
  }
  return req;
}

nlohmann::json prediction_to_json(const ImagePrediction& pred, const std::vector<QueryPoint>& points, int image_w,
                                  int image_h, bool include_depth) {
  nlohmann::json out;
  out["image"] = {{"width", image_w}, {"height", image_h}};
  nlohmann::json list = nlohmann::json::array();
  for (size_t i = 0; i < pred.queries.size(); ++i) {
    const auto& q = pred.queries[i];
    nlohmann::json j;
    j["point"] = {{"x", points[i].x}, {"y", points[i].y}};
    j["movable"] = class_json<MovableClass>(q.movable_logits);
    j["rigidity"] = class_json<RigidityClass>(q.rigidity_logits);
    j["articulation"] = class_json<ArticulationClass>(q.articulation_logits);
    j["action"] = class_json<ActionClass>(q.action_logits);
    j["box"] = {{"x1", q.box.x1}, {"y1", q.box.y1}, {"x2", q.box.x2}, {"y2", q.box.y2}};
    j["axis"] = nullptr;
    if (argmax(q.articulation_logits) == static_cast<size_t>(ArticulationClass::kRotation)) {
      try {
        const Line2D l = decode_axis(q.axis_enc);
        j["axis"] = {{"theta", l.theta}, {"r", l.r}};
      } catch (const GeometryError&) {
      }
    }
    j["mask"] = mask_json(image_mask(q.mask_logits, image_w, image_h));
    j["affordance"] = affordance_json(q.affordance_logits);
    list.push_back(std::move(j));
  }
  out["points"] = std::move(list);
  out["depth"] = include_depth && pred.depth.size() > 0 ? depth_json(pred.depth) : nlohmann::json(nullptr);
  return out;
}

std::vector<std::string> non_finite_fields(const ImagePrediction& pred) {
  std::vector<std::string> bad;
  auto arr_ok = [](const auto& a) { return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); }); };
  for (size_t i = 0; i < pred.queries.size(); ++i) {
    const auto& q = pred.queries[i];
    const std::string p = "points[" + std::to_string(i) + "].";
    if (!arr_ok(q.movable_logits)) bad.push_back(p + "movable");
    if (!arr_ok(q.rigidity_logits)) bad.push_back(p + "rigidity");
    if (!arr_ok(q.articulation_logits)) bad.push_back(p + "articulation");
    if (!arr_ok(q.action_logits)) bad.push_back(p + "action");
    if (!arr_ok(std::array<double, 4>{q.box.x1, q.box.y1, q.box.x2, q.box.y2})) bad.push_back(p + "box");
    if (!arr_ok(std::array<double, 3>{q.axis_enc.s2, q.axis_enc.c2, q.axis_enc.r})) bad.push_back(p + "axis");
    if (!q.mask_logits.allFinite()) bad.push_back(p + "mask");
    if (!q.affordance_logits.allFinite()) bad.push_back(p + "affordance");
  }
  if (!pred.depth.allFinite()) bad.push_back("depth");
  return bad;
}

GridF metric_depth(const Grid& relative, double median, double mad, double floor) {
  std::vector<double> v(relative.data(), relative.data() + relative.size());
  auto med_of = [](std::vector<double> x) {
    std::nth_element(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2), x.end());
    return x[x.size() / 2];
  };
  const double m = med_of(v);
  for (auto& x : v) x = std::abs(x - m);
  const double s = std::max(med_of(v), 1e-9);
  return ((relative - m) / s * mad + median).max(floor).cast<float>();
}

RenderRequest parse_render_request(const nlohmann::json& body, const Limits& limits) {
  if (!body.is_object()) throw ServiceError(400, "request body must be a JSON object");
  RenderRequest req;
  if (!body.contains("point")) throw ServiceError(400, "request needs \"point\"");
  req.point = parse_point(body.at("point"));
  req.image = decode_image(image_field(body), limits);
  if (body.contains("parameters")) {
    const auto& p = body.at("parameters");
    if (!p.is_array() || p.empty()) throw ServiceError(400, "\"parameters\" must be a non-empty array");
    std::vector<double> vals;
    for (const auto& v : p) {
      if (!v.is_number()) throw ServiceError(400, "\"parameters\" must hold numbers");
      vals.push_back(v.get<double>());
    }
    req.parameters = vals;
  }
  if (body.contains("vfov_deg")) {
    if (!body.at("vfov_deg").is_number()) throw ServiceError(400, "\"vfov_deg\" must be a number");
    req.vfov_deg = body.at("vfov_deg").get<double>();
    if (!(req.vfov_deg > 1 && req.vfov_deg < 179)) throw ServiceError(400, "\"vfov_deg\" must lie in (1, 179)");
  }
  return req;
}

RenderOutcome render_query(const Network& net, const RenderRequest& req) {
  const ImagePrediction pred = net.predict(req.image, {req.point});
  RenderOutcome out;
  out.prediction = pred.queries.at(0);
  const auto& q = out.prediction;
  if (argmax(q.movable_logits) == static_cast<size_t>(MovableClass::kFixture))
    throw ServiceError(422, "the queried object is predicted to be a fixture");
  const auto art = static_cast<ArticulationClass>(argmax(q.articulation_logits));
  if (art == ArticulationClass::kFreeform) throw ServiceError(422, "only articulated objects are animated");
  const int w = req.image.width, h = req.image.height;
  const Mask mask = image_mask(q.mask_logits, w, h);
  if (mask.area() < 4) throw ServiceError(422, "predicted mask is empty");
  const GridF depth = metric_depth(pred.depth);
  const CameraModel cam = CameraModel::from_vertical_fov(w, h, req.vfov_deg);
  try {
    if (art == ArticulationClass::kRotation)
      out.clip = render::render_rotation(req.image, mask, decode_axis(q.axis_enc), depth, cam,
                                         req.parameters.value_or(render::default_angles()));
    else
      out.clip = render::render_translation(req.image, mask, depth, cam,
                                            req.parameters.value_or(render::default_offsets()));
  } catch (const GeometryError& e) {
    throw ServiceError(422, std::string("cannot render the interaction: ") + e.what());
  }
  return out;
}

nlohmann::json clip_manifest(const render::ArticulationClip& clip) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(clip.kind));
  nlohmann::json frames = nlohmann::json::array();
  for (size_t i = 0; i < clip.frames.size(); ++i) {
    const auto& f = clip.frames[i];
    const Eigen::Matrix<double, 3, 3, Eigen::RowMajor> rm = f.homography.H;
    const std::vector<double> h(rm.data(), rm.data() + 9);
    frames.push_back({{"index", i}, {"parameter", f.parameter}, {"homography", h}});
  }
  j["frames"] = frames;
  if (clip.axis)
    j["axis"] = {{"origin", {clip.axis->origin.x(), clip.axis->origin.y(), clip.axis->origin.z()}},
                 {"direction", {clip.axis->direction.x(), clip.axis->direction.y(), clip.axis->direction.z()}}};
  else
    j["axis"] = nullptr;
  if (clip.kind == ArticulationClass::kTranslation)
    j["direction"] = {clip.direction.x(), clip.direction.y(), clip.direction.z()};
  else
    j["direction"] = nullptr;
  return j;
}

// ---------------------------------------------------------------------------

Service::Service(std::optional<std::filesystem::path> checkpoint, Limits limits) : limits_(limits) {
  if (!checkpoint) return;
  const std::string bytes = read_file(*checkpoint);
  checkpoint_id_ = sha256_hex(bytes);
  net_ = std::make_unique<Network>(network_from_checkpoint(read_checkpoint(*checkpoint)));
  config_ = net_->config();
}

nlohmann::json Service::health() const {
  nlohmann::json j;
  j["status"] = net_ ? "ok" : "degraded";
  j["checkpoint_id"] = net_ ? nlohmann::json(checkpoint_id_) : nlohmann::json(nullptr);
  j["config"] = config_ ? nlohmann::json(*config_) : nlohmann::json(nullptr);
  return j;
}

const Network& Service::model() const {
  if (!net_) throw ServiceError(503, "no checkpoint loaded");
  return *net_;
}

namespace {

nlohmann::json parse_body(const std::string& body, const Limits& limits) {
  if (body.size() > limits.max_body_bytes) throw ServiceError(413, "request body too large");
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ServiceError(400, std::string("malformed JSON: ") + e.what());
  }
}

}  // namespace

std::string Service::predict(const std::string& body) const {
  const PredictRequest req = parse_predict_request(parse_body(body, limits_), limits_);
  const Network& net = model();
  ImagePrediction pred;
  try {
    pred = net.predict(req.image, req.points);
  } catch (const std::exception& e) {
    throw ServiceError(500, std::string("inference failed: ") + e.what());
  }
  if (const auto bad = non_finite_fields(pred); !bad.empty()) {
    std::string msg = "inference produced non-finite values in:";
    for (const auto& b : bad) msg += " " + b;
    throw ServiceError(500, msg);
  }
  nlohmann::json out = prediction_to_json(pred, req.points, req.image.width, req.image.height, req.include_depth);
  out["checkpoint_id"] = checkpoint_id_;
  return out.dump();
}

nlohmann::json Service::render(const std::string& body) {
  const RenderRequest req = parse_render_request(parse_body(body, limits_), limits_);
  const Network& net = model();
  nlohmann::json canonical = {{"checkpoint", checkpoint_id_},
                              {"image", sha256_hex(std::string_view(reinterpret_cast<const char*>(req.image.pixels.data()),
                                                                    req.image.pixels.size()))},
                              {"width", req.image.width},
                              {"height", req.image.height},
                              {"point", {req.point.x, req.point.y}},
                              {"vfov_deg", req.vfov_deg}};
  canonical["parameters"] = req.parameters ? nlohmann::json(*req.parameters) : nlohmann::json(nullptr);
  const std::string key = sha256_hex(canonical.dump());

  std::shared_ptr<CacheEntry> entry;
  {
    std::lock_guard<std::mutex> lock(cache_mu_);
    auto& slot = cache_[key];
    if (!slot) slot = std::make_shared<CacheEntry>();
    entry = slot;
  }
  std::lock_guard<std::mutex> lock(entry->writer);
  if (entry->done) {
    nlohmann::json m = entry->manifest;
    m["cached"] = true;
    return m;
  }
  const RenderOutcome outcome = render_query(net, req);
  nlohmann::json m = clip_manifest(outcome.clip);
  m["key"] = key;
  for (size_t i = 0; i < outcome.clip.frames.size(); ++i) {
    entry->frames.push_back(encode_png(render::composite(req.image, outcome.clip.frames[i])));
    m["frames"][i]["url"] = "/render/" + key + "/" + std::to_string(i) + ".png";
  }
  entry->manifest = m;
  entry->done = true;
  m["cached"] = false;
  return m;
}

std::optional<std::string> Service::frame_png(const std::string& key, int index) const {
  std::shared_ptr<CacheEntry> entry;
  {
    std::lock_guard<std::mutex> lock(cache_mu_);
    const auto it = cache_.find(key);
    if (it == cache_.end()) return std::nullopt;
    entry = it->second;
  }
  std::lock_guard<std::mutex> lock(entry->writer);
  if (!entry->done || index < 0 || static_cast<size_t>(index) >= entry->frames.size()) return std::nullopt;
  return entry->frames[static_cast<size_t>(index)];
}

}  // namespace i3d::service
