#pragma once

#include "i3d/datamodel.hpp"
#include "i3d/network.hpp"
#include "i3d/renderer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace i3d::service {

/// Carries the HTTP status the failure maps to.
struct ServiceError : std::runtime_error {
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status(status) {}
  int status;
};

struct Limits {
  std::size_t max_body_bytes = 16u << 20;
  int max_image_side = 4096;
};

struct PredictRequest {
  RgbImage image;
  std::vector<QueryPoint> points;
  bool include_depth = false;
};

/// Parses {"image": base64 PNG, "points": [{"x", "y"}], "include_depth"}.
/// 400 on malformed input, 413 past the limits, 422 past the query budget.
PredictRequest parse_predict_request(const nlohmann::json& body, const Limits& limits);
RgbImage decode_image(std::string_view png_bytes, const Limits& limits);
std::vector<QueryPoint> parse_points(const nlohmann::json& points);

/// Response document for one image. Probabilities are softmaxes of the
/// logits; the mask is RLE at image resolution; the affordance heatmap is
/// 8-bit, run-length coded, at mask resolution.
nlohmann::json prediction_to_json(const ImagePrediction& pred, const std::vector<QueryPoint>& points, int image_w,
                                  int image_h, bool include_depth);

/// Per-query fields that are not finite, for 500 diagnostics.
std::vector<std::string> non_finite_fields(const ImagePrediction& pred);

/// Relative depth mapped to positive units: median and median absolute
/// deviation set to the given values, floored at floor.
GridF metric_depth(const Grid& relative, double median = 3.5, double mad = 0.4, double floor = 0.1);

struct RenderRequest {
  RgbImage image;
  QueryPoint point;
  std::optional<std::vector<double>> parameters;  // radians for rotation, depth units for translation
  double vfov_deg = 60.0;
};

RenderRequest parse_render_request(const nlohmann::json& body, const Limits& limits);

struct RenderOutcome {
  InteractionPrediction prediction;
  render::ArticulationClip clip;
};

/// Predicts the query and animates it. 422 when the object is not articulated.
RenderOutcome render_query(const Network& net, const RenderRequest& req);

nlohmann::json clip_manifest(const render::ArticulationClip& clip);

/// Stateless request handling over one read-only model.
class Service {
 public:
  /// Without a checkpoint the service reports "degraded" and rejects
  /// inference with 503.
  explicit Service(std::optional<std::filesystem::path> checkpoint = std::nullopt, Limits limits = {});

  nlohmann::json health() const;
  /// Serialized PredictResponse; byte-identical for identical bodies.
  std::string predict(const std::string& body) const;
  /// Clip manifest with frame URLs; repeated requests hit the cache.
  nlohmann::json render(const std::string& body);
  /// PNG bytes of a cached frame, nullopt when unknown.
  std::optional<std::string> frame_png(const std::string& key, int index) const;

  const Limits& limits() const { return limits_; }
  bool ready() const { return net_ != nullptr; }

 private:
  struct CacheEntry {
    std::mutex writer;
    bool done = false;
    nlohmann::json manifest;
    std::vector<std::string> frames;
  };

  const Network& model() const;

  Limits limits_;
  std::unique_ptr<Network> net_;
  std::string checkpoint_id_;
  std::optional<NetworkConfig> config_;
  mutable std::mutex cache_mu_;
  std::map<std::string, std::shared_ptr<CacheEntry>> cache_;
};

/// HTTP binding for /health, /predict, /render and /render/<key>/<i>.png
/// with CORS headers.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  /// Binds and returns the port; port 0 picks a free one. Throws on failure.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace i3d::service
