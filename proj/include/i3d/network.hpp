#pragma once

#include "i3d/autograd.hpp"
#include "i3d/datamodel.hpp"
#include "i3d/grid.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace i3d {

using MatF = ag::Mat<float>;
using VarF = ag::Var<float>;
using TapeF = ag::Tape<float>;
using ParamF = ag::Param<float>;

struct NetworkConfig {
  int input_h = 192;
  int input_w = 256;
  int patch_size = 16;
  int embed_dim = 64;
  int encoder_depth = 4;
  int decoder_depth = 2;  // point decoder layers
  int num_heads = 4;
  int mask_h = 48;
  int mask_w = 64;
  int n_queries = kMaxQueries;
  int mlp_ratio = 4;
  int twoway_depth = 2;      // layers in each mask / affordance / depth decoder
  int twoway_attn_dim = 32;  // internal width of token <-> image attention
  int upscale_channels = 8;
  double pe_scale = 1.0;  // std of the Fourier frequencies
  std::uint64_t seed = 0;

  static NetworkConfig toy();
  static NetworkConfig full();

  int grid_h() const { return input_h / patch_size; }
  int grid_w() const { return input_w / patch_size; }
  int num_tokens() const { return grid_h() * grid_w(); }
  int upscale() const { return mask_h / grid_h(); }

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

enum class QueryKind { kPoint, kDepth };

/// Encoder output m: one embed_dim row per patch token, row-major over the grid.
struct EncoderMemory {
  MatF tokens;
  int grid_h = 0;
  int grid_w = 0;
};

/// Decoder input k_p / k_d.
struct QueryEmbedding {
  Eigen::RowVectorXf feature;
  QueryKind kind = QueryKind::kPoint;
};

/// Decoder output h / h_d.
struct PooledFeature {
  Eigen::RowVectorXf feature;
  QueryKind kind = QueryKind::kPoint;
};

/// Graph handles for one query slot. box is (x1, y1, x2, y2) normalized;
/// axis is (s2, c2, r); mask and affordance are (mask_h * mask_w) x 1 logits.
struct QueryOutputs {
  VarF movable, rigidity, articulation, action;
  VarF box_cxcywh, box;
  VarF axis;      // renormalized (s2, c2, r)
  VarF axis_raw;  // tanh pair before renormalization, r; training attaches here
  VarF mask, affordance;
};

struct ForwardOutputs {
  std::vector<std::optional<QueryOutputs>> queries;  // one per padded slot
  VarF depth;                                        // (mask_h * mask_w) x 1
};

class Network {
 public:
  explicit Network(const NetworkConfig& cfg);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetworkConfig& config() const;
  std::vector<ParamF*> params();
  std::vector<const ParamF*> params() const;
  size_t num_parameters() const;
  void zero_grad();

  // Stage-level API, value in and value out.

  /// Throws std::invalid_argument unless the image is input_w x input_h.
  EncoderMemory encode_image(const RgbImage& image) const;
  /// Fixed Fourier features of the point plus a learned point-type offset.
  /// Throws std::invalid_argument outside [0, 1]^2.
  QueryEmbedding encode_query_point(const QueryPoint& p) const;
  QueryEmbedding depth_query() const;
  /// Exactly n_queries POINT queries plus one DEPTH query, in any order.
  /// Queries never attend to each other.
  std::vector<PooledFeature> decode(const EncoderMemory& m, const std::vector<QueryEmbedding>& queries) const;
  InteractionPrediction predict_heads(const PooledFeature& h, const EncoderMemory& m) const;
  /// Dense depth at mask resolution, defined up to scale and shift.
  Grid predict_depth(const PooledFeature& h_d, const EncoderMemory& m) const;

  /// Full inference for 1..n_queries points; resizes the image when needed.
  ImagePrediction predict(const RgbImage& image, const std::vector<QueryPoint>& points) const;

  /// Differentiable forward. Invalid slots are skipped unless skip_invalid
  /// is false, in which case they are computed but still carry no loss.
  ForwardOutputs forward(TapeF& tape, const RgbImage& image, const PaddedQueries& queries, bool skip_invalid = true);

  static ImagePrediction to_prediction(const ForwardOutputs& out, const NetworkConfig& cfg);

  /// Named copies of every parameter, in registration order.
  std::vector<std::pair<std::string, MatF>> state() const;
  /// Throws std::invalid_argument on a missing name or shape mismatch.
  void load_state(const std::vector<std::pair<std::string, MatF>>& tensors);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "I3DCKPT1", little-endian uint64 header length, JSON header,
// then float32 tensors back to back in header order.

struct Checkpoint {
  NetworkConfig config;
  std::vector<std::pair<std::string, MatF>> tensors;  // model weights
  std::vector<std::pair<std::string, MatF>> extra;    // e.g. optimizer moments
  nlohmann::json meta = nlohmann::json::object();
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Atomic write; returns the SHA-256 of the file.
std::string write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Network network_from_checkpoint(const Checkpoint& ckpt);
Checkpoint checkpoint_of(const Network& net, nlohmann::json meta = nlohmann::json::object());

/// Fourier positional encoding rows for normalized points (x, y).
MatF fourier_encoding(const MatF& points_xy, const MatF& basis);

}  // namespace i3d
