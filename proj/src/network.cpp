#include "i3d/network.hpp"

#include "i3d/io.hpp"
#include "i3d/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <numbers>
#include <stdexcept>
#include <unordered_map>

namespace i3d {

NetworkConfig NetworkConfig::toy() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::full() {
  NetworkConfig c;
  c.input_h = 768;
  c.input_w = 1024;
  c.embed_dim = 256;
  c.encoder_depth = 12;
  c.num_heads = 8;
  c.mask_h = 192;
  c.mask_w = 256;
  c.twoway_attn_dim = 128;
  c.upscale_channels = 32;
  return c;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("NetworkConfig: " + m); };
  if (input_h <= 0 || input_w <= 0 || patch_size <= 0) fail("sizes must be positive");
  if (input_h % patch_size != 0 || input_w % patch_size != 0) fail("input must be divisible by patch_size");
  if (n_queries != kMaxQueries) fail("n_queries must be " + std::to_string(kMaxQueries));
  if (embed_dim <= 0 || embed_dim % 2 != 0) fail("embed_dim must be positive and even");
  if (num_heads <= 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (twoway_attn_dim <= 0 || twoway_attn_dim % num_heads != 0) fail("twoway_attn_dim must be divisible by num_heads");
  if (encoder_depth < 1 || decoder_depth < 1 || twoway_depth < 1) fail("depths must be >= 1");
  if (mlp_ratio < 1 || upscale_channels < 1) fail("mlp_ratio and upscale_channels must be >= 1");
  if (mask_h % grid_h() != 0 || mask_w % grid_w() != 0 || mask_h / grid_h() != mask_w / grid_w())
    fail("mask_res must be the token grid times one integer factor");
  if (!(pe_scale > 0)) fail("pe_scale must be positive");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"input_h", c.input_h},
       {"input_w", c.input_w},
       {"patch_size", c.patch_size},
       {"embed_dim", c.embed_dim},
       {"encoder_depth", c.encoder_depth},
       {"decoder_depth", c.decoder_depth},
       {"num_heads", c.num_heads},
       {"mask_h", c.mask_h},
       {"mask_w", c.mask_w},
       {"n_queries", c.n_queries},
       {"mlp_ratio", c.mlp_ratio},
       {"twoway_depth", c.twoway_depth},
       {"twoway_attn_dim", c.twoway_attn_dim},
       {"upscale_channels", c.upscale_channels},
       {"pe_scale", c.pe_scale},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.input_h = j.value("input_h", d.input_h);
  c.input_w = j.value("input_w", d.input_w);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.encoder_depth = j.value("encoder_depth", d.encoder_depth);
  c.decoder_depth = j.value("decoder_depth", d.decoder_depth);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mask_h = j.value("mask_h", d.mask_h);
  c.mask_w = j.value("mask_w", d.mask_w);
  c.n_queries = j.value("n_queries", d.n_queries);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.twoway_depth = j.value("twoway_depth", d.twoway_depth);
  c.twoway_attn_dim = j.value("twoway_attn_dim", d.twoway_attn_dim);
  c.upscale_channels = j.value("upscale_channels", d.upscale_channels);
  c.pe_scale = j.value("pe_scale", d.pe_scale);
  c.seed = j.value("seed", d.seed);
  c.validate();
}

MatF fourier_encoding(const MatF& points_xy, const MatF& basis) {
  // Coordinates go to [-1, 1] before projection.
  const MatF proj = (2.0f * points_xy.array() - 1.0f).matrix() * basis * static_cast<float>(2.0 * std::numbers::pi);
  MatF out(points_xy.rows(), 2 * basis.cols());
  out.leftCols(basis.cols()) = proj.array().sin().matrix();
  out.rightCols(basis.cols()) = proj.array().cos().matrix();
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct LinearP {
  ParamF* w = nullptr;
  ParamF* b = nullptr;
};
struct NormP {
  ParamF* g = nullptr;
  ParamF* b = nullptr;
};
struct AttnP {
  LinearP q, k, v, o;
  int heads = 1;
};
struct MlpP {
  std::vector<LinearP> layers;
};
struct EncBlock {
  NormP ln1;
  AttnP attn;
  NormP ln2;
  MlpP mlp;
};
struct PointLayer {
  NormP ln1;
  AttnP cross;
  NormP ln2;
  MlpP mlp;
};
struct TwoWayLayer {
  AttnP self;
  NormP ln1;
  AttnP t2i;
  NormP ln2;
  MlpP mlp;
  NormP ln3;
  AttnP i2t;
  NormP ln4;
};
struct TwoWayP {
  ParamF* out_token = nullptr;
  std::vector<TwoWayLayer> layers;
  AttnP final_t2i;
  NormP ln_final;
  LinearP upscale;
  MlpP hyper;
};

struct KV {
  VarF k, v;
};

struct Ctx {
  TapeF& tape;
  bool train;
  std::unordered_map<const ParamF*, VarF> cache;
  std::optional<VarF> dense_pe;

  VarF p(const ParamF* param) {
    auto it = cache.find(param);
    if (it != cache.end()) return it->second;
    // Parameters are owned non-const by the network; the cast only lets the
    // tape accumulate into Param::grad during training.
    VarF v = train ? tape.param(const_cast<ParamF&>(*param)) : tape.constant(param->value);
    cache.emplace(param, v);
    return v;
  }
};

VarF lin(Ctx& c, const LinearP& l, const VarF& x) { return ag::linear(x, c.p(l.w), c.p(l.b)); }
VarF norm(Ctx& c, const NormP& n, const VarF& x) { return ag::layer_norm(x, c.p(n.g), c.p(n.b)); }

KV project_kv(Ctx& c, const AttnP& a, const VarF& keys, const VarF& values) {
  return {lin(c, a.k, keys), lin(c, a.v, values)};
}

VarF attend(Ctx& c, const AttnP& a, const VarF& queries, const KV& kv) {
  return lin(c, a.o, ag::attention(lin(c, a.q, queries), kv.k, kv.v, a.heads));
}

VarF run_mlp(Ctx& c, const MlpP& m, VarF x, bool use_gelu) {
  for (size_t i = 0; i < m.layers.size(); ++i) {
    x = lin(c, m.layers[i], x);
    if (i + 1 < m.layers.size()) x = use_gelu ? ag::gelu(x) : ag::relu(x);
  }
  return x;
}

InteractionPrediction to_interaction(const QueryOutputs& q, int mask_h, int mask_w) {
  InteractionPrediction p;
  auto copy = [](const VarF& v, auto& arr) {
    for (size_t k = 0; k < arr.size(); ++k) arr[k] = v.value()(0, static_cast<Eigen::Index>(k));
  };
  copy(q.movable, p.movable_logits);
  copy(q.rigidity, p.rigidity_logits);
  copy(q.articulation, p.articulation_logits);
  copy(q.action, p.action_logits);
  const auto& b = q.box.value();
  p.box = BoxXYXY{b(0, 0), b(0, 1), b(0, 2), b(0, 3)};
  const auto& a = q.axis.value();
  p.axis_enc = AxisEncoding{a(0, 0), a(0, 1), a(0, 2)};
  p.mask_logits = Eigen::Map<const MatF>(q.mask.value().data(), mask_h, mask_w).cast<double>().array();
  p.affordance_logits = Eigen::Map<const MatF>(q.affordance.value().data(), mask_h, mask_w).cast<double>().array();
  return p;
}

}  // namespace

struct Network::Impl {
  NetworkConfig cfg;
  std::deque<ParamF> store;
  Rng rng;
  MatF pe_basis;  // 2 x embed_dim / 2
  MatF dense_pe;  // num_tokens x embed_dim

  LinearP patch;
  std::vector<EncBlock> encoder;
  NormP encoder_norm;
  ParamF* point_embed = nullptr;
  ParamF* depth_query = nullptr;
  std::vector<PointLayer> point_decoder;
  NormP point_norm;
  TwoWayP mask_dec, affordance_dec, depth_dec;
  LinearP movable, rigidity, articulation, action;
  MlpP box_mlp, axis_mlp;

  explicit Impl(const NetworkConfig& c) : cfg(c), rng(derive_seed(c.seed, 1)) {
    cfg.validate();
    Rng pe_rng(derive_seed(cfg.seed, 0));
    pe_basis.resize(2, cfg.embed_dim / 2);
    for (Eigen::Index i = 0; i < pe_basis.size(); ++i)
      pe_basis.data()[i] = static_cast<float>(pe_rng.normal() * cfg.pe_scale);
    MatF centers(cfg.num_tokens(), 2);
    for (int y = 0; y < cfg.grid_h(); ++y)
      for (int x = 0; x < cfg.grid_w(); ++x) {
        centers(y * cfg.grid_w() + x, 0) = (x + 0.5f) / static_cast<float>(cfg.grid_w());
        centers(y * cfg.grid_w() + x, 1) = (y + 0.5f) / static_cast<float>(cfg.grid_h());
      }
    dense_pe = fourier_encoding(centers, pe_basis);
    build();
  }

  ParamF* add(const std::string& name, int rows, int cols) {
    store.push_back(ParamF{name, MatF::Zero(rows, cols), MatF()});
    return &store.back();
  }
  LinearP linear(const std::string& name, int in, int out) {
    LinearP l{add(name + ".w", in, out), add(name + ".b", 1, out)};
    const double a = std::sqrt(6.0 / (in + out));
    for (Eigen::Index i = 0; i < l.w->value.size(); ++i) l.w->value.data()[i] = static_cast<float>(rng.uniform(-a, a));
    return l;
  }
  NormP layer_norm(const std::string& name, int dim) {
    NormP n{add(name + ".g", 1, dim), add(name + ".b", 1, dim)};
    n.g->value.setOnes();
    return n;
  }
  ParamF* embedding(const std::string& name, int dim) {
    ParamF* p = add(name, 1, dim);
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<float>(rng.normal());
    return p;
  }
  AttnP attention(const std::string& name, int dim, int inner) {
    return AttnP{linear(name + ".q", dim, inner), linear(name + ".k", dim, inner), linear(name + ".v", dim, inner),
                 linear(name + ".o", inner, dim), cfg.num_heads};
  }
  MlpP mlp(const std::string& name, const std::vector<int>& dims) {
    MlpP m;
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      m.layers.push_back(linear(name + "." + std::to_string(i), dims[i], dims[i + 1]));
    return m;
  }
  TwoWayP twoway(const std::string& name) {
    const int d = cfg.embed_dim, a = cfg.twoway_attn_dim;
    const int r = cfg.upscale();
    TwoWayP t;
    t.out_token = embedding(name + ".out_token", d);
    for (int i = 0; i < cfg.twoway_depth; ++i) {
      const std::string p = name + ".layer" + std::to_string(i);
      t.layers.push_back(TwoWayLayer{attention(p + ".self", d, d), layer_norm(p + ".ln1", d),
                                     attention(p + ".t2i", d, a), layer_norm(p + ".ln2", d),
                                     mlp(p + ".mlp", {d, 2 * d, d}), layer_norm(p + ".ln3", d),
                                     attention(p + ".i2t", d, a), layer_norm(p + ".ln4", d)});
    }
    t.final_t2i = attention(name + ".final_t2i", d, a);
    t.ln_final = layer_norm(name + ".ln_final", d);
    t.upscale = linear(name + ".upscale", d, cfg.upscale_channels * r * r);
    t.hyper = mlp(name + ".hyper", {d, d, cfg.upscale_channels});
    return t;
  }

  void build() {
    const int d = cfg.embed_dim;
    patch = linear("encoder.patch", 3 * cfg.patch_size * cfg.patch_size, d);
    for (int i = 0; i < cfg.encoder_depth; ++i) {
      const std::string p = "encoder.block" + std::to_string(i);
      encoder.push_back(EncBlock{layer_norm(p + ".ln1", d), attention(p + ".attn", d, d), layer_norm(p + ".ln2", d),
                                 mlp(p + ".mlp", {d, cfg.mlp_ratio * d, d})});
    }
    encoder_norm = layer_norm("encoder.norm", d);
    point_embed = embedding("decoder.point_embed", d);
    depth_query = embedding("decoder.depth_query", d);
    for (int i = 0; i < cfg.decoder_depth; ++i) {
      const std::string p = "decoder.layer" + std::to_string(i);
      point_decoder.push_back(PointLayer{layer_norm(p + ".ln1", d), attention(p + ".cross", d, d),
                                         layer_norm(p + ".ln2", d), mlp(p + ".mlp", {d, cfg.mlp_ratio * d, d})});
    }
    point_norm = layer_norm("decoder.norm", d);
    mask_dec = twoway("mask_decoder");
    affordance_dec = twoway("affordance_decoder");
    depth_dec = twoway("depth_decoder");
    movable = linear("head.movable", d, kNumMovable);
    rigidity = linear("head.rigidity", d, kNumRigidity);
    articulation = linear("head.articulation", d, kNumArticulation);
    action = linear("head.action", d, kNumAction);
    box_mlp = mlp("head.box", {d, d, d, 4});
    axis_mlp = mlp("head.axis", {d, d, d, 3});
  }

  // -------------------------------------------------------------------------

  VarF pe_var(Ctx& c) const {
    if (!c.dense_pe) c.dense_pe = c.tape.constant(dense_pe);
    return *c.dense_pe;
  }

  MatF patchify(const RgbImage& img) const {
    if (img.width != cfg.input_w || img.height != cfg.input_h)
      throw std::invalid_argument("encode_image: expected " + std::to_string(cfg.input_w) + "x" +
                                  std::to_string(cfg.input_h) + " image, got " + std::to_string(img.width) + "x" +
                                  std::to_string(img.height));
    const int p = cfg.patch_size;
    MatF out(cfg.num_tokens(), 3 * p * p);
    for (int gy = 0; gy < cfg.grid_h(); ++gy)
      for (int gx = 0; gx < cfg.grid_w(); ++gx) {
        const int row = gy * cfg.grid_w() + gx;
        int col = 0;
        for (int ch = 0; ch < 3; ++ch)
          for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
              out(row, col++) = (img.at(gx * p + x, gy * p + y, ch) / 255.0f - 0.5f) / 0.25f;
      }
    return out;
  }

  VarF encode(Ctx& c, const RgbImage& img) const {
    VarF x = ag::add(lin(c, patch, c.tape.constant(patchify(img))), pe_var(c));
    for (const auto& b : encoder) {
      VarF y = norm(c, b.ln1, x);
      x = ag::add(x, attend(c, b.attn, y, project_kv(c, b.attn, y, y)));
      x = ag::add(x, run_mlp(c, b.mlp, norm(c, b.ln2, x), true));
    }
    return norm(c, encoder_norm, x);
  }

  MatF point_features(const std::vector<QueryPoint>& pts) const {
    MatF xy(static_cast<Eigen::Index>(pts.size()), 2);
    for (size_t i = 0; i < pts.size(); ++i) {
      const auto& p = pts[i];
      if (!(p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1))
        throw std::invalid_argument("query point outside [0, 1]^2");
      xy(static_cast<Eigen::Index>(i), 0) = static_cast<float>(p.x);
      xy(static_cast<Eigen::Index>(i), 1) = static_cast<float>(p.y);
    }
    return fourier_encoding(xy, pe_basis);
  }

  /// q0: one row per query. Rows never mix.
  VarF point_decode(Ctx& c, const VarF& memory, const VarF& q0) const {
    const VarF keys = ag::add(memory, pe_var(c));
    VarF x = q0;
    for (const auto& l : point_decoder) {
      const VarF y = ag::add(norm(c, l.ln1, x), q0);
      x = ag::add(x, attend(c, l.cross, y, project_kv(c, l.cross, keys, memory)));
      x = ag::add(x, run_mlp(c, l.mlp, norm(c, l.ln2, x), true));
    }
    return norm(c, point_norm, x);
  }

  struct Shared {
    VarF keys;  // memory + dense PE
    KV first;   // layer-0 token->image projections, identical for every query
  };

  Shared twoway_shared(Ctx& c, const TwoWayP& t, const VarF& memory) const {
    const VarF keys = ag::add(memory, pe_var(c));
    return {keys, project_kv(c, t.layers.front().t2i, keys, memory)};
  }

  std::pair<VarF, VarF> twoway(Ctx& c, const TwoWayP& t, const VarF& memory, const Shared& sh, const VarF& h) const {
    const VarF kpe = pe_var(c);
    const VarF qpe = ag::concat_rows<float>({c.p(t.out_token), h});
    VarF q = qpe;
    VarF k = memory;
    for (size_t i = 0; i < t.layers.size(); ++i) {
      const auto& l = t.layers[i];
      VarF qq = ag::add(q, qpe);
      q = norm(c, l.ln1, ag::add(q, attend(c, l.self, qq, project_kv(c, l.self, qq, q))));
      qq = ag::add(q, qpe);
      const KV kv = i == 0 ? sh.first : project_kv(c, l.t2i, ag::add(k, kpe), k);
      q = norm(c, l.ln2, ag::add(q, attend(c, l.t2i, qq, kv)));
      q = norm(c, l.ln3, ag::add(q, run_mlp(c, l.mlp, q, false)));
      qq = ag::add(q, qpe);
      k = norm(c, l.ln4, ag::add(k, attend(c, l.i2t, ag::add(k, kpe), project_kv(c, l.i2t, qq, q))));
    }
    const KV kv = project_kv(c, t.final_t2i, ag::add(k, kpe), k);
    q = norm(c, t.ln_final, ag::add(q, attend(c, t.final_t2i, ag::add(q, qpe), kv)));
    const VarF token = ag::slice_rows(q, 0, 1);
    const VarF up = ag::gelu(ag::pixel_shuffle(lin(c, t.upscale, k), cfg.grid_h(), cfg.grid_w(), cfg.upscale()));
    const VarF w = run_mlp(c, t.hyper, token, false);
    return {token, ag::matmul_nt(up, w)};
  }

  QueryOutputs heads(Ctx& c, const VarF& token) const {
    QueryOutputs o;
    o.movable = lin(c, movable, token);
    o.rigidity = lin(c, rigidity, token);
    o.articulation = lin(c, articulation, token);
    o.action = lin(c, action, token);
    o.box_cxcywh = ag::sigmoid(run_mlp(c, box_mlp, token, false));
    MatF to_xyxy(4, 4);
    to_xyxy << 1, 0, 1, 0,  //
        0, 1, 0, 1,         //
        -0.5f, 0, 0.5f, 0,  //
        0, -0.5f, 0, 0.5f;
    o.box = ag::matmul(o.box_cxcywh, c.tape.constant(to_xyxy));
    const VarF axis_pre = run_mlp(c, axis_mlp, token, false);
    o.axis = ag::axis_activation(axis_pre);
    o.axis_raw = ag::axis_tanh(axis_pre);
    return o;
  }

  QueryOutputs point_outputs(Ctx& c, const VarF& memory, const Shared& mask_sh, const Shared& aff_sh,
                             const VarF& h) const {
    auto [token, mask_logits] = twoway(c, mask_dec, memory, mask_sh, h);
    QueryOutputs o = heads(c, token);
    o.mask = mask_logits;
    o.affordance = twoway(c, affordance_dec, memory, aff_sh, h).second;
    return o;
  }

  ForwardOutputs run(Ctx& c, const RgbImage& img, const PaddedQueries& pq, bool skip_invalid) const {
    ForwardOutputs out;
    out.queries.resize(static_cast<size_t>(cfg.n_queries));
    const VarF memory = encode(c, img);
    std::vector<int> slots;
    std::vector<QueryPoint> pts;
    for (int i = 0; i < cfg.n_queries; ++i)
      if (pq.valid[static_cast<size_t>(i)] || !skip_invalid) {
        slots.push_back(i);
        pts.push_back(pq.points[static_cast<size_t>(i)]);
      }
    std::vector<VarF> rows;
    if (!pts.empty()) rows.push_back(ag::add_row(c.tape.constant(point_features(pts)), c.p(point_embed)));
    rows.push_back(c.p(depth_query));
    const VarF h = point_decode(c, memory, ag::concat_rows(rows));
    if (!slots.empty()) {
      const Shared mask_sh = twoway_shared(c, mask_dec, memory);
      const Shared aff_sh = twoway_shared(c, affordance_dec, memory);
      for (size_t j = 0; j < slots.size(); ++j)
        out.queries[static_cast<size_t>(slots[j])] =
            point_outputs(c, memory, mask_sh, aff_sh, ag::slice_rows(h, static_cast<Eigen::Index>(j), 1));
    }
    const Shared depth_sh = twoway_shared(c, depth_dec, memory);
    out.depth = twoway(c, depth_dec, memory, depth_sh, ag::slice_rows(h, static_cast<Eigen::Index>(slots.size()), 1)).second;
    return out;
  }
};

Network::Network(const NetworkConfig& cfg) : impl_(std::make_unique<Impl>(cfg)) {}
Network::~Network() = default;
Network::Network(Network&&) noexcept = default;
Network& Network::operator=(Network&&) noexcept = default;

const NetworkConfig& Network::config() const { return impl_->cfg; }

std::vector<ParamF*> Network::params() {
  std::vector<ParamF*> out;
  for (auto& p : impl_->store) out.push_back(&p);
  return out;
}

std::vector<const ParamF*> Network::params() const {
  std::vector<const ParamF*> out;
  for (const auto& p : impl_->store) out.push_back(&p);
  return out;
}

size_t Network::num_parameters() const {
  size_t n = 0;
  for (const auto& p : impl_->store) n += static_cast<size_t>(p.value.size());
  return n;
}

void Network::zero_grad() {
  for (auto& p : impl_->store) p.zero_grad();
}

EncoderMemory Network::encode_image(const RgbImage& image) const {
  TapeF tape;
  Ctx c{tape, false, {}, {}};
  return {impl_->encode(c, image).value(), impl_->cfg.grid_h(), impl_->cfg.grid_w()};
}

QueryEmbedding Network::encode_query_point(const QueryPoint& p) const {
  const MatF f = impl_->point_features({p});
  return {(f + impl_->point_embed->value).row(0), QueryKind::kPoint};
}

QueryEmbedding Network::depth_query() const { return {impl_->depth_query->value.row(0), QueryKind::kDepth}; }

std::vector<PooledFeature> Network::decode(const EncoderMemory& m, const std::vector<QueryEmbedding>& queries) const {
  const auto& cfg = impl_->cfg;
  if (queries.size() != static_cast<size_t>(cfg.n_queries) + 1)
    throw std::invalid_argument("decode: expected " + std::to_string(cfg.n_queries + 1) + " queries");
  int depth_count = 0;
  MatF q0(static_cast<Eigen::Index>(queries.size()), cfg.embed_dim);
  for (size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].feature.size() != cfg.embed_dim) throw std::invalid_argument("decode: query width mismatch");
    q0.row(static_cast<Eigen::Index>(i)) = queries[i].feature;
    depth_count += queries[i].kind == QueryKind::kDepth;
  }
  if (depth_count != 1) throw std::invalid_argument("decode: expected exactly one depth query");
  if (m.tokens.rows() != cfg.num_tokens() || m.tokens.cols() != cfg.embed_dim)
    throw std::invalid_argument("decode: memory shape mismatch");
  TapeF tape;
  Ctx c{tape, false, {}, {}};
  const MatF h = impl_->point_decode(c, tape.constant(m.tokens), tape.constant(q0)).value();
  std::vector<PooledFeature> out;
  for (size_t i = 0; i < queries.size(); ++i) out.push_back({h.row(static_cast<Eigen::Index>(i)), queries[i].kind});
  return out;
}

namespace {

// Inference boxes are clipped to the image; training sees the raw corners.
void clip_box(BoxXYXY& b) {
  b.x1 = std::clamp(b.x1, 0.0, 1.0);
  b.y1 = std::clamp(b.y1, 0.0, 1.0);
  b.x2 = std::clamp(b.x2, 0.0, 1.0);
  b.y2 = std::clamp(b.y2, 0.0, 1.0);
}

}  // namespace

InteractionPrediction Network::predict_heads(const PooledFeature& h, const EncoderMemory& m) const {
  if (h.kind != QueryKind::kPoint) throw std::invalid_argument("predict_heads: expects a point feature");
  TapeF tape;
  Ctx c{tape, false, {}, {}};
  const VarF memory = tape.constant(m.tokens);
  const VarF hv = tape.constant(MatF(h.feature));
  const auto mask_sh = impl_->twoway_shared(c, impl_->mask_dec, memory);
  const auto aff_sh = impl_->twoway_shared(c, impl_->affordance_dec, memory);
  auto p = to_interaction(impl_->point_outputs(c, memory, mask_sh, aff_sh, hv), impl_->cfg.mask_h, impl_->cfg.mask_w);
  clip_box(p.box);
  return p;
}

Grid Network::predict_depth(const PooledFeature& h_d, const EncoderMemory& m) const {
  if (h_d.kind != QueryKind::kDepth) throw std::invalid_argument("predict_depth: expects the depth feature");
  TapeF tape;
  Ctx c{tape, false, {}, {}};
  const VarF memory = tape.constant(m.tokens);
  const auto sh = impl_->twoway_shared(c, impl_->depth_dec, memory);
  const VarF d = impl_->twoway(c, impl_->depth_dec, memory, sh, tape.constant(MatF(h_d.feature))).second;
  return Eigen::Map<const MatF>(d.value().data(), impl_->cfg.mask_h, impl_->cfg.mask_w).cast<double>().array();
}

ImagePrediction Network::predict(const RgbImage& image, const std::vector<QueryPoint>& points) const {
  const auto& cfg = impl_->cfg;
  if (points.empty()) throw std::invalid_argument("predict: at least one query point required");
  const PaddedQueries pq = pad_queries(points);
  const RgbImage resized =
      image.width == cfg.input_w && image.height == cfg.input_h ? image : resize_image(image, cfg.input_w, cfg.input_h);
  TapeF tape;
  Ctx c{tape, false, {}, {}};
  ImagePrediction pred = to_prediction(impl_->run(c, resized, pq, true), cfg);
  pred.queries.resize(points.size());
  for (auto& q : pred.queries) clip_box(q.box);
  return pred;
}

ForwardOutputs Network::forward(TapeF& tape, const RgbImage& image, const PaddedQueries& queries, bool skip_invalid) {
  Ctx c{tape, true, {}, {}};
  return impl_->run(c, image, queries, skip_invalid);
}

ImagePrediction Network::to_prediction(const ForwardOutputs& out, const NetworkConfig& cfg) {
  ImagePrediction p;
  for (const auto& q : out.queries) p.queries.push_back(q ? to_interaction(*q, cfg.mask_h, cfg.mask_w) : InteractionPrediction{});
  p.depth = Eigen::Map<const MatF>(out.depth.value().data(), cfg.mask_h, cfg.mask_w).cast<double>().array();
  return p;
}

std::vector<std::pair<std::string, MatF>> Network::state() const {
  std::vector<std::pair<std::string, MatF>> out;
  for (const auto& p : impl_->store) out.emplace_back(p.name, p.value);
  return out;
}

void Network::load_state(const std::vector<std::pair<std::string, MatF>>& tensors) {
  std::unordered_map<std::string, const MatF*> by_name;
  for (const auto& [name, m] : tensors) by_name[name] = &m;
  for (auto& p : impl_->store) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw std::invalid_argument("load_state: missing tensor " + p.name);
    if (it->second->rows() != p.value.rows() || it->second->cols() != p.value.cols())
      throw std::invalid_argument("load_state: shape mismatch for " + p.name);
    p.value = *it->second;
  }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'I', '3', 'D', 'C', 'K', 'P', 'T', '1'};

nlohmann::json tensor_table(const std::vector<std::pair<std::string, MatF>>& ts, std::uint64_t& offset) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, m] : ts) {
    arr.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m.size()) * sizeof(float);
  }
  return arr;
}

std::vector<std::pair<std::string, MatF>> read_table(const nlohmann::json& arr, const std::string& data) {
  std::vector<std::pair<std::string, MatF>> out;
  for (const auto& e : arr) {
    const auto rows = e.at("shape").at(0).get<Eigen::Index>();
    const auto cols = e.at("shape").at(1).get<Eigen::Index>();
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto bytes = static_cast<std::uint64_t>(rows * cols) * sizeof(float);
    if (rows < 0 || cols < 0 || off + bytes > data.size()) throw CheckpointError("checkpoint: tensor data out of range");
    MatF m(rows, cols);
    std::memcpy(m.data(), data.data() + off, bytes);
    out.emplace_back(e.at("name").get<std::string>(), std::move(m));
  }
  return out;
}

}  // namespace

std::string write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::uint64_t offset = 0;
  nlohmann::json header = {{"config", ckpt.config}, {"meta", ckpt.meta}};
  header["tensors"] = tensor_table(ckpt.tensors, offset);
  header["extra"] = tensor_table(ckpt.extra, offset);
  const std::string hs = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  const std::uint64_t len = hs.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  bytes += hs;
  for (const auto* list : {&ckpt.tensors, &ckpt.extra})
    for (const auto& [name, m] : *list)
      bytes.append(reinterpret_cast<const char*>(m.data()), static_cast<size_t>(m.size()) * sizeof(float));
  write_file_atomic(path, bytes);
  return sha256_hex(bytes);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (16 + len > bytes.size()) throw CheckpointError("checkpoint: truncated header");
  Checkpoint ck;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(16, len));
    ck.config = header.at("config").get<NetworkConfig>();
    ck.meta = header.value("meta", nlohmann::json::object());
    const std::string data = bytes.substr(16 + len);
    ck.tensors = read_table(header.at("tensors"), data);
    ck.extra = read_table(header.value("extra", nlohmann::json::array()), data);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

Network network_from_checkpoint(const Checkpoint& ckpt) {
  Network net(ckpt.config);
  try {
    net.load_state(ckpt.tensors);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint incompatible with its config: ") + e.what());
  }
  return net;
}

Checkpoint checkpoint_of(const Network& net, nlohmann::json meta) {
  Checkpoint ck;
  ck.config = net.config();
  ck.tensors = net.state();
  ck.meta = std::move(meta);
  return ck;
}

}  // namespace i3d
