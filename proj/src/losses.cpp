#include "i3d/losses.hpp"

#include "i3d/geometry.hpp"

namespace i3d::loss {
using nlohmann::json;

void LossConfig::validate() const {
  for (const auto& t : term_names())
    if (!(term_weight(*this, t) >= 0.0)) throw std::invalid_argument("LossConfig: weight for " + t + " must be >= 0");
  if (!(focal_gamma >= 0.0)) throw std::invalid_argument("LossConfig: focal_gamma must be >= 0");
  if (!(mask_focal_alpha >= 0.0 && mask_focal_alpha <= 1.0) || !(affordance_alpha >= 0.0 && affordance_alpha <= 1.0))
    throw std::invalid_argument("LossConfig: alpha must lie in [0, 1]");
  if (depth_grad_scales < 1) throw std::invalid_argument("LossConfig: depth_grad_scales must be >= 1");
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"w_movable", c.w_movable},
           {"w_rigidity", c.w_rigidity},
           {"w_articulation", c.w_articulation},
           {"w_action", c.w_action},
           {"w_mask_focal", c.w_mask_focal},
           {"w_mask_dice", c.w_mask_dice},
           {"w_box_l1", c.w_box_l1},
           {"w_box_giou", c.w_box_giou},
           {"w_axis_angle", c.w_axis_angle},
           {"w_axis_offset", c.w_axis_offset},
           {"w_affordance", c.w_affordance},
           {"w_depth", c.w_depth},
           {"focal_gamma", c.focal_gamma},
           {"mask_focal_alpha", c.mask_focal_alpha},
           {"affordance_alpha", c.affordance_alpha},
           {"depth_grad_scales", c.depth_grad_scales}};
}

void from_json(const json& j, LossConfig& c) {
  LossConfig d;
  c.w_movable = j.value("w_movable", d.w_movable);
  c.w_rigidity = j.value("w_rigidity", d.w_rigidity);
  c.w_articulation = j.value("w_articulation", d.w_articulation);
  c.w_action = j.value("w_action", d.w_action);
  c.w_mask_focal = j.value("w_mask_focal", d.w_mask_focal);
  c.w_mask_dice = j.value("w_mask_dice", d.w_mask_dice);
  c.w_box_l1 = j.value("w_box_l1", d.w_box_l1);
  c.w_box_giou = j.value("w_box_giou", d.w_box_giou);
  c.w_axis_angle = j.value("w_axis_angle", d.w_axis_angle);
  c.w_axis_offset = j.value("w_axis_offset", d.w_axis_offset);
  c.w_affordance = j.value("w_affordance", d.w_affordance);
  c.w_depth = j.value("w_depth", d.w_depth);
  c.focal_gamma = j.value("focal_gamma", d.focal_gamma);
  c.mask_focal_alpha = j.value("mask_focal_alpha", d.mask_focal_alpha);
  c.affordance_alpha = j.value("affordance_alpha", d.affordance_alpha);
  c.depth_grad_scales = j.value("depth_grad_scales", d.depth_grad_scales);
  c.validate();
}

double term_weight(const LossConfig& c, const std::string& t) {
  if (t == "movable") return c.w_movable;
  if (t == "rigidity") return c.w_rigidity;
  if (t == "articulation") return c.w_articulation;
  if (t == "action") return c.w_action;
  if (t == "mask_focal") return c.w_mask_focal;
  if (t == "mask_dice") return c.w_mask_dice;
  if (t == "box_l1") return c.w_box_l1;
  if (t == "box_giou") return c.w_box_giou;
  if (t == "axis_angle") return c.w_axis_angle;
  if (t == "axis_offset") return c.w_axis_offset;
  if (t == "affordance") return c.w_affordance;
  if (t == "depth_ssi" || t == "depth_grad") return c.w_depth;
  throw std::invalid_argument("unknown loss term: " + t);
}

ImageTarget make_image_target(const SceneSample& s, int mask_h, int mask_w, int depth_h, int depth_w) {
  ImageTarget out;
  for (const auto& q : s.queries) {
    QueryTarget t;
    t.ann = q;
    if (q.mask) {
      const BinaryGrid m = q.mask->decode();
      const Grid full = m.cast<double>();
      Grid small = (full.rows() % mask_h == 0 && full.cols() % mask_w == 0) ? downsample_area(full, mask_h, mask_w)
                                                                              : resize_bilinear(full, mask_h, mask_w);
      t.mask = (small >= 0.5).cast<double>();
    }
    if (q.affordance && q.affordance->keypoint)
      t.affordance = gaussian_bump(*q.affordance->keypoint, q.affordance->radius_px, mask_w, mask_h);
    out.queries.push_back(std::move(t));
  }
  if (s.depth) {
    const Grid d = s.depth->cast<double>();
    out.depth = (d.rows() % depth_h == 0 && d.cols() % depth_w == 0) ? downsample_area(d, depth_h, depth_w)
                                                                      : resize_bilinear(d, depth_h, depth_w);
    out.depth_valid = (out.depth > 0.0).cast<std::uint8_t>();
  }
  return out;
}

namespace {

template <size_t N>
double ce_term(const std::array<double, N>& logits, int label, std::array<double, N>* grad) {
  VecX<double> v = Eigen::Map<const VecX<double>>(logits.data(), N);
  VecX<double> g;
  const double val = ce_loss<double>(v, label, &g);
  for (size_t k = 0; k < N; ++k) (*grad)[k] = g(static_cast<Eigen::Index>(k));
  return val;
}

struct Accumulator {
  std::map<std::string, double> sum;
  std::map<std::string, int> count;
};

}  // namespace

LossReport total_loss(const std::vector<BatchEntry>& batch, const LossConfig& cfg, std::vector<ImageGrad>* grads) {
  // pass 1: how many items each term averages over
  Accumulator acc;
  bool any_valid = false;
  for (const auto& e : batch) {
    if (!e.pred || !e.target) throw std::invalid_argument("total_loss: null batch entry");
    if (e.valid.size() != e.pred->queries.size()) throw std::invalid_argument("total_loss: validity size mismatch");
    for (size_t i = 0; i < e.valid.size(); ++i) {
      if (!e.valid[i]) continue;
      if (i >= e.target->queries.size()) throw std::invalid_argument("total_loss: valid slot without a target");
      any_valid = true;
      const auto& t = e.target->queries[i];
      acc.count["movable"]++;
      if (t.ann.rigidity) acc.count["rigidity"]++;
      if (t.ann.articulation) acc.count["articulation"]++;
      if (t.ann.action) acc.count["action"]++;
      if (t.mask.size() > 0) {
        acc.count["mask_focal"]++;
        acc.count["mask_dice"]++;
      }
      if (t.ann.box) {
        acc.count["box_l1"]++;
        acc.count["box_giou"]++;
      }
      if (t.ann.axis) {
        acc.count["axis_angle"]++;
        acc.count["axis_offset"]++;
      }
      if (t.affordance.size() > 0) acc.count["affordance"]++;
    }
    if (e.target->depth.size() > 0 && e.pred->depth.size() > 0) {
      acc.count["depth_ssi"]++;
      acc.count["depth_grad"]++;
    }
  }
  if (!any_valid) throw std::invalid_argument("total_loss: no valid query in the batch");

  auto scale_of = [&](const std::string& term) { return term_weight(cfg, term) / acc.count.at(term); };

  if (grads) grads->assign(batch.size(), ImageGrad{});
  for (size_t b = 0; b < batch.size(); ++b) {
    const auto& e = batch[b];
    ImageGrad* ig = grads ? &(*grads)[b] : nullptr;
    if (ig) ig->queries.assign(e.pred->queries.size(), QueryGrad{});
    for (size_t i = 0; i < e.valid.size(); ++i) {
      if (!e.valid[i]) continue;
      const auto& p = e.pred->queries[i];
      const auto& t = e.target->queries[i];
      QueryGrad g;
      {
        std::array<double, kNumMovable> gl{};
        acc.sum["movable"] += ce_term(p.movable_logits, static_cast<int>(t.ann.movable), &gl);
        for (int k = 0; k < kNumMovable; ++k) g.movable[k] = scale_of("movable") * gl[k];
      }
      if (t.ann.rigidity) {
        std::array<double, kNumRigidity> gl{};
        acc.sum["rigidity"] += ce_term(p.rigidity_logits, static_cast<int>(*t.ann.rigidity), &gl);
        for (int k = 0; k < kNumRigidity; ++k) g.rigidity[k] = scale_of("rigidity") * gl[k];
      }
      if (t.ann.articulation) {
        std::array<double, kNumArticulation> gl{};
        acc.sum["articulation"] += ce_term(p.articulation_logits, static_cast<int>(*t.ann.articulation), &gl);
        for (int k = 0; k < kNumArticulation; ++k) g.articulation[k] = scale_of("articulation") * gl[k];
      }
      if (t.ann.action) {
        std::array<double, kNumAction> gl{};
        acc.sum["action"] += ce_term(p.action_logits, static_cast<int>(*t.ann.action), &gl);
        for (int k = 0; k < kNumAction; ++k) g.action[k] = scale_of("action") * gl[k];
      }
      if (t.mask.size() > 0) {
        if (p.mask_logits.rows() != t.mask.rows() || p.mask_logits.cols() != t.mask.cols())
          throw std::invalid_argument("total_loss: mask grid mismatch");
        Grid gf, gd;
        acc.sum["mask_focal"] += focal_loss<double>(p.mask_logits, t.mask, cfg.mask_focal_alpha, cfg.focal_gamma, &gf);
        const Grid prob = p.mask_logits.unaryExpr([](double x) { return detail::sigmoid(x); });
        acc.sum["mask_dice"] += dice_loss<double>(prob, t.mask, &gd);
        g.mask = scale_of("mask_focal") * gf + scale_of("mask_dice") * gd * prob * (1.0 - prob);
      }
      if (t.ann.box) {
        const auto& pb = p.box;
        const auto& tb = *t.ann.box;
        const auto r = box_losses<double>({pb.x1, pb.y1, pb.x2, pb.y2}, {tb.x1, tb.y1, tb.x2, tb.y2});
        acc.sum["box_l1"] += r.l1;
        acc.sum["box_giou"] += r.giou;
        for (int k = 0; k < 4; ++k) g.box[k] = scale_of("box_l1") * r.grad_l1[k] + scale_of("box_giou") * r.grad_giou[k];
      }
      if (t.ann.axis) {
        const AxisEncoding ge = encode_axis(*t.ann.axis);
        const auto r = axis_loss<double>({p.axis_enc.s2, p.axis_enc.c2, p.axis_enc.r}, {ge.s2, ge.c2, ge.r});
        acc.sum["axis_angle"] += r.angle;
        acc.sum["axis_offset"] += r.offset;
        for (int k = 0; k < 3; ++k)
          g.axis[k] = scale_of("axis_angle") * r.grad_angle[k] + scale_of("axis_offset") * r.grad_offset[k];
      }
      if (t.affordance.size() > 0) {
        if (p.affordance_logits.rows() != t.affordance.rows() || p.affordance_logits.cols() != t.affordance.cols())
          throw std::invalid_argument("total_loss: affordance grid mismatch");
        Grid ga;
        acc.sum["affordance"] += focal_loss<double>(p.affordance_logits, t.affordance, cfg.affordance_alpha,
                                                    cfg.focal_gamma, &ga, AlphaSplit::kThreshold);
        g.affordance = scale_of("affordance") * ga;
      }
      if (ig) ig->queries[i] = std::move(g);
    }
    if (e.target->depth.size() > 0 && e.pred->depth.size() > 0) {
      const Grid& pd = e.pred->depth;
      const Grid& td = e.target->depth;
      if (pd.rows() != td.rows() || pd.cols() != td.cols()) throw std::invalid_argument("total_loss: depth grid mismatch");
      Grid gs, gg;
      acc.sum["depth_ssi"] += ssi_depth_loss<double>(pd, td, e.target->depth_valid, &gs);
      acc.sum["depth_grad"] += gradient_matching_loss<double>(pd, td, e.target->depth_valid, cfg.depth_grad_scales, &gg);
      if (ig) ig->depth = scale_of("depth_ssi") * gs + scale_of("depth_grad") * gg;
    }
  }

  LossReport report;
  for (const auto& [term, n] : acc.count) {
    const double mean = acc.sum[term] / n;
    report.terms[term] = mean;
    report.total += term_weight(cfg, term) * mean;
  }
  return report;
}

}  // namespace i3d::loss
