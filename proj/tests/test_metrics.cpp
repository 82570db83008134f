#include "i3d/geometry.hpp"
#include "i3d/metrics.hpp"
#include "i3d/random.hpp"
#include "i3d/synthgen.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace i3d;

namespace {

BoxXYXY snapped_box(Rng& rng, int n) {
  const int x1 = rng.uniform_int(0, n - 2), y1 = rng.uniform_int(0, n - 2);
  const int x2 = rng.uniform_int(x1 + 1, n), y2 = rng.uniform_int(y1 + 1, n);
  return {double(x1) / n, double(y1) / n, double(x2) / n, double(y2) / n};
}

}  // namespace

TEST_CASE("box IoU agrees with a raster count on 200 boxes") {
  Rng rng(41);
  for (int k = 0; k < 200; ++k) {
    const auto a = snapped_box(rng, 40), b = snapped_box(rng, 40);
    CHECK(metrics::box_iou(a, b) == doctest::Approx(oracle::box_iou_raster(a, b, 40)).epsilon(1e-9));
    CHECK(metrics::box_iou(a, b) == doctest::Approx(metrics::box_iou(b, a)));
  }
  CHECK(metrics::box_iou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  CHECK(metrics::box_iou({0, 0, 0.5, 1}, {0.5, 0, 1, 1}) == 0.0);
  CHECK(metrics::box_iou({0, 0, 2, 1}, {1, 0, 3, 1}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("mask IoU agrees with a loop on 200 masks") {
  Rng rng(42);
  for (int k = 0; k < 200; ++k) {
    const int h = rng.uniform_int(1, 30), w = rng.uniform_int(1, 30);
    BinaryGrid a(h, w), b(h, w);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (int i = 0; i < a.size(); ++i) {
      a.data()[i] = rng.bernoulli(pa);
      b.data()[i] = rng.bernoulli(pb);
    }
    CHECK(metrics::mask_iou(a, b) == doctest::Approx(oracle::mask_iou_loop(a, b)).epsilon(1e-12));
    CHECK(metrics::mask_iou(Mask::encode(a), Mask::encode(b)) == metrics::mask_iou(a, b));
  }
  CHECK(metrics::mask_iou(BinaryGrid::Zero(3, 3).eval(), BinaryGrid::Zero(3, 3).eval()) == 1.0);
  CHECK_THROWS(metrics::mask_iou(BinaryGrid::Zero(3, 3).eval(), BinaryGrid::Zero(3, 4).eval()));
}

TEST_CASE("EA score agrees with an edge-intersection oracle on 500 line pairs") {
  Rng rng(43);
  int compared = 0;
  for (int k = 0; k < 500; ++k) {
    const Line2D a = line_through({rng.uniform(), rng.uniform()}, {rng.uniform(), rng.uniform()});
    const Line2D b = line_through({rng.uniform(), rng.uniform()}, {rng.uniform(), rng.uniform()});
    const auto want = oracle::ea_score(a, b);
    REQUIRE(want);
    CHECK(metrics::ea_score(a, b) == doctest::Approx(*want).epsilon(1e-9));
    CHECK(metrics::ea_score(a, b) == doctest::Approx(metrics::ea_score(b, a)).epsilon(1e-12));
    ++compared;
  }
  CHECK(compared == 500);
}

TEST_CASE("EA score known values") {
  const Line2D vertical{0.0, 0.5};
  CHECK(metrics::ea_score(vertical, vertical) == doctest::Approx(1.0));
  // same line written with theta + pi
  CHECK(metrics::ea_score(vertical, {std::numbers::pi, -0.5}) == doctest::Approx(1.0));
  // perpendicular through the same midpoint: angle score 0
  CHECK(metrics::ea_score(vertical, {std::numbers::pi / 2, 0.5}) == doctest::Approx(0.0));
  // parallel, shifted by 0.25: 1 - 0.25 / sqrt 2
  CHECK(metrics::ea_score(vertical, {0.0, 0.75}) == doctest::Approx(1.0 - 0.25 / std::sqrt(2.0)));
  CHECK_THROWS_AS(metrics::ea_score(vertical, {0.0, 2.0}), GeometryError);
}

TEST_CASE("SIM agrees with a loop and has the expected range") {
  Rng rng(44);
  for (int k = 0; k < 200; ++k) {
    Grid p(8, 9), q(8, 9);
    for (int i = 0; i < p.size(); ++i) {
      p.data()[i] = rng.uniform();
      q.data()[i] = rng.uniform();
    }
    const double s = metrics::sim(p, q);
    CHECK(s == doctest::Approx(oracle::sim_loop(p, q)).epsilon(1e-12));
    CHECK(s == doctest::Approx(metrics::sim(q, p)).epsilon(1e-12));
    CHECK(s <= 1.0 + 1e-12);
    CHECK(s >= 0.0);
    CHECK(metrics::sim(p, (3.0 * p).eval()) == doctest::Approx(1.0));
  }
  Grid a = Grid::Zero(2, 2), b = Grid::Zero(2, 2);
  a(0, 0) = 1;
  b(1, 1) = 1;
  CHECK(metrics::sim(a, b) == 0.0);
  CHECK(metrics::sim(Grid::Zero(2, 2), Grid::Ones(2, 2)) == doctest::Approx(1.0));
  CHECK_THROWS(metrics::sim(-a, b));
}

TEST_CASE("affordance distribution") {
  Rng rng(45);
  Grid l(6, 7);
  for (int i = 0; i < l.size(); ++i) l.data()[i] = 3 * rng.normal();
  const Grid d = metrics::affordance_distribution(l);
  CHECK(d.sum() == doctest::Approx(1.0));
  CHECK(d.minCoeff() == 0.0);
  Eigen::Index r0, c0, r1, c1;
  d.maxCoeff(&r0, &c0);
  l.maxCoeff(&r1, &c1);
  CHECK(r0 == r1);
  CHECK(c0 == c1);
  CHECK((metrics::affordance_distribution(Grid::Zero(2, 3)) == 1.0 / 6.0).all());
  // a perfect bump scores 1 against itself
  const Grid bump = gaussian_bump({0.4, 0.6}, 4, 32, 24);
  const Grid logits = (bump.max(1e-9) / (1 - bump.min(1 - 1e-9))).log();
  CHECK(metrics::sim(metrics::affordance_distribution(logits), bump) > 0.999);
}

TEST_CASE("depth delta agrees with a sorted-median oracle on 200 grids") {
  Rng rng(46);
  for (int k = 0; k < 200; ++k) {
    const int h = rng.uniform_int(1, 12), w = rng.uniform_int(1, 12);
    Grid p(h, w), g(h, w);
    for (int i = 0; i < p.size(); ++i) {
      g.data()[i] = rng.uniform(0.5, 5.0);
      p.data()[i] = g.data()[i] * std::exp(0.3 * rng.normal()) * 2.7;
    }
    for (double t : {1.25, 1.25 * 1.25})
      CHECK(metrics::depth_delta(p, g, t) == doctest::Approx(oracle::depth_delta(p, g, t)).epsilon(1e-12));
  }
  const Grid g = Grid::Constant(3, 3, 2.0);
  CHECK(metrics::depth_delta((5.0 * g).eval(), g, 1.25) == 1.0);
  CHECK(metrics::depth_delta((5.0 * g).eval(), g, 1.25, false) == 0.0);
  CHECK_THROWS(metrics::depth_delta(Grid::Zero(2, 2).eval(), Grid::Ones(2, 2).eval(), 1.25));
}

TEST_CASE("SSI depth alignment undoes scale and shift") {
  Rng rng(47);
  Grid g(10, 12);
  for (int i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(1.0, 4.0);
  const Grid p = -3.0 + 0.2 * g;
  const Grid a = metrics::align_depth_ssi(p, g, BinaryGrid::Ones(10, 12));
  CHECK((a - g).abs().maxCoeff() < 1e-9);
}

TEST_CASE("evaluate scores the ground truth as perfect") {
  const auto gen = synth::generate_split(4, 9, 128, 96);
  std::vector<SceneSample> samples;
  std::vector<ImagePrediction> preds;
  for (const auto& g : gen) {
    samples.push_back(g.sample);
    ImagePrediction p;
    for (const auto& q : g.sample.queries) {
      InteractionPrediction ip;
      auto onehot = [](auto& arr, int k) {
        arr.fill(-10.0);
        arr[static_cast<size_t>(k)] = 10.0;
      };
      onehot(ip.movable_logits, static_cast<int>(q.movable));
      if (q.rigidity) onehot(ip.rigidity_logits, static_cast<int>(*q.rigidity));
      if (q.articulation) onehot(ip.articulation_logits, static_cast<int>(*q.articulation));
      if (q.action) onehot(ip.action_logits, static_cast<int>(*q.action));
      if (q.box) ip.box = *q.box;
      if (q.axis) ip.axis_enc = encode_axis(*q.axis);
      ip.mask_logits = q.mask ? Grid((q.mask->decode().cast<double>() - 0.5) * 20.0) : Grid::Constant(96, 128, -10.0);
      ip.affordance_logits = Grid::Zero(24, 32);
      if (q.affordance && q.affordance->keypoint) {
        const Grid b = gaussian_bump(*q.affordance->keypoint, q.affordance->radius_px, 32, 24);
        ip.affordance_logits = (b.max(1e-12) / (1 - b.min(1 - 1e-12))).log();
      }
      p.queries.push_back(ip);
    }
    p.depth = g.sample.depth->cast<double>();
    preds.push_back(p);
  }
  const auto r = metrics::evaluate(preds, samples);
  CHECK(r.movable_acc.value() == 1.0);
  CHECK(r.box_iou.value() == doctest::Approx(1.0));
  CHECK(r.mask_iou.value() == doctest::Approx(1.0));
  if (r.axis_ea) CHECK(*r.axis_ea == doctest::Approx(1.0));
  if (r.affordance_sim) CHECK(*r.affordance_sim > 0.999);
  CHECK(r.depth_delta_1.value() == doctest::Approx(1.0));
  CHECK(r.num_images == 4);
  CHECK(r.to_json().contains("movable_acc"));
  CHECK(r.table().find("Movable") != std::string::npos);
}

TEST_CASE("evaluate binarizes masks at the requested probability") {
  const auto gen = synth::generate_split(1, 9, 128, 96);
  const auto& s = gen.front().sample;
  ImagePrediction p;
  for (size_t i = 0; i < s.queries.size(); ++i) {
    InteractionPrediction ip;
    ip.mask_logits = Grid::Constant(96, 128, std::log(0.4 / 0.6));
    ip.affordance_logits = Grid::Zero(24, 32);
    p.queries.push_back(ip);
  }
  p.depth = s.depth->cast<double>();
  const auto low = metrics::evaluate({p}, {s}, 0.3), mid = metrics::evaluate({p}, {s});
  REQUIRE(mid.mask_iou);
  CHECK(mid.mask_iou.value() == 0.0);
  CHECK(low.mask_iou.value() > 0.0);
  CHECK_THROWS_AS(metrics::evaluate({p}, {s}, 1.0), std::invalid_argument);
}
