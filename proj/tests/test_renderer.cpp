#include "i3d/metrics.hpp"
#include "i3d/renderer.hpp"
#include "i3d/synthgen.hpp"

#include <doctest.h>

#include <numbers>

using namespace i3d;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

struct Part {
  synth::GeneratedSample gen;
  int object = -1;
  const QueryAnnotation& query() const {
    for (const auto& t : gen.objects)
      if (t.object == object) return gen.sample.queries[static_cast<size_t>(t.query)];
    throw std::logic_error("no query");
  }
};

std::vector<Part> parts(synth::ObjectKind kind, int n, std::uint64_t seed) {
  std::vector<Part> out;
  for (auto& g : synth::generate_split(3 * n, seed)) {
    for (const auto& t : g.objects)
      if (g.spec.objects[static_cast<size_t>(t.object)].kind == kind) {
        out.push_back({g, t.object});
        break;
      }
    if (static_cast<int>(out.size()) == n) break;
  }
  return out;
}

bool is_identity(const Homography& h) { return (h.H - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12; }

}  // namespace

TEST_CASE("door opening matches the re-rendered door") {
  const auto doors = parts(synth::ObjectKind::kDoor, 20, 301);
  REQUIRE(doors.size() >= 15);
  int good = 0;
  for (const auto& d : doors) {
    const auto& s = d.gen.sample;
    const auto& q = d.query();
    const auto clip = render::render_rotation(s.image, *q.mask, *q.axis, *s.depth, d.gen.spec.camera(),
                                              {0.0, 30 * kDeg});
    REQUIRE(clip.frames.size() == 2);
    CHECK(is_identity(clip.frames[0].homography));
    CHECK((clip.frames[0].mask == q.mask->decode()).all());
    const BinaryGrid truth = synth::render_opened_door(d.gen.spec, d.object, 30 * kDeg);
    const double iou = metrics::mask_iou(clip.frames[1].mask, truth);
    INFO("door " << s.image_id << " IoU " << iou);
    CHECK(iou > 0.8);
    good += iou > 0.8;
  }
  CHECK(good == static_cast<int>(doors.size()));
}

TEST_CASE("drawer pull matches the re-rendered drawer") {
  const auto drawers = parts(synth::ObjectKind::kDrawer, 10, 302);
  REQUIRE(drawers.size() >= 5);
  for (const auto& d : drawers) {
    const auto& s = d.gen.sample;
    const auto& q = d.query();
    const auto clip =
        render::render_translation(s.image, *q.mask, *s.depth, d.gen.spec.camera(), render::default_offsets());
    CHECK(clip.frames.size() == render::default_offsets().size());
    CHECK(is_identity(clip.frames[0].homography));
    const BinaryGrid truth = synth::render_pulled_drawer(d.gen.spec, d.object, 0.15);
    CHECK(metrics::mask_iou(clip.frames[3].mask, truth) > 0.8);
  }
}

TEST_CASE("small rotations chain and reverse") {
  const auto doors = parts(synth::ObjectKind::kDoor, 5, 303);
  REQUIRE(!doors.empty());
  const double step = 5 * kDeg;
  for (const auto& d : doors) {
    const auto& s = d.gen.sample;
    const auto& q = d.query();
    const auto cam = d.gen.spec.camera();
    const auto clip = render::render_rotation(s.image, *q.mask, *q.axis, *s.depth, cam, {step, 2 * step, -step});
    const BinaryGrid& once = clip.frames[0].mask;
    const BinaryGrid twice = render::warp_mask(once, clip.frames[0].homography);
    CHECK(metrics::mask_iou(twice, clip.frames[1].mask) > 0.9);

    const BinaryGrid back = render::warp_mask(once, clip.frames[2].homography);
    CHECK(metrics::mask_iou(back, q.mask->decode()) > 0.95);
  }
}

TEST_CASE("frontoparallel translation is a uniform scaling") {
  const int w = 160, h = 120;
  const auto cam = CameraModel::from_vertical_fov(w, h, 60.0);
  BinaryGrid m = BinaryGrid::Zero(h, w);
  m.block(30, 50, 40, 60).setOnes();
  const GridF depth = GridF::Constant(h, w, 2.0f);
  RgbImage img(w, h);
  const auto clip = render::render_translation(img, Mask::encode(m), depth, cam, {0.0, 0.2});
  REQUIRE(clip.frames.size() == 2);
  const Eigen::Matrix3d H = clip.frames[1].homography.H / clip.frames[1].homography.H(2, 2);
  CHECK(std::abs(H(0, 1)) < 1e-3);
  CHECK(std::abs(H(1, 0)) < 1e-3);
  CHECK(std::abs(H(2, 0)) < 1e-3);
  CHECK(std::abs(H(2, 1)) < 1e-3);
  // moving toward the camera from depth 2 to 1.8 magnifies by 2 / 1.8
  CHECK(H(0, 0) == doctest::Approx(2.0 / 1.8).epsilon(1e-3));
  CHECK(H(1, 1) == doctest::Approx(2.0 / 1.8).epsilon(1e-3));
  CHECK(clip.direction.z() == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(clip.frames[1].mask.count() > m.count());
}

TEST_CASE("renderer input errors") {
  const int w = 64, h = 48;
  const auto cam = CameraModel::from_vertical_fov(w, h, 60.0);
  const GridF depth = GridF::Constant(h, w, 2.0f);
  RgbImage img(w, h);
  BinaryGrid tiny = BinaryGrid::Zero(h, w);
  tiny(3, 3) = 1;
  CHECK_THROWS_AS(render::render_translation(img, Mask::encode(tiny), depth, cam, {0.1}), GeometryError);
  CHECK_THROWS_AS(render::render_translation(img, Mask::encode(BinaryGrid::Ones(10, 10).eval()), depth, cam, {0.1}),
                  std::invalid_argument);
}

TEST_CASE("warp and composite") {
  BinaryGrid m = BinaryGrid::Zero(20, 30);
  m.block(5, 5, 6, 8).setOnes();
  Homography shift;
  shift.H(0, 2) = 4.0;
  shift.H(1, 2) = 2.0;
  const BinaryGrid moved = render::warp_mask(m, shift);
  CHECK(moved.count() == m.count());
  CHECK(moved(7, 9) == 1);
  CHECK(moved(7, 8) == 0);
  CHECK((render::warp_mask(m, Homography{}) == m).all());

  RgbImage img(30, 20);
  render::ClipFrame f;
  f.region = RgbImage(30, 20);
  f.alpha = GridF::Zero(20, 30);
  f.alpha(1, 2) = 1.0f;
  f.region.at(2, 1, 0) = 200;
  const RgbImage out = render::composite(img, f);
  CHECK(out.at(2, 1, 0) == 200);
  CHECK(out.at(3, 1, 0) == 0);
}
