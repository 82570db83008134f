#include "i3d/geometry.hpp"
#include "i3d/random.hpp"
#include "i3d/synthgen.hpp"

#include <doctest.h>

#include <map>

using namespace i3d;
using namespace i3d::synth;

namespace {

/// Crossing-number test after dropping the normal's dominant axis.
bool inside_polygon(const std::vector<Eigen::Vector3d>& poly, const Eigen::Vector3d& n, const Eigen::Vector3d& x) {
  int drop = 0;
  n.cwiseAbs().maxCoeff(&drop);
  const int a = (drop + 1) % 3, b = (drop + 2) % 3;
  bool in = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const double yi = poly[i](b), yj = poly[j](b);
    if ((yi > x(b)) != (yj > x(b))) {
      const double cross = poly[j](a) + (x(b) - yj) / (yi - yj) * (poly[i](a) - poly[j](a));
      if (x(a) < cross) in = !in;
    }
  }
  return in;
}

/// Nearest hit of the pixel-center ray against every primitive.
std::optional<std::pair<double, int>> ray_cast(const std::vector<Primitive>& prims, const CameraModel& cam, int px,
                                               int py) {
  const Eigen::Vector3d ray((px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0);
  std::optional<std::pair<double, int>> best;
  for (const auto& p : prims) {
    const double denom = p.normal.dot(ray);
    if (std::abs(denom) < 1e-12) continue;
    const double z = p.offset / denom;
    if (z <= 0) continue;
    if (!p.polygon.empty() && !inside_polygon(p.polygon, p.normal, z * ray)) continue;
    if (!best || z < best->first) best = std::make_pair(z, p.object);
  }
  return best;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const auto a = generate_split(3, 42);
  const auto b = generate_split(3, 42);
  const auto c = generate_split(3, 43);
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].sample == b[i].sample);
  CHECK_FALSE(a[0].sample.image == c[0].sample.image);
}

TEST_CASE("rendered depth matches an independent ray cast") {
  Rng rng(61);
  long checked = 0, agree = 0, label_agree = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto spec = generate_split(1, 100 + seed).front().spec;
    const auto r = render(spec);
    const auto cam = spec.camera();
    for (int k = 0; k < 300; ++k) {
      const int x = rng.uniform_int(0, spec.width - 1), y = rng.uniform_int(0, spec.height - 1);
      const auto hit = ray_cast(r.primitives, cam, x, y);
      REQUIRE(hit);
      ++checked;
      agree += std::abs(hit->first - r.depth(y, x)) < 1e-4 * hit->first;
      label_agree += hit->second == r.object(y, x);
    }
  }
  // pixels whose center grazes a polygon edge may go either way
  CHECK(agree >= checked * 995 / 1000);
  CHECK(label_agree >= checked * 995 / 1000);
}

TEST_CASE("door axes project onto the stored hinge") {
  int doors = 0;
  for (const auto& g : generate_split(24, 5)) {
    const auto cam = g.spec.camera();
    for (const auto& t : g.objects) {
      if (!t.hinge) continue;
      ++doors;
      const auto& q = g.sample.queries[static_cast<size_t>(t.query)];
      REQUIRE(q.axis);
      for (double s : {-0.3, 0.0, 0.3}) {
        const Eigen::Vector2d px = project<double>(t.hinge->origin + s * t.hinge->direction, cam);
        const double x = px.x() / g.spec.width, y = px.y() / g.spec.height;
        CHECK(std::abs(x * std::cos(q.axis->theta) + y * std::sin(q.axis->theta) - q.axis->r) < 1e-6);
      }
      CHECK(std::abs(t.hinge->direction.norm() - 1.0) < 1e-12);
    }
  }
  CHECK(doors >= 6);
}

TEST_CASE("labels follow the object kinds") {
  std::map<MovableClass, int> movable;
  std::map<ArticulationClass, int> articulation;
  std::map<ActionClass, int> action;
  int nonrigid = 0, affordances = 0;
  for (const auto& g : generate_split(40, 11)) {
    CHECK_NOTHROW(validate(g.sample));
    for (const auto& t : g.objects) {
      const auto& q = g.sample.queries[static_cast<size_t>(t.query)];
      const auto& o = g.spec.objects[static_cast<size_t>(t.object)];
      switch (o.kind) {
        case ObjectKind::kDoor:
          CHECK(q.articulation == ArticulationClass::kRotation);
          CHECK(q.affordance.has_value());
          break;
        case ObjectKind::kDrawer:
          CHECK(q.articulation == ArticulationClass::kTranslation);
          break;
        case ObjectKind::kBox:
          CHECK(q.articulation == ArticulationClass::kFreeform);
          CHECK(q.movable == (o.large() ? MovableClass::kTwoHands : MovableClass::kOneHand));
          break;
        case ObjectKind::kBlob:
          CHECK(q.rigidity == RigidityClass::kNonrigid);
          break;
      }
      // the query point falls inside its object's mask
      const BinaryGrid m = q.mask->decode();
      const int px = std::min(g.spec.width - 1, static_cast<int>(q.point.x * g.spec.width));
      const int py = std::min(g.spec.height - 1, static_cast<int>(q.point.y * g.spec.height));
      CHECK(m(py, px) == 1);
      CHECK((m == t.mask).all());
    }
    for (const auto& q : g.sample.queries) {
      movable[q.movable]++;
      if (q.articulation) articulation[*q.articulation]++;
      if (q.action) action[*q.action]++;
      nonrigid += q.rigidity == RigidityClass::kNonrigid;
      affordances += q.affordance.has_value();
    }
  }
  CHECK(movable.size() == 3);
  CHECK(articulation.size() == 3);
  CHECK(action.size() == 3);
  CHECK(nonrigid > 0);
  CHECK(affordances > 0);
}

TEST_CASE("normals are unit and face the camera") {
  for (const auto& g : generate_split(4, 3)) {
    const auto& s = g.sample;
    REQUIRE(s.depth);
    REQUIRE(s.normals);
    CHECK(s.depth->minCoeff() > 0.0f);
    const auto cam = g.spec.camera();
    for (int y = 0; y < s.image.height; ++y)
      for (int x = 0; x < s.image.width; ++x) {
        const Eigen::Vector3d n((*s.normals)[0](y, x), (*s.normals)[1](y, x), (*s.normals)[2](y, x));
        CHECK(std::abs(n.norm() - 1.0) < 1e-5);
        CHECK(n.dot(backproject<double>(x + 0.5, y + 0.5, (*s.depth)(y, x), cam)) < 0.0);
      }
  }
}

TEST_CASE("articulated re-renders") {
  for (const auto& g : generate_split(8, 21)) {
    for (const auto& t : g.objects) {
      const auto kind = g.spec.objects[static_cast<size_t>(t.object)].kind;
      if (kind == ObjectKind::kDoor) {
        CHECK((render_opened_door(g.spec, t.object, 0.0) == t.mask).all());
        CHECK_FALSE((render_opened_door(g.spec, t.object, 0.5) == t.mask).all());
      } else if (kind == ObjectKind::kDrawer) {
        CHECK((render_pulled_drawer(g.spec, t.object, 0.0) == t.mask).all());
      } else {
        CHECK_THROWS(render_opened_door(g.spec, t.object, 0.3));
      }
    }
  }
}

TEST_CASE("empty splits are rejected") { CHECK_THROWS_AS(generate_split(0, 1), std::invalid_argument); }
