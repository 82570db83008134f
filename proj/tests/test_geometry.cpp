#include "i3d/geometry.hpp"
#include "i3d/random.hpp"
#include "i3d/synthgen.hpp"

#include <doctest.h>

#include <numbers>

using namespace i3d;
constexpr double kPi = std::numbers::pi;

TEST_CASE("axis encoding examples") {
  auto e = encode_axis({0.0, 0.5});
  CHECK(e.s2 == doctest::Approx(0.0));
  CHECK(e.c2 == doctest::Approx(1.0));
  CHECK(e.r == doctest::Approx(0.5));
  e = encode_axis({kPi / 2, 0.2});
  CHECK(std::abs(e.s2) < 1e-12);
  CHECK(e.c2 == doctest::Approx(-1.0));
  CHECK(e.r == doctest::Approx(0.2));

  const Line2D l = decode_axis({0, 1, 0.5});
  CHECK(l.theta == doctest::Approx(0.0));
  CHECK(l.r == doctest::Approx(0.5));
  CHECK(decode_axis({0.2, 0.0, 0.3}).theta == doctest::Approx(kPi / 4));
  CHECK_THROWS_AS(decode_axis({0.0, 0.0, 0.3}), GeometryError);
}

TEST_CASE("axis encoding round trip and theta + pi invariance over 10^4 lines") {
  Rng rng(11);
  double worst_rt = 0.0, worst_pi = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Line2D l{rng.uniform(0.0, kPi), rng.uniform(-std::sqrt(2.0), std::sqrt(2.0))};
    const Line2D back = decode_axis(encode_axis(l));
    worst_rt = std::max({worst_rt, std::abs(back.theta - l.theta), std::abs(back.r - l.r)});
    const AxisEncoding a = encode_axis(l), b = encode_axis({l.theta + kPi, -l.r});
    worst_pi = std::max({worst_pi, std::abs(a.s2 - b.s2), std::abs(a.c2 - b.c2), std::abs(a.r - b.r)});
  }
  CHECK(worst_rt < 1e-9);
  CHECK(worst_pi < 1e-12);
}

TEST_CASE("line_through puts both points on the line") {
  Rng rng(12);
  for (int k = 0; k < 100; ++k) {
    const Eigen::Vector2d a(rng.uniform(), rng.uniform()), b(rng.uniform(), rng.uniform());
    const Line2D l = line_through(a, b);
    for (const auto& p : {a, b}) CHECK(std::abs(p.x() * std::cos(l.theta) + p.y() * std::sin(l.theta) - l.r) < 1e-9);
  }
}

TEST_CASE("gaussian bump") {
  const Grid g = gaussian_bump({0.5, 0.5}, 5, 32, 32);
  const double sigma = 11.0 / 6.0;
  CHECK(g(16, 16) == 1.0);
  CHECK(g(16, 21) == doctest::Approx(std::exp(-25.0 / (2 * sigma * sigma))));
  CHECK(g(21, 21) == doctest::Approx(std::exp(-50.0 / (2 * sigma * sigma))));
  CHECK(g(16, 22) == 0.0);
  CHECK(g(10, 16) == 0.0);
  CHECK((g >= 0).all());
  CHECK((g == 1.0).count() == 1);
  CHECK((g > 0).count() == 121);

  double sum = 0.0;
  for (int dy = -5; dy <= 5; ++dy)
    for (int dx = -5; dx <= 5; ++dx) sum += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  CHECK(g.sum() == doctest::Approx(sum).epsilon(1e-12));

  // the window is clipped at the border
  const Grid corner = gaussian_bump({0.0, 0.0}, 5, 32, 32);
  CHECK(corner(0, 0) == 1.0);
  CHECK((corner > 0).count() == 36);
  CHECK_THROWS(gaussian_bump({0.5, 0.5}, 0, 8, 8));
}

TEST_CASE("backproject and project") {
  const CameraModel cam{100, 110, 64, 48};
  const auto p = backproject(64.0, 48.0, 2.0, cam);
  CHECK(p.isApprox(Eigen::Vector3d(0, 0, 2)));
  const CameraModel unit{1, 1, 0, 0};
  CHECK(backproject(1.0, 1.0, 1.0, unit).isApprox(Eigen::Vector3d(1, 1, 1)));
  CHECK_THROWS_AS(backproject(1.0, 1.0, 0.0, unit), GeometryError);

  Rng rng(13);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const double u = rng.uniform(0, 128), v = rng.uniform(0, 96), z = rng.uniform(0.5, 10);
    const auto q = project(backproject(u, v, z, cam), cam);
    worst = std::max({worst, std::abs(q.x() - u), std::abs(q.y() - v)});
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("normals from depth") {
  const CameraModel cam = CameraModel::from_vertical_fov(40, 30, 60);
  const GridF flat = GridF::Constant(30, 40, 2.0f);
  const auto n = normals_from_depth(flat, cam);
  CHECK((n[0].abs() < 1e-5f).all());
  CHECK((n[1].abs() < 1e-5f).all());
  CHECK(((n[2] + 1.0f).abs() < 1e-5f).all());

  // plane n . X = d with n = normalize(0.3, 0, -1): depth z = d / (n . ray)
  const Eigen::Vector3d pn = Eigen::Vector3d(0.3, 0, -1).normalized();
  const double d = -2.0;
  GridF slanted(30, 40);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 40; ++x) {
      const Eigen::Vector3d ray((x + 0.5 - cam.cx) / cam.fx, (y + 0.5 - cam.cy) / cam.fy, 1.0);
      slanted(y, x) = static_cast<float>(d / pn.dot(ray));
    }
  const auto ns = normals_from_depth(slanted, cam);
  double worst = 0.0;
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 40; ++x) {
      const Eigen::Vector3d got(ns[0](y, x), ns[1](y, x), ns[2](y, x));
      worst = std::max(worst, (got - pn).norm());
      CHECK(std::abs(got.norm() - 1.0) < 1e-6);
      CHECK(got.z() <= 0.0);
    }
  CHECK(worst < 1e-3);

  const BinaryGrid all = BinaryGrid::Ones(30, 40);
  CHECK(std::abs(mean_normal(ns, all).norm() - 1.0) < 1e-9);
}

TEST_CASE("normals are unit with n_z <= 0 on random depth") {
  Rng rng(14);
  const CameraModel cam = CameraModel::from_vertical_fov(20, 16, 60);
  GridF depth(16, 20);
  for (int i = 0; i < depth.size(); ++i) depth.data()[i] = static_cast<float>(rng.uniform(1.0, 3.0));
  const auto n = normals_from_depth(depth, cam);
  for (int i = 0; i < depth.size(); ++i) {
    const double len = std::sqrt(double(n[0].data()[i]) * n[0].data()[i] + double(n[1].data()[i]) * n[1].data()[i] +
                                 double(n[2].data()[i]) * n[2].data()[i]);
    CHECK(std::abs(len - 1.0) < 1e-6);
    CHECK(n[2].data()[i] <= 0.0f);
  }
}

TEST_CASE("lift axis over a frontoparallel plane") {
  const int w = 64, h = 48;
  const CameraModel cam = CameraModel::from_vertical_fov(w, h, 60);
  const GridF depth = GridF::Constant(h, w, 3.0f);
  BinaryGrid m = BinaryGrid::Zero(h, w);
  m.block(10, 20, 30, 20).setOnes();
  const Line3D l = lift_axis_to_3d({0.0, 0.4}, depth, Mask::encode(m), cam);
  CHECK(std::abs(l.direction.dot(Eigen::Vector3d::UnitY())) > 0.999);
  CHECK(l.direction.y() > 0);
  CHECK_THROWS_AS(lift_axis_to_3d({0.0, 1.3}, depth, Mask::encode(m), cam), GeometryError);
}

TEST_CASE("lift axis recovers synthgen hinges") {
  int doors = 0, good = 0;
  for (std::uint64_t seed = 0; doors < 30; ++seed) {
    synth::SceneSpec spec;
    try {
      spec = synth::random_spec(500 + seed, 256, 192, synth::ObjectKind::kDoor);
    } catch (const synth::LayoutError&) {
      continue;
    }
    const auto g = synth::generate(spec);
    const auto& t = g.objects.front();
    const auto& q = g.sample.queries[static_cast<size_t>(t.query)];
    const Line3D l = lift_axis_to_3d(*q.axis, *g.sample.depth, *q.mask, spec.camera());
    const double deg = std::acos(std::min(1.0, std::abs(l.direction.dot(t.hinge->direction)))) * 180 / kPi;
    ++doors;
    good += deg < 2.0;
  }
  CHECK(good >= 29);
}

TEST_CASE("rodrigues rotation") {
  Rng rng(15);
  const Line3D axis{{0.2, -0.1, 3.0}, Eigen::Vector3d(0.3, 1.0, 0.1).normalized()};
  Eigen::Matrix3Xd pts(3, 20);
  for (int i = 0; i < pts.size(); ++i) pts.data()[i] = rng.uniform(-1, 1);
  CHECK((rotate_points_about_axis<double>(pts, axis, 0.0) - pts).norm() < 1e-12);
  const auto r = rotate_points_about_axis<double>(pts, axis, 0.7);
  CHECK((rotate_points_about_axis<double>(r, axis, -0.7) - pts).cwiseAbs().maxCoeff() < 1e-9);
  for (int i = 0; i < 20; ++i)
    for (int j = 0; j < 20; ++j)
      CHECK(std::abs((r.col(i) - r.col(j)).norm() - (pts.col(i) - pts.col(j)).norm()) < 1e-9);
  Eigen::Matrix3Xd on(3, 1);
  on.col(0) = axis.origin + 2.0 * axis.direction;
  CHECK((rotate_points_about_axis<double>(on, axis, 1.3) - on).norm() < 1e-12);
}

namespace {

Eigen::Matrix3d random_homography(Rng& rng) {
  Eigen::Matrix3d H;
  H << 1 + rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-20, 20),  //
      rng.uniform(-0.2, 0.2), 1 + rng.uniform(-0.2, 0.2), rng.uniform(-20, 20),    //
      rng.uniform(-5e-4, 5e-4), rng.uniform(-5e-4, 5e-4), 1.0;
  return H;
}

}  // namespace

TEST_CASE("homography fitting") {
  Rng rng(16);
  Eigen::Matrix2Xd src(2, 30);
  for (int i = 0; i < 30; ++i) src.col(i) = Eigen::Vector2d(rng.uniform(0, 256), rng.uniform(0, 192));
  CHECK((fit_homography_dlt(src, src).H - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-9);

  const Homography truth = Homography::normalized(random_homography(rng));
  Eigen::Matrix2Xd dst(2, 30);
  for (int i = 0; i < 30; ++i) dst.col(i) = truth.apply(src.col(i));
  CHECK((fit_homography_dlt(src, dst).H - truth.H).cwiseAbs().maxCoeff() < 1e-9);
  CHECK_THROWS(fit_homography_dlt(src.leftCols(3), dst.leftCols(3)));
  CHECK_THROWS(fit_homography_ransac(src.leftCols(3), dst.leftCols(3)));
}

TEST_CASE("ransac recovers a homography under 30% outliers") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    const Homography truth = Homography::normalized(random_homography(rng));
    Eigen::Matrix2Xd src(2, 50), dst(2, 50);
    for (int i = 0; i < 50; ++i) {
      src.col(i) = Eigen::Vector2d(rng.uniform(0, 256), rng.uniform(0, 192));
      dst.col(i) = i < 15 ? Eigen::Vector2d(rng.uniform(0, 256), rng.uniform(0, 192)) : truth.apply(src.col(i));
    }
    const auto r = fit_homography_ransac(src, dst, 2.0, 1000, seed);
    double worst = 0.0;
    for (int i = 15; i < 50; ++i) worst = std::max(worst, (r.model.apply(src.col(i)) - dst.col(i)).norm());
    CHECK(worst < 1.0);
  }
}
