#include "i3d/synthgen.hpp"

#include "i3d/random.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace i3d::synth {

namespace {

constexpr double kInset = 0.005;  // wall objects sit this far in front of the wall
constexpr double kPi = std::numbers::pi;

struct ObjectGeometry {
  std::vector<Primitive> prims;
  std::optional<std::pair<Eigen::Vector3d, Eigen::Vector3d>> hinge;  // camera frame endpoints
  std::optional<Eigen::Vector3d> handle_center;
  Eigen::Vector3d face_normal = -Eigen::Vector3d::UnitZ();
};

Primitive make_primitive(int object, int part, std::vector<Eigen::Vector3d> poly, const Eigen::Vector3d& albedo) {
  Primitive p;
  p.object = object;
  p.part = part;
  Eigen::Vector3d n = (poly[1] - poly[0]).cross(poly[2] - poly[0]);
  if (n.norm() < 1e-12) throw LayoutError("degenerate primitive");
  n.normalize();
  if (n.dot(poly[0]) > 0) n = -n;
  p.normal = n;
  p.offset = n.dot(poly[0]);
  p.polygon = std::move(poly);
  p.albedo = albedo;
  return p;
}

Eigen::Vector3d rotate_about(const Eigen::Vector3d& p, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                             double angle) {
  return origin + Eigen::AngleAxisd(angle, dir.normalized()) * (p - origin);
}

/// Rectangle on the face spanned by corner tl and unit edges eu, ev.
std::vector<Eigen::Vector3d> face_rect(const Eigen::Vector3d& tl, const Eigen::Vector3d& eu, const Eigen::Vector3d& ev,
                                       double a0, double b0, double a1, double b1) {
  return {tl + a0 * eu + b0 * ev, tl + a1 * eu + b0 * ev, tl + a1 * eu + b1 * ev, tl + a0 * eu + b1 * ev};
}

/// Geometry in world coordinates, converted to the camera frame at the end.
ObjectGeometry object_geometry(const SceneSpec& spec, int index) {
  const ObjectSpec& o = spec.objects.at(static_cast<size_t>(index));
  const Eigen::Matrix3d rt = spec.rotation().transpose();
  const Eigen::Vector3d handle_albedo(0.12, 0.12, 0.14);
  ObjectGeometry g;

  if (o.kind == ObjectKind::kBox) {
    const double hw = o.size.x() / 2, h = o.size.y(), hd = o.size.z() / 2;
    const Eigen::Matrix3d rot = Eigen::AngleAxisd(o.yaw, Eigen::Vector3d::UnitY()).toRotationMatrix();
    const Eigen::Vector3d base(o.position.x(), spec.camera_height, o.position.y());
    auto corner = [&](double sx, double sy, double sz) {
      return Eigen::Vector3d(base + rot * Eigen::Vector3d(sx * hw, -sy * h, sz * hd));
    };
    const Eigen::Vector3d center = base + rot * Eigen::Vector3d(0, -h / 2, 0);
    // faces: -x, +x, top, bottom, -z, +z
    const std::array<std::array<Eigen::Vector3d, 4>, 6> faces{{
        {corner(-1, 0, -1), corner(-1, 0, 1), corner(-1, 1, 1), corner(-1, 1, -1)},
        {corner(1, 0, -1), corner(1, 1, -1), corner(1, 1, 1), corner(1, 0, 1)},
        {corner(-1, 1, -1), corner(-1, 1, 1), corner(1, 1, 1), corner(1, 1, -1)},
        {corner(-1, 0, -1), corner(1, 0, -1), corner(1, 0, 1), corner(-1, 0, 1)},
        {corner(-1, 0, -1), corner(-1, 1, -1), corner(1, 1, -1), corner(1, 0, -1)},
        {corner(-1, 0, 1), corner(1, 0, 1), corner(1, 1, 1), corner(-1, 1, 1)},
    }};
    for (int f = 0; f < 6; ++f) {
      std::vector<Eigen::Vector3d> cam;
      Eigen::Vector3d fc = Eigen::Vector3d::Zero();
      for (const auto& p : faces[static_cast<size_t>(f)]) {
        cam.push_back(rt * p);
        fc += p / 4.0;
      }
      // back-face culling with the outward normal
      const Eigen::Vector3d outward = rt * (fc - center);
      if (outward.dot(rt * fc) >= 0) continue;
      g.prims.push_back(make_primitive(index, f, std::move(cam), o.albedo));
    }
    g.face_normal = g.prims.empty() ? Eigen::Vector3d(-Eigen::Vector3d::UnitZ()) : g.prims.front().normal;
    return g;
  }

  const double w = o.size.x(), h = o.size.y();
  const Eigen::Vector3d eu = Eigen::Vector3d::UnitX(), ev = Eigen::Vector3d::UnitY();
  const Eigen::Vector3d tl(o.position.x() - w / 2, o.position.y() - h / 2, spec.wall_distance - kInset);
  std::vector<std::vector<Eigen::Vector3d>> polys;
  std::vector<Eigen::Vector3d> extra_points;  // hinge endpoints, handle center (world)

  if (o.kind == ObjectKind::kBlob) {
    const size_t n = o.blob_radii.size();
    if (n < 3) throw LayoutError("blob needs at least 3 outline radii");
    std::vector<Eigen::Vector3d> poly;
    const Eigen::Vector3d c = tl + (w / 2) * eu + (h / 2) * ev;
    for (size_t k = 0; k < n; ++k) {
      const double phi = 2 * kPi * static_cast<double>(k) / static_cast<double>(n);
      poly.push_back(c + o.blob_radii[k] * (w / 2 * std::cos(phi) * eu + h / 2 * std::sin(phi) * ev));
    }
    polys.push_back(std::move(poly));
  } else {
    polys.push_back(face_rect(tl, w * eu, h * ev, 0, 0, 1, 1));
    const bool side = o.hinge == HingeSide::kLeft || o.hinge == HingeSide::kRight;
    double hu = 0.22, hv = 0.035;  // drawer bar
    if (o.kind == ObjectKind::kDoor) {
      hu = side ? 0.04 : 0.16;
      hv = side ? 0.16 : 0.04;
    }
    const double a0 = std::clamp(o.handle.x() - hu / (2 * w), 0.02, 0.98);
    const double a1 = std::clamp(o.handle.x() + hu / (2 * w), 0.02, 0.98);
    const double b0 = std::clamp(o.handle.y() - hv / (2 * h), 0.02, 0.98);
    const double b1 = std::clamp(o.handle.y() + hv / (2 * h), 0.02, 0.98);
    polys.push_back(face_rect(tl, w * eu, h * ev, a0, b0, a1, b1));
    extra_points.push_back(tl + w * 0.5 * (a0 + a1) * eu + h * 0.5 * (b0 + b1) * ev);
    if (o.kind == ObjectKind::kDoor) {
      Eigen::Vector3d h0, h1;
      switch (o.hinge) {
        case HingeSide::kLeft: h0 = tl, h1 = tl + h * ev; break;
        case HingeSide::kRight: h0 = tl + w * eu, h1 = tl + w * eu + h * ev; break;
        case HingeSide::kTop: h0 = tl, h1 = tl + w * eu; break;
        case HingeSide::kBottom: h0 = tl + h * ev, h1 = tl + w * eu + h * ev; break;
      }
      if (o.open_angle != 0.0) {
        // swing toward the camera: pick the sign that brings the free edge nearer
        const Eigen::Vector3d far = tl + (w / 2) * eu + (h / 2) * ev;
        const Eigen::Matrix3d rw = spec.rotation();
        auto cam_z = [&](const Eigen::Vector3d& p) { return (rw.transpose() * p).z(); };
        const double s = cam_z(rotate_about(far, h0, h1 - h0, o.open_angle)) <=
                                 cam_z(rotate_about(far, h0, h1 - h0, -o.open_angle))
                             ? 1.0
                             : -1.0;
        for (auto& poly : polys)
          for (auto& p : poly) p = rotate_about(p, h0, h1 - h0, s * o.open_angle);
        for (auto& p : extra_points) p = rotate_about(p, h0, h1 - h0, s * o.open_angle);
      }
      extra_points.push_back(h0);
      extra_points.push_back(h1);
    }
    if (o.kind == ObjectKind::kDrawer && o.pull_offset != 0.0) {
      const Eigen::Vector3d t(0, 0, -o.pull_offset);
      for (auto& poly : polys)
        for (auto& p : poly) p += t;
      for (auto& p : extra_points) p += t;
    }
  }

  for (size_t i = 0; i < polys.size(); ++i) {
    std::vector<Eigen::Vector3d> cam;
    for (const auto& p : polys[i]) cam.push_back(rt * p);
    g.prims.push_back(make_primitive(index, static_cast<int>(i), std::move(cam), i == 0 ? o.albedo : handle_albedo));
  }
  g.face_normal = g.prims.front().normal;
  if (!extra_points.empty()) g.handle_center = rt * extra_points[0];
  if (o.kind == ObjectKind::kDoor) g.hinge = std::make_pair(Eigen::Vector3d(rt * extra_points[1]), Eigen::Vector3d(rt * extra_points[2]));
  return g;
}

Eigen::Vector2d project_px(const Eigen::Vector3d& p, const CameraModel& cam) {
  if (p.z() <= 1e-3) throw LayoutError("primitive behind the camera");
  return project<double>(p, cam);
}

bool inside_polygon(const std::vector<Eigen::Vector2d>& poly, double x, double y) {
  bool in = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a.y() > y) != (b.y() > y) && x < (b.x() - a.x()) * (y - a.y()) / (b.y() - a.y()) + a.x()) in = !in;
  }
  return in;
}

std::array<double, 4> pixel_bbox(const ObjectGeometry& g, const CameraModel& cam) {
  std::array<double, 4> b{1e18, 1e18, -1e18, -1e18};
  for (const auto& p : g.prims)
    for (const auto& v : p.polygon) {
      const Eigen::Vector2d q = project_px(v, cam);
      b[0] = std::min(b[0], q.x());
      b[1] = std::min(b[1], q.y());
      b[2] = std::max(b[2], q.x());
      b[3] = std::max(b[3], q.y());
    }
  return b;
}

Eigen::Vector3d hsv(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h * 6.0, 6.0);
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Eigen::Vector3d rgb;
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  return rgb + Eigen::Vector3d::Constant(v - c);
}

ObjectSpec random_object(ObjectKind kind, Rng& rng, const SceneSpec& spec) {
  ObjectSpec o;
  o.kind = kind;
  o.albedo = hsv(rng.uniform(), rng.uniform(0.45, 0.85), rng.uniform(0.45, 0.95));
  const double d = spec.wall_distance;
  const double floor_y = spec.camera_height - 0.05;
  auto wall_position = [&](double w, double h) {
    const double x = rng.uniform(-0.5 * d + w / 2, std::max(-0.5 * d + w / 2, 0.5 * d - w / 2));
    const double y = rng.uniform(-0.45 * d + h / 2, std::max(-0.45 * d + h / 2, floor_y - h / 2));
    return Eigen::Vector2d(x, y);
  };
  switch (kind) {
    case ObjectKind::kDoor: {
      const double r = rng.uniform();
      o.hinge = r < 0.4 ? HingeSide::kLeft : r < 0.8 ? HingeSide::kRight : r < 0.9 ? HingeSide::kTop : HingeSide::kBottom;
      const bool side = o.hinge == HingeSide::kLeft || o.hinge == HingeSide::kRight;
      const double w = side ? rng.uniform(0.45, 0.8) : rng.uniform(0.6, 0.9);
      const double h = side ? rng.uniform(0.7, 1.5) : rng.uniform(0.35, 0.6);
      o.size = {w, h, 0};
      const double jitter = rng.uniform(-0.2, 0.2);
      switch (o.hinge) {
        case HingeSide::kLeft: o.handle = {0.88, 0.5 + jitter}; break;
        case HingeSide::kRight: o.handle = {0.12, 0.5 + jitter}; break;
        case HingeSide::kTop: o.handle = {0.5 + jitter, 0.85}; break;
        case HingeSide::kBottom: o.handle = {0.5 + jitter, 0.15}; break;
      }
      o.position = wall_position(w, h);
      break;
    }
    case ObjectKind::kDrawer: {
      const double w = rng.uniform(0.45, 0.85), h = rng.uniform(0.16, 0.32);
      o.size = {w, h, 0};
      o.handle = {0.5, rng.uniform(0.3, 0.5)};
      o.position = wall_position(w, h);
      break;
    }
    case ObjectKind::kBlob: {
      const double w = rng.uniform(0.35, 0.7), h = rng.uniform(0.35, 0.7);
      o.size = {w, h, 0};
      const double p2 = rng.uniform(0, 2 * kPi), p3 = rng.uniform(0, 2 * kPi);
      const double a2 = rng.uniform(0.05, 0.18), a3 = rng.uniform(0.05, 0.12);
      for (int k = 0; k < 28; ++k) {
        const double phi = 2 * kPi * k / 28.0;
        o.blob_radii.push_back(1.0 + a2 * std::sin(2 * phi + p2) + a3 * std::sin(3 * phi + p3));
      }
      o.position = wall_position(w, h);
      break;
    }
    case ObjectKind::kBox: {
      if (rng.bernoulli(0.5)) {
        const double s = rng.uniform(0.2, 0.32);
        o.size = {s * rng.uniform(0.8, 1.2), s * rng.uniform(0.8, 1.2), s * rng.uniform(0.8, 1.2)};
      } else {
        o.size = {rng.uniform(0.55, 0.85), rng.uniform(0.5, 0.8), rng.uniform(0.5, 0.8)};
      }
      o.yaw = rng.uniform(-0.5, 0.5);
      o.position = {rng.uniform(-1.5, 1.5), rng.uniform(1.8, std::max(1.8, d - 0.5 - o.size.z()))};
      break;
    }
  }
  return o;
}

std::string default_id(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%016llx", static_cast<unsigned long long>(seed));
  return buf;
}

QueryPoint sample_inside(const GridT<int>& labels, int label, int margin, Rng& rng) {
  const int h = static_cast<int>(labels.rows()), w = static_cast<int>(labels.cols());
  std::vector<std::pair<int, int>> cand;
  for (int m = margin; m >= 0 && cand.empty(); --m)
    for (int y = m; y < h - m; ++y)
      for (int x = m; x < w - m; ++x) {
        if (labels(y, x) != label) continue;
        bool ok = true;
        for (int dy = -m; dy <= m && ok; ++dy)
          for (int dx = -m; dx <= m && ok; ++dx) ok = labels(y + dy, x + dx) == label;
        if (ok) cand.emplace_back(x, y);
      }
  if (cand.empty()) throw LayoutError("no pixel available for a query");
  const auto [x, y] = cand[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(cand.size()) - 1))];
  return {(x + 0.5) / w, (y + 0.5) / h};
}

}  // namespace

Eigen::Matrix3d SceneSpec::rotation() const {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) * Eigen::AngleAxisd(-pitch, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

std::vector<Primitive> scene_primitives(const SceneSpec& spec) {
  const Eigen::Matrix3d rt = spec.rotation().transpose();
  std::vector<Primitive> out;
  Primitive wall;
  wall.object = kWall;
  wall.normal = rt * Eigen::Vector3d(0, 0, -1);
  wall.offset = -spec.wall_distance;
  wall.albedo = spec.wall_albedo;
  out.push_back(wall);
  Primitive floor;
  floor.object = kFloor;
  floor.normal = rt * Eigen::Vector3d(0, -1, 0);
  floor.offset = -spec.camera_height;
  floor.albedo = spec.floor_albedo;
  out.push_back(floor);
  for (int k = 0; k < static_cast<int>(spec.objects.size()); ++k)
    for (auto& p : object_geometry(spec, k).prims) out.push_back(std::move(p));
  return out;
}

Rendering render(const SceneSpec& spec) {
  const CameraModel cam = spec.camera();
  const int w = spec.width, h = spec.height;
  Rendering r;
  r.primitives = scene_primitives(spec);
  GridT<int> prim(h, w);
  auto ray = [&](double u, double v) { return Eigen::Vector3d((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0); };
  auto depth_on = [&](const Primitive& p, const Eigen::Vector3d& d) {
    const double den = p.normal.dot(d);
    return std::abs(den) < 1e-12 ? -1.0 : p.offset / den;
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector3d d = ray(x + 0.5, y + 0.5);
      const double zw = depth_on(r.primitives[0], d);
      const double zf = depth_on(r.primitives[1], d);
      if (zw <= 0 && zf <= 0) throw LayoutError("pixel sees neither wall nor floor");
      prim(y, x) = (zf > 0 && (zw <= 0 || zf < zw)) ? 1 : 0;
    }

  // Painter's order over objects, far to near; parts in listed order.
  std::vector<int> order(spec.objects.size());
  std::vector<double> mean_z(spec.objects.size(), 0.0);
  std::vector<int> counts(spec.objects.size(), 0);
  for (const auto& p : r.primitives)
    if (p.object >= 0)
      for (const auto& v : p.polygon) {
        mean_z[static_cast<size_t>(p.object)] += v.z();
        ++counts[static_cast<size_t>(p.object)];
      }
  for (size_t k = 0; k < order.size(); ++k) {
    order[k] = static_cast<int>(k);
    if (counts[k]) mean_z[k] /= counts[k];
  }
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mean_z[static_cast<size_t>(a)] > mean_z[static_cast<size_t>(b)]; });
  for (int k : order)
    for (size_t i = 2; i < r.primitives.size(); ++i) {
      const auto& p = r.primitives[i];
      if (p.object != k) continue;
      std::vector<Eigen::Vector2d> poly;
      double x0 = 1e18, y0 = 1e18, x1 = -1e18, y1 = -1e18;
      for (const auto& v : p.polygon) {
        poly.push_back(project_px(v, cam));
        x0 = std::min(x0, poly.back().x());
        y0 = std::min(y0, poly.back().y());
        x1 = std::max(x1, poly.back().x());
        y1 = std::max(y1, poly.back().y());
      }
      const int xa = std::max(0, static_cast<int>(std::floor(x0 - 0.5)));
      const int xb = std::min(w - 1, static_cast<int>(std::ceil(x1)));
      const int ya = std::max(0, static_cast<int>(std::floor(y0 - 0.5)));
      const int yb = std::min(h - 1, static_cast<int>(std::ceil(y1)));
      for (int y = ya; y <= yb; ++y)
        for (int x = xa; x <= xb; ++x)
          if (inside_polygon(poly, x + 0.5, y + 0.5)) prim(y, x) = static_cast<int>(i);
    }

  const Eigen::Vector3d light = Eigen::Vector3d(-0.3, -0.6, -1.0).normalized();
  r.image = RgbImage(w, h);
  r.depth.resize(h, w);
  r.object.resize(h, w);
  for (auto& n : r.normals) n.resize(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto& p = r.primitives[static_cast<size_t>(prim(y, x))];
      r.depth(y, x) = static_cast<float>(depth_on(p, ray(x + 0.5, y + 0.5)));
      for (int c = 0; c < 3; ++c) r.normals[static_cast<size_t>(c)](y, x) = static_cast<float>(p.normal(c));
      r.object(y, x) = p.object;
      const double shade = 0.45 + 0.55 * std::max(0.0, p.normal.dot(light));
      for (int c = 0; c < 3; ++c)
        r.image.at(x, y, c) = static_cast<std::uint8_t>(std::lround(std::clamp(p.albedo(c) * shade, 0.0, 1.0) * 255.0));
    }
  return r;
}

GeneratedSample generate(const SceneSpec& spec) {
  const Rendering r = render(spec);
  const CameraModel cam = spec.camera();
  const int w = spec.width, h = spec.height;
  Rng rng(derive_seed(spec.seed, 0x51));
  GeneratedSample g;
  g.spec = spec;
  auto& s = g.sample;
  s.image_id = spec.image_id;
  s.image = r.image;
  s.depth = r.depth;
  s.normals = r.normals;
  s.source = "synthgen";
  auto normalized = [&](const Eigen::Vector3d& p) {
    const Eigen::Vector2d q = project_px(p, cam);
    return Eigen::Vector2d(q.x() / w, q.y() / h);
  };

  for (int k = 0; k < static_cast<int>(spec.objects.size()); ++k) {
    const ObjectSpec& o = spec.objects[static_cast<size_t>(k)];
    const ObjectGeometry geo = object_geometry(spec, k);
    ObjectTruth t;
    t.object = k;
    t.mask = (r.object == k).cast<std::uint8_t>();
    t.face_normal = geo.face_normal;
    if (t.mask.cast<int>().sum() < 20) throw LayoutError("object " + std::to_string(k) + " is nearly invisible");

    QueryAnnotation q;
    q.point = sample_inside(r.object, k, 2, rng);
    q.mask = Mask::encode(t.mask);
    const auto b = q.mask->pixel_bounds();
    q.box = BoxXYXY{static_cast<double>((*b)[0]) / w, static_cast<double>((*b)[1]) / h,
                    static_cast<double>((*b)[2]) / w, static_cast<double>((*b)[3]) / h};
    q.rigidity = RigidityClass::kRigid;
    switch (o.kind) {
      case ObjectKind::kDoor: {
        q.movable = MovableClass::kOneHand;
        q.articulation = ArticulationClass::kRotation;
        q.action = ActionClass::kPull;
        const auto& [h0, h1] = *geo.hinge;
        q.axis = line_through(normalized(h0), normalized(h1));
        Eigen::Vector3d dir = (h1 - h0).normalized();
        if (dir.y() < -1e-9 || (std::abs(dir.y()) <= 1e-9 && dir.x() < 0)) dir = -dir;
        t.hinge = Line3D{0.5 * (h0 + h1), dir};
        break;
      }
      case ObjectKind::kDrawer:
        q.movable = MovableClass::kOneHand;
        q.articulation = ArticulationClass::kTranslation;
        q.action = ActionClass::kPull;
        break;
      case ObjectKind::kBox:
        q.movable = o.large() ? MovableClass::kTwoHands : MovableClass::kOneHand;
        q.articulation = ArticulationClass::kFreeform;
        q.action = o.large() ? ActionClass::kPush : ActionClass::kOther;
        break;
      case ObjectKind::kBlob:
        q.movable = MovableClass::kOneHand;
        q.rigidity = RigidityClass::kNonrigid;
        q.action = ActionClass::kOther;
        break;
    }
    if (geo.handle_center && (o.kind == ObjectKind::kDoor || o.kind == ObjectKind::kDrawer)) {
      const Eigen::Vector2d kp = normalized(*geo.handle_center);
      q.affordance = AffordanceTarget{QueryPoint{kp.x(), kp.y()}, 5};
    }
    t.query = static_cast<int>(s.queries.size());
    s.queries.push_back(std::move(q));
    g.objects.push_back(std::move(t));
  }

  for (int i = 0; i < spec.fixture_queries; ++i) {
    int label = i % 2 == 0 ? kWall : kFloor;
    if ((r.object == label).count() < 50) label = kWall;
    QueryAnnotation q;
    q.point = sample_inside(r.object, label, 3, rng);
    q.movable = MovableClass::kFixture;
    s.queries.push_back(std::move(q));
  }
  if (s.queries.size() > static_cast<size_t>(kMaxQueries)) throw LayoutError("too many queries");
  validate(s);
  return g;
}

SceneSpec random_spec(std::uint64_t seed, int width, int height, std::optional<ObjectKind> first_kind) {
  Rng rng(seed);
  SceneSpec spec;
  spec.seed = seed;
  spec.image_id = default_id(seed);
  spec.width = width;
  spec.height = height;
  spec.wall_distance = rng.uniform(3.0, 4.5);
  spec.camera_height = rng.uniform(1.2, 1.6);
  spec.yaw = rng.uniform(-0.2, 0.2);
  spec.pitch = rng.uniform(0.05, 0.25);
  for (int c = 0; c < 3; ++c) {
    spec.wall_albedo(c) += rng.uniform(-0.06, 0.06);
    spec.floor_albedo(c) += rng.uniform(-0.06, 0.06);
  }
  spec.fixture_queries = rng.uniform_int(2, 3);
  const int n = rng.uniform_int(1, 3);
  const CameraModel cam = spec.camera();
  // thresholds are set for 256 px wide images and scale with the width
  const double px = width / 256.0;
  const double margin = 4.0 * px;
  const double min_side = 12.0 * px;
  std::vector<std::array<double, 4>> boxes;
  for (int k = 0; k < n; ++k) {
    const ObjectKind kind =
        k == 0 && first_kind ? *first_kind : static_cast<ObjectKind>(rng.uniform_int(0, kNumObjectKinds - 1));
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      spec.objects.push_back(random_object(kind, rng, spec));
      try {
        const auto b = pixel_bbox(object_geometry(spec, k), cam);
        bool ok = b[0] >= margin && b[1] >= margin && b[2] <= width - margin && b[3] <= height - margin &&
                  b[2] - b[0] >= min_side && b[3] - b[1] >= min_side;
        for (const auto& o : boxes)
          ok = ok && (b[0] > o[2] + margin || o[0] > b[2] + margin || b[1] > o[3] + margin || o[1] > b[3] + margin);
        if (ok) {
          boxes.push_back(b);
          placed = true;
        }
      } catch (const LayoutError&) {
      }
      if (!placed) spec.objects.pop_back();
    }
    if (!placed) throw LayoutError("could not place object " + std::to_string(k) + " after 100 attempts");
  }
  return spec;
}

std::vector<GeneratedSample> generate_split(int n, std::uint64_t seed, int width, int height) {
  if (n < 1) throw std::invalid_argument("generate_split: n must be >= 1");
  std::vector<GeneratedSample> out;
  for (int i = 0; i < n; ++i) {
    const auto kind = static_cast<ObjectKind>(i % kNumObjectKinds);
    const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(i));
    for (std::uint64_t attempt = 0;; ++attempt) {
      try {
        SceneSpec spec = random_spec(attempt == 0 ? s : derive_seed(s, attempt), width, height, kind);
        char id[48];
        std::snprintf(id, sizeof(id), "synth_%016llx_%05d", static_cast<unsigned long long>(seed), i);
        spec.image_id = id;
        out.push_back(generate(spec));
        break;
      } catch (const LayoutError&) {
        if (attempt >= 20) throw;
      }
    }
  }
  return out;
}

BinaryGrid render_opened_door(const SceneSpec& spec, int object, double angle) {
  SceneSpec s = spec;
  auto& o = s.objects.at(static_cast<size_t>(object));
  if (o.kind != ObjectKind::kDoor) throw std::invalid_argument("render_opened_door: object is not a door");
  o.open_angle = angle;
  return (render(s).object == object).cast<std::uint8_t>();
}

BinaryGrid render_pulled_drawer(const SceneSpec& spec, int object, double offset) {
  SceneSpec s = spec;
  auto& o = s.objects.at(static_cast<size_t>(object));
  if (o.kind != ObjectKind::kDrawer) throw std::invalid_argument("render_pulled_drawer: object is not a drawer");
  o.pull_offset = offset;
  return (render(s).object == object).cast<std::uint8_t>();
}

}  // namespace i3d::synth
