#include "i3d/io.hpp"
#include "i3d/service.hpp"
#include "i3d/synthgen.hpp"

#include <doctest.h>
#include <httplib.h>

#include <filesystem>
#include <thread>

#include <unistd.h>

using namespace i3d;
using namespace i3d::service;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& dir() {
  static const fs::path d = [] {
    const fs::path p = fs::temp_directory_path() / ("i3d_service_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return d;
}

void set_bias(Network& net, const std::string& name, int index, float value) {
  for (auto* p : net.params())
    if (p->name == name) {
      p->value.setZero();
      p->value(0, index) = value;
      return;
    }
  throw std::logic_error("no parameter " + name);
}

void set_const(Network& net, const std::string& name, float value) {
  for (auto* p : net.params())
    if (p->name == name) {
      p->value.setConstant(value);
      return;
    }
  throw std::logic_error("no parameter " + name);
}

/// Untrained weights with the heads forced to a fixed answer: movable by one
/// hand, the given articulation, and a mask covering the whole image.
fs::path rigged_checkpoint(const std::string& file, ArticulationClass art, MovableClass mov) {
  Network net(NetworkConfig::toy());
  set_const(net, "head.movable.w", 0.0f);
  set_bias(net, "head.movable.b", static_cast<int>(mov), 20.0f);
  set_const(net, "head.articulation.w", 0.0f);
  set_bias(net, "head.articulation.b", static_cast<int>(art), 20.0f);
  set_const(net, "mask_decoder.upscale.w", 0.0f);
  set_const(net, "mask_decoder.upscale.b", 1.0f);
  set_const(net, "mask_decoder.hyper.1.w", 0.0f);
  set_const(net, "mask_decoder.hyper.1.b", 1.0f);
  const fs::path p = dir() / file;
  write_checkpoint(p, checkpoint_of(net));
  return p;
}

const fs::path& translation_ckpt() {
  static const fs::path p = rigged_checkpoint("drawer.ckpt", ArticulationClass::kTranslation, MovableClass::kOneHand);
  return p;
}

std::string image_b64(int w = 128, int h = 96) {
  return base64_encode(encode_png(synth::generate_split(1, 9, w, h).front().sample.image));
}

std::string predict_body(int n_points, const std::string& image) {
  json pts = json::array();
  for (int i = 0; i < n_points; ++i) pts.push_back({{"x", 0.1 + 0.05 * i}, {"y", 0.5}});
  return json{{"image", image}, {"points", pts}}.dump();
}

int status_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status;
  }
  return 200;
}

}  // namespace

TEST_CASE("health reports the loaded checkpoint") {
  const Service none;
  CHECK(none.health()["status"] == "degraded");
  CHECK(none.health()["checkpoint_id"].is_null());
  CHECK(status_of([&] { none.predict(predict_body(1, image_b64())); }) == 503);

  const Service svc(translation_ckpt());
  const json h = svc.health();
  CHECK(h["status"] == "ok");
  CHECK(h["checkpoint_id"] == sha256_hex(read_file(translation_ckpt())));
  CHECK(h["config"]["embed_dim"] == NetworkConfig::toy().embed_dim);
}

TEST_CASE("predict validates its input") {
  Limits lim;
  lim.max_image_side = 200;
  const Service svc(translation_ckpt(), lim);
  const std::string img = image_b64();
  CHECK(status_of([&] { svc.predict(predict_body(0, img)); }) == 400);
  CHECK(status_of([&] { svc.predict("{not json"); }) == 400);
  CHECK(status_of([&] { svc.predict(R"({"image": "@@@", "points": [{"x": 0.5, "y": 0.5}]})"); }) == 400);
  CHECK(status_of([&] { svc.predict(predict_body(1, base64_encode("not a png"))); }) == 400);
  CHECK(status_of([&] { svc.predict(json{{"image", img}, {"points", {{{"x", 1.5}, {"y", 0.5}}}}}.dump()); }) == 400);
  CHECK(status_of([&] { svc.predict(predict_body(16, img)); }) == 422);
  CHECK(status_of([&] { svc.predict(predict_body(1, image_b64(256, 192))); }) == 413);
  CHECK(status_of([&] { svc.predict(predict_body(15, img)); }) == 200);

  Limits tiny;
  tiny.max_body_bytes = 100;
  const Service small(translation_ckpt(), tiny);
  CHECK(status_of([&] { small.predict(predict_body(1, img)); }) == 413);
}

TEST_CASE("predict responses are deterministic and well formed") {
  const Service svc(translation_ckpt());
  const std::string body = predict_body(3, image_b64());
  const std::string a = svc.predict(body);
  CHECK(svc.predict(body) == a);
  CHECK(Service(translation_ckpt()).predict(body) == a);

  const json r = json::parse(a);
  CHECK(r["points"].size() == 3);
  CHECK(r["depth"].is_null());
  CHECK(r["image"]["width"] == 128);
  for (const auto& p : r["points"]) {
    for (const char* head : {"movable", "rigidity", "articulation", "action"}) {
      double sum = 0;
      for (const auto& [k, v] : p[head]["probabilities"].items()) sum += v.get<double>();
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(p["movable"]["label"] == "one_hand");
    CHECK(p["articulation"]["label"] == "translation");
    CHECK(p["axis"].is_null());
    CHECK(p["mask"]["height"] == 96);
  }
  const json d = json::parse(svc.predict(json{{"image", image_b64()}, {"points", {{{"x", 0.5}, {"y", 0.5}}}},
                                              {"include_depth", true}}
                                             .dump()));
  CHECK_FALSE(d["depth"].is_null());
}

TEST_CASE("rotation predictions carry an axis") {
  const Service svc(rigged_checkpoint("door.ckpt", ArticulationClass::kRotation, MovableClass::kOneHand));
  const json r = json::parse(svc.predict(predict_body(2, image_b64())));
  for (const auto& p : r["points"]) {
    CHECK(p["articulation"]["label"] == "rotation");
    CHECK(p["axis"].contains("theta"));
  }
}

TEST_CASE("render returns a cached clip") {
  Service svc(translation_ckpt());
  const std::string body = json{{"image", image_b64()}, {"point", {{"x", 0.5}, {"y", 0.5}}}, {"parameters", {0.0}}}.dump();
  const json m = svc.render(body);
  REQUIRE(m["frames"].size() == 1);
  const auto h = m["frames"][0]["homography"].get<std::vector<double>>();
  CHECK(h == std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(m["cached"] == false);
  CHECK(m["kind"] == "translation");

  const json again = svc.render(body);
  CHECK(again["cached"] == true);
  CHECK(again["frames"][0]["url"] == m["frames"][0]["url"]);
  const auto png = svc.frame_png(m["key"], 0);
  REQUIRE(png);
  CHECK(decode_png(*png).width == 128);
  CHECK_FALSE(svc.frame_png(m["key"], 1));
  CHECK_FALSE(svc.frame_png(std::string(64, '0'), 0));

  const json two = svc.render(
      json{{"image", image_b64()}, {"point", {{"x", 0.5}, {"y", 0.5}}}, {"parameters", {0.0, 0.1}}}.dump());
  CHECK(two["frames"].size() == 2);
  CHECK(two["key"] != m["key"]);

  Service fixed(rigged_checkpoint("fixture.ckpt", ArticulationClass::kTranslation, MovableClass::kFixture));
  CHECK(status_of([&] { fixed.render(body); }) == 422);
  Service freeform(rigged_checkpoint("free.ckpt", ArticulationClass::kFreeform, MovableClass::kOneHand));
  CHECK(status_of([&] { freeform.render(body); }) == 422);
  CHECK(status_of([&] { svc.render(json{{"image", image_b64()}}.dump()); }) == 400);
}

TEST_CASE("metric depth has the requested median") {
  Grid g(3, 3);
  g << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  const GridF d = metric_depth(-g);
  CHECK(d(1, 1) == doctest::Approx(3.5));
  CHECK(d.minCoeff() > 0);
}

TEST_CASE("HTTP round trip") {
  Service svc(translation_ckpt());
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread t([&] { server.listen(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);

  auto health = cli.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["status"] == "ok");
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  const std::string body = predict_body(2, image_b64());
  auto a = cli.Post("/predict", body, "application/json");
  auto b = cli.Post("/predict", body, "application/json");
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->status == 200);
  CHECK(a->body == b->body);
  CHECK(a->body == svc.predict(body));

  auto bad = cli.Post("/predict", predict_body(0, image_b64()), "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(json::parse(bad->body)["status"] == 400);

  auto r = cli.Post("/render",
                    json{{"image", image_b64()}, {"point", {{"x", 0.5}, {"y", 0.5}}}, {"parameters", {0.0}}}.dump(),
                    "application/json");
  REQUIRE(r);
  CHECK(r->status == 200);
  const std::string url = json::parse(r->body)["frames"][0]["url"];
  auto frame = cli.Get(url);
  REQUIRE(frame);
  CHECK(frame->status == 200);
  CHECK(frame->get_header_value("Content-Type") == "image/png");
  auto missing = cli.Get("/render/" + std::string(64, 'a') + "/0.png");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  server.stop();
  t.join();
  fs::remove_all(dir());
}
