#include "i3d/io.hpp"
#include "i3d/metrics.hpp"
#include "i3d/network.hpp"
#include "i3d/renderer.hpp"
#include "i3d/service.hpp"
#include "i3d/synthgen.hpp"
#include "i3d/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace i3d;

namespace {

QueryPoint parse_xy(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw std::invalid_argument("point must be X,Y: " + s);
  const double x = std::stod(s.substr(0, comma));
  const double y = std::stod(s.substr(comma + 1));
  if (!(x >= 0 && x <= 1 && y >= 0 && y <= 1)) throw std::invalid_argument("point must be normalized to [0, 1]: " + s);
  return {x, y};
}

bool has_samples(const fs::path& dir) {
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") return true;
  return false;
}

/// The named split under data, else data itself when it holds samples, else
/// the first of test, val, train that exists.
fs::path split_dir(const fs::path& data, const std::string& split) {
  if (!split.empty()) return fs::is_directory(data / split) ? data / split : data;
  if (has_samples(data)) return data;
  for (const char* s : {"test", "val", "train"})
    if (fs::is_directory(data / s)) return data / s;
  return data;
}

Network load_or_init(const std::optional<fs::path>& ckpt, std::string& id) {
  if (!ckpt) return Network(NetworkConfig::toy());
  id = sha256_hex(read_file(*ckpt));
  return network_from_checkpoint(read_checkpoint(*ckpt));
}

int gen_data(const fs::path& out, int n, std::uint64_t seed, const std::string& split) {
  const fs::path dir = out / split;
  fs::create_directories(dir);
  const auto samples = synth::generate_split(n, seed);
  for (const auto& g : samples) serialize_sample(g.sample, dir);
  std::cout << nlohmann::json{{"dir", dir.string()}, {"written", samples.size()}}.dump() << "\n";
  return 0;
}

int train_cmd(const fs::path& data, const fs::path& out, const std::optional<fs::path>& config,
              const std::optional<fs::path>& resume) {
  train::RunConfig rc;
  if (config) rc = train::run_config_from_json(nlohmann::json::parse(read_file(*config)));
  const auto train_set = load_split(split_dir(data, "train"));
  std::vector<SceneSample> val_set;
  if (fs::is_directory(data / "val")) val_set = load_split(data / "val");
  Network net(rc.network);
  fs::create_directories(out);
  write_file_atomic(out / "config.json", train::to_json(rc).dump(2));
  train::TrainOptions opts;
  opts.out_dir = out;
  opts.resume = resume;
  opts.on_epoch = [](const train::EpochLog& l) {
    std::cerr << "epoch " << l.epoch << " loss " << l.total;
    if (l.val_total) std::cerr << " val " << *l.val_total;
    std::cerr << "\n";
  };
  const auto res = train::train(net, train_set, val_set, rc.train, rc.loss, opts);
  std::cout << nlohmann::json{{"best_checkpoint", res.best_checkpoint.string()},
                              {"last_checkpoint", res.last_checkpoint.string()},
                              {"best_score", res.best_score},
                              {"epochs", res.curve.size()}}
                   .dump()
            << "\n";
  return 0;
}

int eval_cmd(const fs::path& data, const fs::path& ckpt, const std::string& split) {
  const auto samples = load_split(split_dir(data, split));
  if (samples.empty()) throw std::invalid_argument("no samples under " + data.string());
  const Network net = network_from_checkpoint(read_checkpoint(ckpt));
  const auto report = metrics::evaluate(train::predict_all(net, samples), samples);
  std::cerr << report.table();
  std::cout << report.to_json().dump(2) << "\n";
  return 0;
}

int predict_cmd(const fs::path& image_path, const std::vector<std::string>& pts, const std::optional<fs::path>& ckpt,
                bool include_depth) {
  std::string id;
  const Network net = load_or_init(ckpt, id);
  const RgbImage image = read_png(image_path);
  std::vector<QueryPoint> points;
  for (const auto& s : pts) points.push_back(parse_xy(s));
  if (points.size() > static_cast<size_t>(kMaxQueries))
    throw std::invalid_argument("at most " + std::to_string(kMaxQueries) + " points");
  const ImagePrediction pred = net.predict(image, points);
  nlohmann::json out = service::prediction_to_json(pred, points, image.width, image.height, include_depth);
  out["checkpoint_id"] = ckpt ? nlohmann::json(id) : nlohmann::json(nullptr);
  std::cout << out.dump() << "\n";
  return 0;
}

int render_cmd(const fs::path& image_path, const std::string& pt, const fs::path& ckpt, const fs::path& out,
               const std::vector<double>& params, double vfov) {
  std::string id;
  const Network net = load_or_init(ckpt, id);
  service::RenderRequest req;
  req.image = read_png(image_path);
  req.point = parse_xy(pt);
  if (!params.empty()) req.parameters = params;
  req.vfov_deg = vfov;
  const auto outcome = service::render_query(net, req);
  fs::create_directories(out);
  nlohmann::json manifest = service::clip_manifest(outcome.clip);
  for (size_t i = 0; i < outcome.clip.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.png", i);
    write_png(out / name, render::composite(req.image, outcome.clip.frames[i]));
    manifest["frames"][i]["file"] = name;
  }
  manifest["checkpoint_id"] = id;
  write_file_atomic(out / "manifest.json", manifest.dump(2));
  std::cout << manifest.dump() << "\n";
  return 0;
}

int serve_cmd(const std::string& host, int port, std::optional<fs::path> ckpt) {
  if (!ckpt)
    if (const char* env = std::getenv("I3D_CHECKPOINT"); env && *env) ckpt = env;
  service::Service svc(ckpt);
  service::HttpServer server(svc);
  const int bound = server.bind(host, port);
  std::cerr << "serving on " << host << ":" << bound << " (" << svc.health().at("status").get<std::string>() << ")\n";
  server.listen();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-point 3D object interaction toolkit"};
  app.require_subcommand(1);

  fs::path out, data, image, checkpoint_path, config_path, resume_path;
  int n = 20, port = 8080;
  std::uint64_t seed = 0;
  std::string split = "train", eval_split, host = "127.0.0.1", point;
  std::vector<std::string> points;
  std::vector<double> params;
  bool include_depth = false;
  double vfov = 60.0;

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic split");
  gen->add_option("--out", out, "Dataset root")->required();
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Generator seed");
  gen->add_option("--split", split, "Split name");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--data", data, "Dataset root or split directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "Run directory")->required();
  auto* cfg_opt = tr->add_option("--config", config_path, "Run config JSON")->check(CLI::ExistingFile);
  auto* resume_opt = tr->add_option("--resume", resume_path, "Resume from last.ckpt")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--data", data, "Dataset root or split directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--checkpoint", checkpoint_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", eval_split, "Split name (default: auto)");

  auto* pr = app.add_subcommand("predict", "Predict for query points");
  pr->add_option("--image", image, "PNG image")->required()->check(CLI::ExistingFile);
  pr->add_option("--point", points, "Normalized X,Y; repeatable")->required();
  auto* pr_ckpt = pr->add_option("--checkpoint", checkpoint_path, "Checkpoint")->check(CLI::ExistingFile);
  pr->add_flag("--include-depth", include_depth, "Include the quantized depth grid");

  auto* rd = app.add_subcommand("render-interaction", "Animate the predicted articulation");
  rd->add_option("--image", image, "PNG image")->required()->check(CLI::ExistingFile);
  rd->add_option("--point", point, "Normalized X,Y")->required();
  rd->add_option("--checkpoint", checkpoint_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  rd->add_option("--out", out, "Clip directory")->required();
  rd->add_option("--params", params, "Angles (radians) or offsets per frame");
  rd->add_option("--vfov", vfov, "Vertical field of view in degrees");

  auto* sv = app.add_subcommand("serve", "Run the HTTP service");
  sv->add_option("--port", port, "Port (0 picks a free one)");
  sv->add_option("--host", host, "Bind address");
  auto* sv_ckpt = sv->add_option("--checkpoint", checkpoint_path, "Checkpoint (else $I3D_CHECKPOINT)")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  auto opt_path = [](const CLI::Option* o, const fs::path& p) { return o->count() ? std::optional<fs::path>(p) : std::nullopt; };
  try {
    if (gen->parsed()) return gen_data(out, n, seed, split);
    if (tr->parsed()) return train_cmd(data, out, opt_path(cfg_opt, config_path), opt_path(resume_opt, resume_path));
    if (ev->parsed()) return eval_cmd(data, checkpoint_path, eval_split);
    if (pr->parsed()) return predict_cmd(image, points, opt_path(pr_ckpt, checkpoint_path), include_depth);
    if (rd->parsed()) return render_cmd(image, point, checkpoint_path, out, params, vfov);
    if (sv->parsed()) return serve_cmd(host, port, opt_path(sv_ckpt, checkpoint_path));
  } catch (const service::ServiceError& e) {
    std::cerr << "error (" << e.status << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
