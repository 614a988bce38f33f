// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wz/camera_json.hpp"
#include "wz/depthreg.hpp"
#include "wz/diffopt.hpp"
#include "wz/error.hpp"
#include "wz/fixture.hpp"
#include "wz/providers.hpp"
#include "wz/rasterizer.hpp"
#include "wz/sceneio.hpp"
#include "wz/service.hpp"
#include "wz/synth.hpp"

namespace wz::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUser = 1;
inline constexpr int kExitInternal = 2;

/// Environment variable naming the provider used when --provider is absent.
inline constexpr const char* kProviderEnv = "WZ_PROVIDER";

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::Provider:
    case ErrorCode::InvariantViolation:
      return kExitInternal;
    default:
      return kExitUser;
  }
}

/// "procedural" or "cmd:<shell command>".
inline std::shared_ptr<DetailProvider> make_provider(std::string spec, const std::filesystem::path& workdir,
                                                     bool aux_views = false) {
  if (spec.empty()) {
    const char* env = std::getenv(kProviderEnv);
    spec = env && *env ? env : "procedural";
  }
  if (spec == "procedural") return std::make_shared<ProceduralProvider>();
  if (spec.rfind("cmd:", 0) == 0 && spec.size() > 4) {
    return std::make_shared<CommandProvider>(spec.substr(4), workdir, aux_views);
  }
  throw Error(ErrorCode::InvalidArgument, "unknown provider '" + spec + "' (use procedural or cmd:COMMAND)");
}

inline std::vector<Camera> load_poses(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::InvalidCamera, path.string() + ": " + e.what());
  }
  std::vector<Camera> out;
  if (j.is_array()) {
    for (const auto& c : j) out.push_back(camera_from_json(c));
  } else {
    out.push_back(camera_from_json(j));
  }
  if (out.empty()) throw Error(ErrorCode::InvalidCamera, path.string() + ": no cameras");
  return out;
}

inline Vec2 parse_pair(const std::string& s) {
  const auto comma = s.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument("missing comma");
    std::size_t used = 0;
    const double u = std::stod(s.substr(0, comma), &used);
    const double v = std::stod(s.substr(comma + 1), &used);
    return {u, v};
  } catch (const std::exception&) {
    throw Error(ErrorCode::InvalidArgument, "expected U,V but got '" + s + "'");
  }
}

struct Options {
  // shared
  std::string scene, out, provider, workdir, trace;
  std::uint64_t seed = 0;
  int steps = 500;
  int aux = 0;
  // init / fixture
  std::string image, depth, pose;
  double focal = kDefaultFocal;
  double depth_png_scale = 1000.0;
  int size = 64;
  // zoom
  std::uint32_t layer = 0;
  std::string center;
  double factor = kDefaultZoomFactor;
  std::string prompt;
  std::string segments;
  // render
  std::optional<double> fx;
  bool no_modulation = false;
  std::string depth_out;
  // sweep
  std::uint32_t from_layer = 0, to_layer = 0;
  int frames = 100;
  // serve
  unsigned short port = 8765;
  int jpeg = 0;
  bool autosave = false;
  // bench
  std::string poses;
  int repeat = 3;
};

namespace detail {

inline SynthConfig synth_config(const Options& o) {
  SynthConfig cfg;
  cfg.optim.steps = o.steps;
  cfg.orbit.views = o.aux;
  return cfg;
}

inline std::filesystem::path workdir(const Options& o) {
  if (!o.workdir.empty()) return o.workdir;
  return std::filesystem::temp_directory_path() / "wz-provider";
}

inline int cmd_fixture(const Options& o) {
  if (o.out.empty()) throw Error(ErrorCode::InvalidArgument, "--out is required");
  PlaneFixtureParams p;
  p.width = p.height = o.size;
  p.focal = o.focal;
  p.seed = o.seed + 1;
  const PlaneFixture f = make_plane_fixture(p);
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  write_png(dir / "image.png", f.image);
  save_depth(dir / "depth.bin", f.depth);
  const std::string cam = camera_to_json(f.camera).dump(2);
  write_file(dir / "camera.json", std::span(reinterpret_cast<const std::uint8_t*>(cam.data()), cam.size()));
  std::cout << "wrote " << (dir / "image.png").string() << ", " << (dir / "depth.bin").string() << ", "
            << (dir / "camera.json").string() << "\n";
  return kExitOk;
}

inline int cmd_init(const Options& o) {
  const RgbImage image = read_png(o.image);
  const DepthMap depth = load_depth_any(o.depth, o.depth_png_scale);
  const Camera camera = o.pose.empty() ? Camera::pinhole(Mat4::Identity(), o.focal, o.focal, image.width(), image.height())
                                       : load_camera(o.pose);
  auto provider = make_provider(o.provider, workdir(o));
  const LayerFit fit = build_root_layer(image, depth, camera, *provider, synth_config(o), o.seed);
  MultiScaleScene scene;
  scene.add_layer(fit.layer);
  const std::size_t bytes = save_scene(scene.snapshot(), o.out);
  if (!o.trace.empty()) write_trace_csv(o.trace, fit.trace);
  std::cout << "layer 0: " << fit.layer.surfels.size() << " surfels, loss " << fit.initial_loss << " -> "
            << fit.final_loss << ", " << bytes << " bytes\n";
  return kExitOk;
}

inline int cmd_zoom(const Options& o) {
  auto scene = load_scene(o.scene);
  auto provider = make_provider(o.provider, workdir(o));
  DetailRequest req;
  req.parent_layer = o.layer;
  req.zoom_center = parse_pair(o.center);
  req.zoom_factor = o.factor;
  req.prompt = o.prompt;
  req.seed = o.seed;
  std::optional<SegmentSet> segments;
  if (!o.segments.empty()) segments = load_segments(o.segments);
  const SynthResult r = synthesize_scale(*scene, req, *provider, synth_config(o), segments ? &*segments : nullptr);
  save_scene(scene->snapshot(), o.out);
  if (!o.trace.empty()) write_trace_csv(o.trace, r.fit.trace);
  std::cout << r.layer << "\n";
  return kExitOk;
}

inline int cmd_render(const Options& o) {
  auto scene = load_scene(o.scene);
  const SceneSnapshot snap = scene->snapshot();
  Camera cam;
  if (!o.pose.empty()) {
    cam = load_camera(o.pose);
  } else {
    cam = snap.layer(o.layer).creation_camera;
  }
  if (o.fx) {
    const double ratio = cam.fy / cam.fx;
    cam.fx = *o.fx;
    cam.fy = *o.fx * ratio;
    cam.validate();
  }
  RenderConfig cfg;
  cfg.modulation = !o.no_modulation;
  RenderStats stats;
  const Frame frame = render_color(snap, cam, cfg, &stats);
  write_png(o.out, frame.color);
  if (!o.depth_out.empty()) save_depth(o.depth_out, frame.depth);
  std::cout << "visible " << stats.visible << " composited " << stats.composited << "\n";
  return kExitOk;
}

inline int cmd_sweep(const Options& o) {
  auto scene = load_scene(o.scene);
  const SceneSnapshot snap = scene->snapshot();
  const auto cams = focal_sweep(snap, o.from_layer, o.to_layer, o.frames);
  const std::filesystem::path dir = o.out;
  std::filesystem::create_directories(dir);
  std::vector<double> diffs;
  RgbImage prev;
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const Frame f = render_color(snap, cams[i]);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_png(dir / name, f.color);
    if (i > 0) diffs.push_back(mean_abs_error(prev, f.color));
    prev = f.color;
  }
  const double med = median(diffs).value_or(0.0);
  const double peak = diffs.empty() ? 0.0 : *std::max_element(diffs.begin(), diffs.end());
  std::cout << "frames " << cams.size() << " median_diff " << med << " max_diff " << peak << " max_ratio "
            << (med > 0.0 ? peak / med : 0.0) << "\n";
  return kExitOk;
}

inline int cmd_serve(const Options& o) {
  std::shared_ptr<MultiScaleScene> scene = load_scene(o.scene);
  ServiceConfig cfg;
  cfg.synth = synth_config(o);
  cfg.jpeg_quality = o.jpeg;
  if (o.autosave) cfg.autosave = o.scene;
  std::cout << "serving " << o.scene << " on port " << o.port << std::endl;
  serve(scene, o.port, make_provider(o.provider, workdir(o)), cfg);
  return kExitOk;
}

inline int cmd_bench(const Options& o) {
  auto scene = load_scene(o.scene);
  const SceneSnapshot snap = scene->snapshot();
  std::vector<Camera> cams;
  if (!o.poses.empty()) {
    cams = load_poses(o.poses);
  } else {
    for (std::size_t i = 0; i < snap.layer_count(); ++i) cams.push_back(snap.layer(i).creation_camera);
  }
  if (o.repeat < 1) throw Error(ErrorCode::InvalidArgument, "--repeat must be at least 1");
  struct Totals {
    std::size_t visible = 0, composited = 0;
    double seconds = 0.0;
  } on, off;
  auto measure = [&](const Camera& cam, bool modulation, Totals& t) {
    RenderConfig cfg;
    cfg.modulation = modulation;
    RenderStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < o.repeat; ++r) render_color(snap, cam, cfg, &stats);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    t.visible += stats.visible;
    t.composited += stats.composited;
    t.seconds += s;
    return std::make_pair(stats, o.repeat / s);
  };
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const auto [son, fps_on] = measure(cams[i], true, on);
    const auto [soff, fps_off] = measure(cams[i], false, off);
    std::cout << "pose " << i << ": modulation on visible " << son.visible << " composited " << son.composited
              << " fps " << fps_on << " | off visible " << soff.visible << " composited " << soff.composited
              << " fps " << fps_off << "\n";
  }
  const double frames = static_cast<double>(cams.size()) * o.repeat;
  std::cout << "total: on composited " << on.composited << " fps " << frames / on.seconds << " | off composited "
            << off.composited << " fps " << frames / off.seconds << " | reduction "
            << (off.composited ? 100.0 * (1.0 - static_cast<double>(on.composited) / off.composited) : 0.0)
            << "%\n";
  return kExitOk;
}

}  // namespace detail

/// Entry point; returns 0 on success, 1 on user error, 2 on internal error.
inline int run(int argc, char** argv) {
  CLI::App app{"Multi-scale Gaussian surfel engine"};
  app.require_subcommand(1);
  Options o;

  auto* fixture = app.add_subcommand("fixture", "Write a synthetic plane fixture (image.png, depth.bin, camera.json)");
  fixture->add_option("--out", o.out, "Output directory")->required();
  fixture->add_option("--size", o.size, "Image width and height");
  fixture->add_option("--focal", o.focal, "Focal length in pixels");
  fixture->add_option("--seed", o.seed, "Texture seed");

  auto* init = app.add_subcommand("init", "Build the root layer from an image and its depth");
  init->add_option("--image", o.image, "PNG image")->required()->check(CLI::ExistingFile);
  init->add_option("--depth", o.depth, "Depth (.bin float map or 16-bit .png)")->required()->check(CLI::ExistingFile);
  init->add_option("--depth-scale", o.depth_png_scale, "16-bit PNG value per depth unit");
  init->add_option("--pose", o.pose, "Camera JSON (default: identity pose, --focal, centered)");
  init->add_option("--focal", o.focal, "Focal length when no pose file is given");
  init->add_option("--aux", o.aux, "Auxiliary views");
  init->add_option("--steps", o.steps, "Optimization steps");
  init->add_option("--provider", o.provider, "procedural or cmd:COMMAND");
  init->add_option("--seed", o.seed, "Seed");
  init->add_option("--trace", o.trace, "Loss trace CSV");
  init->add_option("--out", o.out, "Output scene file")->required();

  auto* zoom = app.add_subcommand("zoom", "Synthesize a finer layer inside an existing one");
  zoom->add_option("--scene", o.scene, "Scene file")->required()->check(CLI::ExistingFile);
  zoom->add_option("--layer", o.layer, "Parent layer")->required();
  zoom->add_option("--center", o.center, "Zoom center U,V in the parent view")->required();
  zoom->add_option("--factor", o.factor, "Zoom factor");
  zoom->add_option("--prompt", o.prompt, "Prompt");
  zoom->add_option("--seed", o.seed, "Seed");
  zoom->add_option("--provider", o.provider, "procedural or cmd:COMMAND");
  zoom->add_option("--workdir", o.workdir, "Work directory for command providers");
  zoom->add_option("--segments", o.segments, "Segment labels (16-bit PNG or run-length JSON)");
  zoom->add_option("--aux", o.aux, "Auxiliary views");
  zoom->add_option("--steps", o.steps, "Optimization steps");
  zoom->add_option("--trace", o.trace, "Loss trace CSV");
  zoom->add_option("--out", o.out, "Output scene file")->required();

  auto* render = app.add_subcommand("render", "Render one frame");
  render->add_option("--scene", o.scene, "Scene file")->required()->check(CLI::ExistingFile);
  auto* pose_opt = render->add_option("--pose", o.pose, "Camera JSON");
  auto* layer_opt = render->add_option("--layer", o.layer, "Use this layer's creation camera");
  pose_opt->excludes(layer_opt);
  render->add_option("--fx", o.fx, "Override focal length (fy keeps its ratio)");
  render->add_flag("--no-modulation", o.no_modulation, "Disable scale-aware opacity");
  render->add_option("--out", o.out, "Output PNG")->required();
  render->add_option("--depth-out", o.depth_out, "Output depth map");

  auto* sweep = app.add_subcommand("sweep", "Render a focal sweep between two layers");
  sweep->add_option("--scene", o.scene, "Scene file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--from-layer", o.from_layer, "Start layer")->required();
  sweep->add_option("--to-layer", o.to_layer, "End layer")->required();
  sweep->add_option("--frames", o.frames, "Frame count");
  sweep->add_option("--out", o.out, "Output directory")->required();

  auto* serve_cmd = app.add_subcommand("serve", "Run the websocket render service");
  serve_cmd->add_option("--scene", o.scene, "Scene file")->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--port", o.port, "TCP port");
  serve_cmd->add_option("--provider", o.provider, "procedural or cmd:COMMAND");
  serve_cmd->add_option("--workdir", o.workdir, "Work directory for command providers");
  serve_cmd->add_option("--aux", o.aux, "Auxiliary views per zoom");
  serve_cmd->add_option("--steps", o.steps, "Optimization steps per zoom");
  serve_cmd->add_option("--jpeg", o.jpeg, "Stream JPEG frames at this quality instead of PNG");
  serve_cmd->add_flag("--autosave", o.autosave, "Rewrite the scene file after every commit");

  auto* bench = app.add_subcommand("bench", "Compare rendering cost with modulation on and off");
  bench->add_option("--scene", o.scene, "Scene file")->required()->check(CLI::ExistingFile);
  bench->add_option("--poses", o.poses, "Camera JSON (object or array); default: every creation camera");
  bench->add_option("--repeat", o.repeat, "Renders per pose and setting");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*fixture) return detail::cmd_fixture(o);
    if (*init) return detail::cmd_init(o);
    if (*zoom) return detail::cmd_zoom(o);
    if (*render) {
      if (o.pose.empty() && layer_opt->count() == 0) throw Error(ErrorCode::InvalidArgument, "--pose or --layer is required");
      return detail::cmd_render(o);
    }
    if (*sweep) return detail::cmd_sweep(o);
    if (*serve_cmd) return detail::cmd_serve(o);
    if (*bench) return detail::cmd_bench(o);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUser;
}

}  // namespace wz::cli
