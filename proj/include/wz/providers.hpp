// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "wz/camera_json.hpp"
#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/rasterizer.hpp"

namespace wz {

// ---------------------------------------------------------------------------
// Deterministic noise

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view prompt) noexcept {
  return splitmix64(seed ^ splitmix64(fnv1a(prompt)));
}

/// Lattice value in [-1, 1].
inline double lattice_value(std::uint64_t seed, std::int64_t ix, std::int64_t iy) noexcept {
  const std::uint64_t h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(ix) * 0x632be59bd9b4e019ULL ^
                                                       static_cast<std::uint64_t>(iy)));
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

/// Smoothstep-interpolated value noise with lattice spacing `cell` pixels.
inline double value_noise(double x, double y, double cell, std::uint64_t seed) noexcept {
  const double gx = x / cell, gy = y / cell;
  const double fx = std::floor(gx), fy = std::floor(gy);
  const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
  double tx = gx - fx, ty = gy - fy;
  tx = tx * tx * (3.0 - 2.0 * tx);
  ty = ty * ty * (3.0 - 2.0 * ty);
  const double v00 = lattice_value(seed, ix, iy), v10 = lattice_value(seed, ix + 1, iy);
  const double v01 = lattice_value(seed, ix, iy + 1), v11 = lattice_value(seed, ix + 1, iy + 1);
  return (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
}

/// Octave sum of value noise, finest cell 1 px, coarsest cell `2^(octaves-1)`
/// times that; amplitudes halve per octave starting from `amplitude` at the
/// coarsest cell. Each block x block tile of the result has zero mean, so a
/// box downsample by `block` removes it completely.
inline Image<double> detail_noise(int width, int height, double coarsest_cell, int octaves, double amplitude,
                                  int block, std::uint64_t seed) {
  Image<double> n(width, height, 0.0);
  double cell = coarsest_cell, amp = amplitude;
  for (int o = 0; o < octaves; ++o) {
    const std::uint64_t s = splitmix64(seed + 0x1000 * static_cast<std::uint64_t>(o + 1));
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) n(x, y) += amp * value_noise(x + 0.5, y + 0.5, std::max(cell, 1.0), s);
    }
    cell *= 0.5;
    amp *= 0.5;
  }
  if (block > 1) {
    for (int by = 0; by < height; by += block) {
      for (int bx = 0; bx < width; bx += block) {
        const int x1 = std::min(width, bx + block), y1 = std::min(height, by + block);
        double sum = 0.0;
        for (int y = by; y < y1; ++y) {
          for (int x = bx; x < x1; ++x) sum += n(x, y);
        }
        const double mean = sum / static_cast<double>((x1 - bx) * (y1 - by));
        for (int y = by; y < y1; ++y) {
          for (int x = bx; x < x1; ++x) n(x, y) -= mean;
        }
      }
    }
  }
  return n;
}

/// Box downsample by an integer factor (partial border blocks averaged over
/// what they contain).
inline RgbImage box_downsample(const RgbImage& img, int factor) {
  const int w = (img.width() + factor - 1) / factor, h = (img.height() + factor - 1) / factor;
  RgbImage out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Rgb sum = Rgb::Zero();
      int n = 0;
      for (int yy = y * factor; yy < std::min(img.height(), (y + 1) * factor); ++yy) {
        for (int xx = x * factor; xx < std::min(img.width(), (x + 1) * factor); ++xx) {
          sum += img(xx, yy);
          ++n;
        }
      }
      out(x, y) = sum / n;
    }
  }
  return out;
}

/// Copies every unmasked pixel into masked ones by breadth-first growth from
/// the valid set (4-neighborhood; ties resolved by scan order). Returns false
/// when nothing is valid.
template <class T>
bool nearest_fill(Image<T>& img, const Mask& valid) {
  Mask done = valid;
  std::deque<std::pair<int, int>> queue;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (done(x, y)) queue.emplace_back(x, y);
    }
  }
  if (queue.empty()) return false;
  constexpr int dx[4] = {1, -1, 0, 0};
  constexpr int dy[4] = {0, 0, 1, -1};
  while (!queue.empty()) {
    const auto [x, y] = queue.front();
    queue.pop_front();
    for (int k = 0; k < 4; ++k) {
      const int nx = x + dx[k], ny = y + dy[k];
      if (!done.contains(nx, ny) || done(nx, ny)) continue;
      done(nx, ny) = 1;
      img(nx, ny) = img(x, y);
      queue.emplace_back(nx, ny);
    }
  }
  return true;
}

/// Depth map with invalid pixels filled from their nearest valid neighbor.
inline DepthMap fill_depth(const DepthMap& d) {
  Image<double> values = d.values;
  DepthMap out(d.width(), d.height());
  if (!nearest_fill(values, d.valid)) return out;
  for (int y = 0; y < d.height(); ++y) {
    for (int x = 0; x < d.width(); ++x) out.set(x, y, values(x, y));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Provider interface

struct DetailInput {
  const Frame& coarse;  // scene rendered at the zoom camera
  std::string context;  // semantic description of the parent-scale view
  std::string prompt;
  std::uint64_t seed = 0;
  Camera camera;
  double zoom_factor = 8.0;
};

struct DetailOutput {
  RgbImage image;
  std::optional<DepthMap> depth;
};

struct AuxInput {
  const Frame& conditioning;  // partial layer rendered at the auxiliary camera
  const Mask& mask;           // 1 where content must be synthesized
  Camera camera;
  std::string prompt;
  std::uint64_t seed = 0;
  int index = 0;
};

/// The boundary behind which super-resolution, editing, semantic-context and
/// video models live.
class DetailProvider {
 public:
  virtual ~DetailProvider() = default;

  virtual bool supplies_depth() const { return false; }
  virtual bool supplies_aux_views() const { return false; }

  /// Text describing the parent-scale view; empty by default.
  virtual std::string context(const Frame& /*parent_view*/) { return {}; }

  virtual DetailOutput synthesize(const DetailInput& input) = 0;

  /// Full auxiliary-view image; only called when supplies_aux_views().
  virtual RgbImage fill_aux(const AuxInput& /*input*/) {
    throw Error(ErrorCode::Provider, "provider does not synthesize auxiliary views");
  }
};

struct ProceduralParams {
  int octaves = 4;
  double amplitude = 0.08;      // coarsest octave, color units
  double depth_relief = 0.005;  // fraction of local depth
};

/// Deterministic stand-in for the learned detail stack: adds zero-block-mean
/// multi-octave value noise on top of the upsampled coarse render.
inline DetailOutput procedural_detail(const Frame& coarse, std::string_view prompt, std::uint64_t seed,
                                      double zoom_factor, const ProceduralParams& params = {}) {
  const int w = coarse.color.width(), h = coarse.color.height();
  const std::uint64_t s = mix_seed(seed, prompt);
  const int block = std::max(1, static_cast<int>(std::lround(zoom_factor)));
  const double coarsest = std::max(1.0, std::ldexp(1.0, params.octaves - 1));
  DetailOutput out;
  out.image = RgbImage(w, h);
  Image<double> channels[3];
  for (int c = 0; c < 3; ++c) {
    channels[c] = detail_noise(w, h, coarsest, params.octaves, params.amplitude, block, splitmix64(s + c));
  }
  const Image<double> relief = detail_noise(w, h, coarsest, params.octaves, 1.0, block, splitmix64(s + 17));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Rgb base = coarse.color(x, y);
      out.image(x, y) = (base + Rgb(channels[0](x, y), channels[1](x, y), channels[2](x, y))).cwiseMax(0.0).cwiseMin(1.0);
    }
  }
  DepthMap depth(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!coarse.depth.is_valid(x, y)) continue;
      const double d = coarse.depth(x, y);
      depth.set(x, y, d * (1.0 + params.depth_relief * std::clamp(relief(x, y), -1.0, 1.0)));
    }
  }
  out.depth = std::move(depth);
  return out;
}

class ProceduralProvider final : public DetailProvider {
 public:
  explicit ProceduralProvider(ProceduralParams params = {}) : params_(params) {}

  bool supplies_depth() const override { return true; }

  DetailOutput synthesize(const DetailInput& in) override {
    return procedural_detail(in.coarse, in.prompt, in.seed, in.zoom_factor, params_);
  }

 private:
  ProceduralParams params_;
};

/// Fills masked pixels with the nearest unmasked color plus seeded noise.
inline RgbImage procedural_fill(const RgbImage& conditioning, const Mask& mask, std::uint64_t seed,
                                double amplitude = 0.02) {
  RgbImage out = conditioning;
  const Mask valid = [&] {
    Mask v(mask.width(), mask.height(), 0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask[i] ? 0 : 1;
    return v;
  }();
  if (!nearest_fill(out, valid)) return out;
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      if (!mask(x, y)) continue;
      const double n = amplitude * value_noise(x + 0.5, y + 0.5, 2.0, seed);
      out(x, y) = (out(x, y) + Rgb::Constant(n)).cwiseMax(0.0).cwiseMin(1.0);
    }
  }
  return out;
}

/// Runs an external command per request. The engine writes request.json,
/// coarse.png and coarse_depth.bin into a work directory and invokes
/// `command <workdir>`; the command must write fine.png and may write
/// fine_depth.bin. Auxiliary requests write aux_conditioning_K.png and
/// aux_mask_K.png and expect aux_K.png.
class CommandProvider final : public DetailProvider {
 public:
  CommandProvider(std::string command, std::filesystem::path workdir, bool aux_views = false)
      : command_(std::move(command)), workdir_(std::move(workdir)), aux_(aux_views) {}

  bool supplies_depth() const override { return true; }
  bool supplies_aux_views() const override { return aux_; }

  DetailOutput synthesize(const DetailInput& in) override {
    std::filesystem::create_directories(workdir_);
    for (const char* name : {"fine.png", "fine_depth.bin"}) std::filesystem::remove(workdir_ / name);
    const nlohmann::json req = {{"kind", "detail"},   {"prompt", in.prompt},
                                {"context", in.context}, {"seed", in.seed},
                                {"zoom_factor", in.zoom_factor}, {"camera", camera_to_json(in.camera)}};
    write_request(req);
    write_png(workdir_ / "coarse.png", in.coarse.color);
    save_depth(workdir_ / "coarse_depth.bin", in.coarse.depth);
    run();
    DetailOutput out;
    const auto fine = workdir_ / "fine.png";
    if (!std::filesystem::exists(fine)) throw Error(ErrorCode::Provider, "provider did not write fine.png");
    out.image = read_png(fine);
    if (out.image.width() != in.camera.width || out.image.height() != in.camera.height) {
      throw Error(ErrorCode::Provider, "provider image has the wrong size");
    }
    const auto depth = workdir_ / "fine_depth.bin";
    if (std::filesystem::exists(depth)) out.depth = load_depth(depth);
    return out;
  }

  RgbImage fill_aux(const AuxInput& in) override {
    std::filesystem::create_directories(workdir_);
    const std::string k = std::to_string(in.index);
    const auto result = workdir_ / ("aux_" + k + ".png");
    std::filesystem::remove(result);
    write_request({{"kind", "aux"}, {"index", in.index}, {"prompt", in.prompt}, {"seed", in.seed},
                   {"camera", camera_to_json(in.camera)}});
    write_png(workdir_ / ("aux_conditioning_" + k + ".png"), in.conditioning.color);
    RgbImage mask(in.mask.width(), in.mask.height());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = Rgb::Constant(in.mask[i] ? 1.0 : 0.0);
    write_png(workdir_ / ("aux_mask_" + k + ".png"), mask);
    run();
    if (!std::filesystem::exists(result)) throw Error(ErrorCode::Provider, "provider did not write " + result.string());
    RgbImage img = read_png(result);
    if (!img.same_size(in.mask)) throw Error(ErrorCode::Provider, "auxiliary image has the wrong size");
    return img;
  }

 private:
  void write_request(const nlohmann::json& req) const {
    const std::string text = req.dump(2);
    write_file(workdir_ / "request.json",
               std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  void run() const {
    const std::string cmd = command_ + " '" + workdir_.string() + "'";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) throw Error(ErrorCode::Provider, "provider command failed (" + std::to_string(rc) + "): " + command_);
  }

  std::string command_;
  std::filesystem::path workdir_;
  bool aux_;
};

}  // namespace wz
