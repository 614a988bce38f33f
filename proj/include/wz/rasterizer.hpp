// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <tbb/blocked_range.h>
#include <tbb/parallel_for.h>
#include <tbb/task_arena.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/modulation.hpp"
#include "wz/scene.hpp"

namespace wz {

struct RenderConfig {
  Rgb background = Rgb::Zero();
  double cutoff = 3.0;                // kernel support, in standard deviations
  double max_alpha = 0.99;            // per-splat alpha clamp
  double transmittance_floor = 1e-4;  // stop compositing a pixel below this
  bool modulation = true;             // scale-aware opacity weighting
  bool force_opaque = false;          // render every surfel at opacity 1 (coverage queries)
  int workers = 0;                    // 0 = library default

  void validate() const {
    if (!(cutoff > 0.0)) throw Error(ErrorCode::InvalidArgument, "cutoff must be positive");
    if (!(max_alpha > 0.0 && max_alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha clamp outside (0, 1]");
    if (!(transmittance_floor >= 0.0 && transmittance_floor < 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "transmittance floor outside [0, 1)");
    }
  }
};

/// Rendered color, alpha-weighted expected depth, and accumulated opacity.
struct Frame {
  RgbImage color;
  DepthMap depth;
  Image<double> alpha;
};

struct RenderStats {
  std::size_t visible = 0;     // splats surviving culling
  std::size_t composited = 0;  // (splat, pixel) blend operations
};

inline constexpr int kTileSize = 16;
inline constexpr double kCovarianceDilation = 0.3;

/// Screen-space footprint of a surfel.
struct Footprint {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Identity();
  Mat2 conic = Mat2::Identity();  // cov^-1
  double radius = 0.0;
  double depth = 0.0;
  Eigen::Matrix<double, 2, 3> jacobian = Eigen::Matrix<double, 2, 3>::Zero();  // d(pixel)/d(world), local affine
};

/// Projects the surfel covariance with the local affine approximation
/// cov2d = J W Sigma W^T J^T + 0.3 I, where W is the world-to-camera rotation
/// and J the perspective Jacobian at the center.
inline std::optional<Footprint> splat_footprint(const Surfel& s, const Camera& camera, double cutoff = 3.0) {
  const Mat3 w = camera.rotation();
  const Vec3 t = w * s.position + camera.translation();
  if (!(t.z() > kNearDepth)) return std::nullopt;
  const double iz = 1.0 / t.z();
  Eigen::Matrix<double, 2, 3> j;
  j << camera.fx * iz, 0.0, -camera.fx * t.x() * iz * iz,
       0.0, camera.fy * iz, -camera.fy * t.y() * iz * iz;
  Footprint fp;
  fp.depth = t.z();
  fp.mean = Vec2(camera.fx * t.x() * iz + camera.cx, camera.fy * t.y() * iz + camera.cy);
  fp.jacobian = j * w;
  Mat2 cov = fp.jacobian * surfel_covariance(s) * fp.jacobian.transpose();
  const double off = 0.5 * (cov(0, 1) + cov(1, 0));
  cov(0, 1) = cov(1, 0) = off;
  cov(0, 0) += kCovarianceDilation;
  cov(1, 1) += kCovarianceDilation;
  fp.cov = cov;
  const double det = cov(0, 0) * cov(1, 1) - off * off;
  fp.conic << cov(1, 1) / det, -off / det, -off / det, cov(0, 0) / det;
  const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
  const double half = 0.5 * (cov(0, 0) - cov(1, 1));
  const double lambda_max = mid + std::sqrt(half * half + off * off);
  fp.radius = cutoff * std::sqrt(lambda_max);
  return fp;
}

/// A surfel that survived culling, with everything compositing needs.
struct Splat {
  std::uint32_t layer = 0;
  std::uint32_t index = 0;
  Footprint footprint;
  double weight = 1.0;   // scale-aware opacity weight
  double opacity = 0.0;  // stored opacity times weight
  Rgb color = Rgb::Zero();
};

using LayerRefs = std::span<const ScaleLayer* const>;

/// Keeps surfels that are in front of the camera, whose footprint box meets
/// the image, and (with modulation on) whose opacity weight is positive.
/// Result is sorted front to back; ties go to (layer, index).
inline std::vector<Splat> cull(LayerRefs layers, const Camera& camera, const RenderConfig& config = {}) {
  std::vector<Splat> out;
  const double focal = std::sqrt(camera.fx * camera.fy);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& surfels = layers[li]->surfels;
    for (std::size_t si = 0; si < surfels.size(); ++si) {
      const Surfel& s = surfels[si];
      double weight = 1.0;
      if (config.modulation) {
        const double z = camera.to_camera(s.position).z();
        if (!(z > kNearDepth)) continue;
        weight = s.bounds.weight(z / focal);
        if (!(weight > 0.0)) continue;
      }
      auto fp = splat_footprint(s, camera, config.cutoff);
      if (!fp) continue;
      if (fp->mean.x() + fp->radius < 0.0 || fp->mean.x() - fp->radius > camera.width ||
          fp->mean.y() + fp->radius < 0.0 || fp->mean.y() - fp->radius > camera.height) {
        continue;
      }
      Splat sp;
      sp.layer = static_cast<std::uint32_t>(li);
      sp.index = static_cast<std::uint32_t>(si);
      sp.footprint = *fp;
      sp.weight = weight;
      sp.opacity = (config.force_opaque ? 1.0 : s.opacity) * weight;
      sp.color = s.color;
      out.push_back(sp);
    }
  }
  std::sort(out.begin(), out.end(), [](const Splat& a, const Splat& b) {
    if (a.footprint.depth != b.footprint.depth) return a.footprint.depth < b.footprint.depth;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
  });
  return out;
}

inline std::vector<Splat> cull(const SceneSnapshot& scene, const Camera& camera, const RenderConfig& config = {}) {
  const auto refs = scene.layer_refs();
  return cull(refs, camera, config);
}

namespace detail {

/// Per-tile lists of splat indices (front-to-back order preserved).
struct TileBins {
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<std::vector<std::uint32_t>> bins;

  const std::vector<std::uint32_t>& at(int tx, int ty) const { return bins[static_cast<std::size_t>(ty) * tiles_x + tx]; }
};

inline TileBins bin_splats(std::span<const Splat> splats, int width, int height) {
  TileBins b;
  b.tiles_x = (width + kTileSize - 1) / kTileSize;
  b.tiles_y = (height + kTileSize - 1) / kTileSize;
  b.bins.resize(static_cast<std::size_t>(b.tiles_x) * b.tiles_y);
  for (std::size_t k = 0; k < splats.size(); ++k) {
    const Footprint& fp = splats[k].footprint;
    // Pixel centers (x + 0.5) inside [mean - r, mean + r].
    const int x0 = std::max(0, static_cast<int>(std::ceil(fp.mean.x() - fp.radius - 0.5)));
    const int x1 = std::min(width - 1, static_cast<int>(std::floor(fp.mean.x() + fp.radius - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(fp.mean.y() - fp.radius - 0.5)));
    const int y1 = std::min(height - 1, static_cast<int>(std::floor(fp.mean.y() + fp.radius - 0.5)));
    if (x0 > x1 || y0 > y1) continue;
    for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty) {
      for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx) {
        b.bins[static_cast<std::size_t>(ty) * b.tiles_x + tx].push_back(static_cast<std::uint32_t>(k));
      }
    }
  }
  return b;
}

/// Mahalanobis distance squared of pixel center (px, py) from a footprint.
inline double mahalanobis(const Footprint& fp, int px, int py) {
  const double dx = px + 0.5 - fp.mean.x();
  const double dy = py + 0.5 - fp.mean.y();
  return fp.conic(0, 0) * dx * dx + 2.0 * fp.conic(0, 1) * dx * dy + fp.conic(1, 1) * dy * dy;
}

template <class Body>
void for_each_tile(const TileBins& bins, int workers, Body&& body) {
  const int n = bins.tiles_x * bins.tiles_y;
  auto run = [&] {
    tbb::parallel_for(tbb::blocked_range<int>(0, n), [&](const tbb::blocked_range<int>& r) {
      for (int t = r.begin(); t != r.end(); ++t) body(t % bins.tiles_x, t / bins.tiles_x, t);
    });
  };
  if (workers > 0) {
    tbb::task_arena arena(workers);
    arena.execute(run);
  } else {
    run();
  }
}

}  // namespace detail

/// Front-to-back compositing of the culled splats. Each pixel walks the
/// splats binned to its 16x16 tile in global depth order; a splat covers the
/// pixel when its Mahalanobis distance is within the cutoff.
inline Frame composite(std::span<const Splat> splats, const Camera& camera, const RenderConfig& config,
                       RenderStats* stats = nullptr) {
  config.validate();
  const int w = camera.width, h = camera.height;
  Frame frame{RgbImage(w, h), DepthMap(w, h), Image<double>(w, h, 0.0)};
  const detail::TileBins bins = detail::bin_splats(splats, w, h);
  std::vector<std::size_t> fragments(bins.bins.size(), 0);
  const double cut2 = config.cutoff * config.cutoff;

  detail::for_each_tile(bins, config.workers, [&](int tx, int ty, int tile) {
    const auto& list = bins.at(tx, ty);
    std::size_t count = 0;
    const int y_end = std::min(h, (ty + 1) * kTileSize);
    const int x_end = std::min(w, (tx + 1) * kTileSize);
    for (int y = ty * kTileSize; y < y_end; ++y) {
      for (int x = tx * kTileSize; x < x_end; ++x) {
        double transmittance = 1.0;
        Rgb color = Rgb::Zero();
        double depth = 0.0;
        for (const std::uint32_t k : list) {
          const Splat& sp = splats[k];
          const double m = detail::mahalanobis(sp.footprint, x, y);
          if (m > cut2) continue;
          const double a = std::min(config.max_alpha, sp.opacity * std::exp(-0.5 * m));
          color += sp.color * (a * transmittance);
          depth += sp.footprint.depth * (a * transmittance);
          transmittance *= 1.0 - a;
          ++count;
          if (transmittance < config.transmittance_floor) break;
        }
        const double alpha = 1.0 - transmittance;
        frame.color(x, y) = color + config.background * transmittance;
        frame.alpha(x, y) = alpha;
        if (alpha > 0.5) {
          frame.depth.set(x, y, depth / alpha);
        }
      }
    }
    fragments[static_cast<std::size_t>(tile)] = count;
  });

  if (stats) {
    stats->visible = splats.size();
    stats->composited = 0;
    for (std::size_t f : fragments) stats->composited += f;
  }
  return frame;
}

inline Frame render_color(LayerRefs layers, const Camera& camera, const RenderConfig& config = {},
                          RenderStats* stats = nullptr) {
  camera.validate();
  const std::vector<Splat> splats = cull(layers, camera, config);
  return composite(splats, camera, config, stats);
}

inline Frame render_color(const SceneSnapshot& scene, const Camera& camera, const RenderConfig& config = {},
                          RenderStats* stats = nullptr) {
  const auto refs = scene.layer_refs();
  return render_color(refs, camera, config, stats);
}

/// Expected depth; valid where accumulated alpha exceeds 0.5.
inline DepthMap render_depth(const SceneSnapshot& scene, const Camera& camera, const RenderConfig& config = {}) {
  return render_color(scene, camera, config).depth;
}

inline DepthMap render_depth(LayerRefs layers, const Camera& camera, const RenderConfig& config = {}) {
  return render_color(layers, camera, config).depth;
}

}  // namespace wz
