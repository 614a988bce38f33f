// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>

#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/providers.hpp"
#include "wz/synth.hpp"

namespace wz {

/// Synthetic creation view: a gently tilted plane carrying a smooth color
/// field plus multi-octave value noise.
struct PlaneFixture {
  RgbImage image;
  DepthMap depth;
  Camera camera;
};

struct PlaneFixtureParams {
  int width = 64;
  int height = 64;
  double focal = kDefaultFocal;
  double depth = 4.0;
  double tilt = 0.05;  // relative depth change across the image width
  double noise = 0.08;
  std::uint64_t seed = 1;
};

inline PlaneFixture make_plane_fixture(const PlaneFixtureParams& p = {}) {
  PlaneFixture f;
  f.camera = Camera::pinhole(Mat4::Identity(), p.focal, p.focal, p.width, p.height);
  f.image = RgbImage(p.width, p.height);
  f.depth = DepthMap(p.width, p.height);
  Image<double> noise[3];
  for (int c = 0; c < 3; ++c) noise[c] = detail_noise(p.width, p.height, 8.0, 4, p.noise, 1, splitmix64(p.seed + c));
  const double tau = 2.0 * std::numbers::pi;
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x) {
      const double u = (x + 0.5) / p.width, v = (y + 0.5) / p.height;
      const Rgb base(0.5 + 0.2 * std::sin(tau * u), 0.5 + 0.2 * std::cos(tau * v), 0.45 + 0.15 * std::sin(tau * (u + v)));
      f.image(x, y) = (base + Rgb(noise[0](x, y), noise[1](x, y), noise[2](x, y))).cwiseMax(0.0).cwiseMin(1.0);
      f.depth.set(x, y, p.depth * (1.0 + p.tilt * (u - 0.5)));
    }
  }
  return f;
}

struct FixtureSceneParams {
  PlaneFixtureParams plane;
  int layers = 3;
  int steps = 150;
  double zoom_factor = kDefaultZoomFactor;
  std::uint64_t seed = 7;
};

/// A nested procedural scene: the plane fixture as root, then each further
/// layer zooms into its parent near the image center.
inline std::unique_ptr<MultiScaleScene> make_fixture_scene(const FixtureSceneParams& p = {}) {
  const PlaneFixture f = make_plane_fixture(p.plane);
  ProceduralProvider provider;
  SynthConfig cfg;
  cfg.optim.steps = p.steps;
  auto scene = std::make_unique<MultiScaleScene>();
  scene->add_layer(build_root_layer(f.image, f.depth, f.camera, provider, cfg, p.seed).layer);
  for (int i = 1; i < p.layers; ++i) {
    // Alternate small offsets so successive layers do not share one axis.
    const double du = (i % 2 ? 0.5 : 0.47), dv = (i % 2 ? 0.5 : 0.53);
    DetailRequest req;
    req.parent_layer = static_cast<std::uint32_t>(i - 1);
    req.zoom_center = Vec2(du * p.plane.width, dv * p.plane.height);
    req.zoom_factor = p.zoom_factor;
    req.seed = p.seed + static_cast<std::uint64_t>(i);
    synthesize_scale(*scene, req, provider, cfg);
  }
  return scene;
}

}  // namespace wz
