// SPDX-License-Identifier: Apache-2.0
// Layer fit on a fronto-parallel textured plane.
#pragma once

#include <cmath>
#include <numbers>

#include "wz/diffopt.hpp"
#include "wz/surfelize.hpp"

namespace wz::testing {

struct PlaneTarget {
  RgbImage image;
  DepthMap depth;
  Camera camera;
};

/// Smooth three-channel sinusoid texture (period 32 px) on the plane z = 4.
inline PlaneTarget textured_plane(int size = 64) {
  PlaneTarget t{RgbImage(size, size), DepthMap(size, size), Camera::pinhole(Mat4::Identity(), size, size, size, size)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = 2.0 * std::numbers::pi * x / 32.0, v = 2.0 * std::numbers::pi * y / 32.0;
      t.image(x, y) = Rgb(0.5 + 0.3 * std::sin(u) * std::cos(0.8 * v), 0.5 + 0.3 * std::sin(0.7 * u + v + 1.0),
                          0.5 + 0.3 * std::cos(u - 0.6 * v));
      t.depth.set(x, y, 4.0);
    }
  }
  return t;
}

struct PlaneFitResult {
  double psnr_before = 0.0;
  double psnr_after = 0.0;
  LayerFit fit;
};

inline PlaneFitResult fit_textured_plane(int steps, int size = 64) {
  const PlaneTarget t = textured_plane(size);
  const ScaleLayer init = pixel_aligned_surfels(t.image, t.depth, t.camera, std::nullopt);
  const std::vector<const ScaleLayer*> before{&init};
  PlaneFitResult r;
  r.psnr_before = psnr(render_color(before, t.camera).color, t.image);
  OptimConfig cfg;
  cfg.steps = steps;
  const std::vector<TrainingView> views{{t.image, t.camera}};
  r.fit = optimize_layer(before, 0, views, cfg);
  const std::vector<const ScaleLayer*> after{&r.fit.layer};
  r.psnr_after = psnr(render_color(after, t.camera).color, t.image);
  return r;
}

}  // namespace wz::testing
