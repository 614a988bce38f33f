// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/modulation.hpp"
#include "wz/scene.hpp"

namespace wz {

inline constexpr double kInitialOpacity = 0.1;
inline constexpr double kMaxNormalAngleDeg = 85.0;

struct LayerMeta {
  std::optional<std::uint32_t> parent_layer;
  std::uint32_t scale_index = 0;
  std::string prompt;
};

/// Footprint scale giving one-pixel sampling at the creation depth.
inline double nyquist_scale(double depth, const Camera& camera) {
  return depth / (camera.focal_mean() * std::numbers::sqrt2);
}

/// Surfel for pixel (x, y) of a creation view. Throws InvalidLayer when the
/// parent camera does not see the point at a coarser scale.
inline Surfel pixel_surfel(int x, int y, const Rgb& color, double depth, const Vec3& world_normal,
                           const Camera& camera, const std::optional<Camera>& parent_camera) {
  Surfel s;
  s.position = back_project(pixel_center(x, y), depth, camera);
  const Vec3 to_camera = (camera.center() - s.position).normalized();
  Vec3 n = world_normal.normalized();
  const double cos_limit = std::cos(kMaxNormalAngleDeg * std::numbers::pi / 180.0);
  if (!n.allFinite() || n.dot(to_camera) < cos_limit) n = to_camera;
  s.rotation = quaternion_between(Vec3::UnitZ(), n);
  const double scale = nyquist_scale(depth, camera);
  s.scale = Vec2(scale, scale);
  s.opacity = kInitialOpacity;
  s.color = color.cwiseMax(0.0).cwiseMin(1.0);
  const auto native = render_scale(s.position, camera);
  if (!native) throw Error(ErrorCode::InvalidLayer, "surfel is not in front of its creation camera");
  std::optional<double> parent;
  if (parent_camera) {
    parent = render_scale(s.position, *parent_camera);
    if (!parent || !(*parent > *native)) {
      throw Error(ErrorCode::InvalidLayer, "parent camera does not observe the surfel at a coarser scale");
    }
  }
  s.bounds = ScaleBounds(*native, parent);
  return s;
}

/// One surfel per valid depth pixel (restricted to `emit` when given):
/// back-projected position, normal-aligned orientation, Nyquist scales,
/// opacity 0.1, native scale at `camera`, parent scale at `parent_camera`.
inline ScaleLayer pixel_aligned_surfels(const RgbImage& image, const DepthMap& depth, const Camera& camera,
                                        const std::optional<Camera>& parent_camera, const LayerMeta& meta = {},
                                        const Mask* emit = nullptr) {
  camera.validate();
  if (parent_camera) parent_camera->validate();
  if (image.width() != camera.width || image.height() != camera.height || depth.width() != camera.width ||
      depth.height() != camera.height) {
    throw Error(ErrorCode::DimensionMismatch, "image/depth size does not match the camera");
  }
  if (emit && !emit->same_size(image)) throw Error(ErrorCode::DimensionMismatch, "emit mask size mismatch");

  const Image<Vec3> normals = normals_from_depth(depth, camera);
  ScaleLayer layer;
  layer.creation_camera = camera;
  layer.parent_layer = meta.parent_layer;
  layer.scale_index = meta.scale_index;
  layer.prompt = meta.prompt;
  layer.surfels.reserve(depth.valid_count());
  for (int y = 0; y < camera.height; ++y) {
    for (int x = 0; x < camera.width; ++x) {
      if (!depth.is_valid(x, y) || (emit && !(*emit)(x, y))) continue;
      layer.surfels.push_back(pixel_surfel(x, y, image(x, y), depth(x, y), normals(x, y), camera, parent_camera));
    }
  }
  if (layer.surfels.empty()) throw Error(ErrorCode::EmptyLayer, "no valid depth pixels to surfelize");
  return layer;
}

}  // namespace wz
