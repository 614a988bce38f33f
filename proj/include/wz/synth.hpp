// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wz/depthreg.hpp"
#include "wz/diffopt.hpp"
#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/providers.hpp"
#include "wz/rasterizer.hpp"
#include "wz/scene.hpp"
#include "wz/surfelize.hpp"

namespace wz {

inline constexpr double kDefaultZoomFactor = 8.0;
inline constexpr double kDefaultFocal = 1024.0;
inline constexpr int kDefaultWidth = 1088;
inline constexpr int kDefaultHeight = 720;

struct DetailRequest {
  std::uint32_t parent_layer = 0;
  Vec2 zoom_center = Vec2::Zero();  // pixel in the parent creation view
  double zoom_factor = kDefaultZoomFactor;
  std::string prompt;
  std::uint64_t seed = 0;
};

/// Same pose, focal scaled by the zoom factor, principal point moved so that
/// the zoom center lands on the image center. The zoomed field of view must
/// lie inside the parent image.
inline Camera zoom_camera(const Camera& parent, const DetailRequest& req) {
  parent.validate();
  const double f = req.zoom_factor;
  if (!(f > 1.0) || !std::isfinite(f)) throw Error(ErrorCode::InvalidArgument, "zoom factor must exceed 1");
  const Vec2 c = req.zoom_center;
  if (!c.allFinite() || c.x() < 0.0 || c.y() < 0.0 || c.x() > parent.width || c.y() > parent.height) {
    throw Error(ErrorCode::InvalidArgument, "zoom center lies outside the parent image");
  }
  const double hx = parent.width / (2.0 * f), hy = parent.height / (2.0 * f);
  const double tol = 1e-9;
  if (c.x() - hx < -tol || c.x() + hx > parent.width + tol || c.y() - hy < -tol || c.y() + hy > parent.height + tol) {
    throw Error(ErrorCode::InvalidArgument, "zoom region extends outside the parent field of view");
  }
  Camera child = parent;
  child.fx = parent.fx * f;
  child.fy = parent.fy * f;
  child.cx = parent.width / 2.0 - f * (c.x() - parent.cx);
  child.cy = parent.height / 2.0 - f * (c.y() - parent.cy);
  child.validate();
  return child;
}

// ---------------------------------------------------------------------------
// Auxiliary views

struct OrbitConfig {
  int views = 0;
  double max_degrees = 5.0;
  double radius_fraction = 0.02;  // of the median layer depth
};

/// Cameras on a small circle around `camera` (radius = fraction of `depth`
/// in the image plane), each looking at the point `depth` ahead on the
/// original optical axis. Throws if a view would rotate more than the cap.
inline std::vector<Camera> orbit_cameras(const Camera& camera, double depth, const OrbitConfig& cfg) {
  std::vector<Camera> out;
  if (cfg.views <= 0) return out;
  if (!(depth > 0.0)) throw Error(ErrorCode::InvalidArgument, "orbit depth must be positive");
  const Mat3 r = camera.rotation();  // world -> camera
  const Mat3 axes = r.transpose();   // columns: camera x, y, z in world
  const Vec3 center = camera.center();
  const Vec3 pivot = center + axes.col(2) * depth;
  const double radius = cfg.radius_fraction * depth;
  for (int k = 0; k < cfg.views; ++k) {
    const double phi = 2.0 * std::numbers::pi * k / cfg.views;
    const Vec3 c = center + radius * (std::cos(phi) * axes.col(0) + std::sin(phi) * axes.col(1));
    const Vec3 forward = (pivot - c).normalized();
    // Keep the original up direction as close as possible.
    const Vec3 right = axes.col(1).cross(forward).normalized();
    const Vec3 down = forward.cross(right).normalized();
    Mat3 cam_axes;
    cam_axes.col(0) = right;
    cam_axes.col(1) = down;
    cam_axes.col(2) = forward;
    const Mat3 rot = cam_axes.transpose();
    const Eigen::AngleAxisd delta(rot * r.transpose());
    if (std::abs(delta.angle()) * 180.0 / std::numbers::pi > cfg.max_degrees + 1e-9) {
      throw Error(ErrorCode::InvalidArgument, "auxiliary view exceeds the orbit rotation cap");
    }
    Camera aux = camera;
    aux.pose = make_pose(rot, -rot * c);
    aux.validate();
    out.push_back(aux);
  }
  return out;
}

struct AuxView {
  Camera camera;
  Frame conditioning;   // partial layer rendered opaque at this camera
  Mask mask;            // 1 where the partial layer leaves a hole (alpha < 0.5)
  RgbImage image;       // conditioning with the holes synthesized
  DepthMap fill_depth;  // registered depth, valid only inside the mask
};

inline double median_layer_depth(const ScaleLayer& layer, const Camera& camera) {
  std::vector<double> z;
  z.reserve(layer.surfels.size());
  for (const auto& s : layer.surfels) {
    const double d = camera.to_camera(s.position).z();
    if (d > kNearDepth) z.push_back(d);
  }
  const auto m = median(std::move(z));
  if (!m) throw Error(ErrorCode::EmptyLayer, "layer has no surfel in front of the camera");
  return *m;
}

/// Renders `partial` at K orbit cameras and synthesizes what it leaves
/// uncovered. Depth for the holes is the nearest covered depth, registered
/// against `coarse` (when given) with passthrough fallback.
inline std::vector<AuxView> auxiliary_views(const ScaleLayer& partial, const Camera& camera, const OrbitConfig& orbit,
                                            DetailProvider& provider, const SceneSnapshot* coarse,
                                            const std::string& prompt, std::uint64_t seed,
                                            const RenderConfig& render = {}) {
  std::vector<AuxView> out;
  if (orbit.views <= 0) return out;
  const double depth = median_layer_depth(partial, camera);
  RenderConfig coverage = render;
  coverage.force_opaque = true;
  coverage.background = Rgb::Zero();
  const std::vector<const ScaleLayer*> refs{&partial};
  int k = 0;
  for (const Camera& cam : orbit_cameras(camera, depth, orbit)) {
    AuxView v;
    v.camera = cam;
    v.conditioning = render_color(refs, cam, coverage);
    v.mask = Mask(cam.width, cam.height, 0);
    for (std::size_t i = 0; i < v.mask.size(); ++i) v.mask[i] = v.conditioning.alpha[i] < 0.5 ? 1 : 0;
    const std::uint64_t view_seed = splitmix64(seed + 0x5157 + static_cast<std::uint64_t>(k));
    if (count_set(v.mask) == 0) {
      v.image = v.conditioning.color;
    } else if (provider.supplies_aux_views()) {
      v.image = provider.fill_aux({v.conditioning, v.mask, cam, prompt, view_seed, k});
      for (std::size_t i = 0; i < v.mask.size(); ++i) {
        if (!v.mask[i]) v.image[i] = v.conditioning.color[i];
      }
    } else {
      v.image = procedural_fill(v.conditioning.color, v.mask, view_seed);
    }
    v.fill_depth = DepthMap(cam.width, cam.height);
    if (count_set(v.mask) > 0) {
      DepthMap guess = fill_depth(v.conditioning.depth);
      if (coarse) guess = register_depth(guess, *coarse, cam, nullptr, {}, {}, coverage).depth;
      for (int y = 0; y < cam.height; ++y) {
        for (int x = 0; x < cam.width; ++x) {
          if (v.mask(x, y) && guess.is_valid(x, y)) v.fill_depth.set(x, y, guess(x, y));
        }
      }
    }
    out.push_back(std::move(v));
    ++k;
  }
  return out;
}

// ---------------------------------------------------------------------------
// New-scale synthesis

struct SynthConfig {
  OrbitConfig orbit;
  OptimConfig optim;
  RenderConfig render;
  AlignConfig align;
};

struct SynthResult {
  std::uint32_t layer = 0;
  Camera camera;
  Frame coarse;
  RgbImage fine;
  Registration registration;
  std::size_t aux_surfels = 0;
  LayerFit fit;
};

namespace detail {

/// Surfels for the holes of each auxiliary view, appended to `layer`.
inline std::size_t add_aux_surfels(ScaleLayer& layer, std::span<const AuxView> views,
                                   const std::optional<Camera>& parent_camera) {
  std::size_t added = 0;
  for (const AuxView& v : views) {
    const Image<Vec3> normals = normals_from_depth(v.fill_depth, v.camera);
    for (int y = 0; y < v.camera.height; ++y) {
      for (int x = 0; x < v.camera.width; ++x) {
        if (!v.mask(x, y) || !v.fill_depth.is_valid(x, y)) continue;
        try {
          layer.surfels.push_back(
              pixel_surfel(x, y, v.image(x, y), v.fill_depth(x, y), normals(x, y), v.camera, parent_camera));
          ++added;
        } catch (const Error&) {
          // A hole point the parent camera cannot place at a coarser scale
          // would break the layer lineage; leave it uncovered.
        }
      }
    }
  }
  return added;
}

inline std::vector<TrainingView> training_views(const RgbImage& image, const Camera& camera,
                                                std::span<const AuxView> aux) {
  std::vector<TrainingView> views{{image, camera}};
  for (const auto& v : aux) views.push_back({v.image, v.camera});
  return views;
}

}  // namespace detail

/// Builds the root layer from an image and its depth: surfelize, optional
/// auxiliary views, optimize.
inline LayerFit build_root_layer(const RgbImage& image, const DepthMap& depth, const Camera& camera,
                                 DetailProvider& provider, const SynthConfig& cfg = {}, std::uint64_t seed = 0,
                                 const std::string& prompt = {}) {
  ScaleLayer layer = pixel_aligned_surfels(image, depth, camera, std::nullopt, {std::nullopt, 0, prompt});
  const auto aux = auxiliary_views(layer, camera, cfg.orbit, provider, nullptr, prompt, seed, cfg.render);
  detail::add_aux_surfels(layer, aux, std::nullopt);
  const auto views = detail::training_views(image, camera, aux);
  const std::vector<const ScaleLayer*> refs{&layer};
  return optimize_layer(refs, 0, views, cfg.optim, cfg.render);
}

/// One pass of the synthesis loop: render the coarse view at the zoom camera,
/// obtain fine detail, register its depth, surfelize, add auxiliary views,
/// optimize, then publish child bounds and the layer as one version. Nothing
/// is written to `scene` unless every stage succeeds.
inline SynthResult synthesize_scale(MultiScaleScene& scene, const DetailRequest& req, DetailProvider& provider,
                                    const SynthConfig& cfg = {}, const SegmentSet* segments = nullptr,
                                    std::span<const Mask> novel_objects = {}) {
  const SceneSnapshot snap = scene.snapshot();
  if (req.parent_layer >= snap.layer_count()) {
    throw Error(ErrorCode::InvalidLayer, "unknown parent layer " + std::to_string(req.parent_layer));
  }
  const ScaleLayer& parent = snap.layer(req.parent_layer);
  SynthResult out;
  out.camera = zoom_camera(parent.creation_camera, req);
  out.coarse = render_color(snap, out.camera, cfg.render);
  // Geometry comes from an opaque coverage render: partially optimized
  // opacities would otherwise leave too few pixels with valid depth.
  RenderConfig geometry = cfg.render;
  geometry.force_opaque = true;
  out.coarse.depth = render_depth(snap, out.camera, geometry);

  // Stage 1: fine image.
  const Frame parent_view = render_color(snap, parent.creation_camera, cfg.render);
  DetailOutput detail =
      provider.synthesize({out.coarse, provider.context(parent_view), req.prompt, req.seed, out.camera, req.zoom_factor});
  if (detail.image.width() != out.camera.width || detail.image.height() != out.camera.height) {
    throw Error(ErrorCode::Provider, "provider image does not match the zoom camera");
  }
  out.fine = detail.image;

  // Stage 2: depth.
  DepthMap predicted = detail.depth ? *detail.depth : fill_depth(out.coarse.depth);
  if (predicted.width() != out.camera.width || predicted.height() != out.camera.height) {
    throw Error(ErrorCode::Provider, "provider depth does not match the zoom camera");
  }
  out.registration = register_depth(predicted, snap, out.camera, segments, novel_objects, cfg.align, geometry);

  // Stage 3: pixel-aligned surfels with parent bounds.
  ScaleLayer layer = pixel_aligned_surfels(out.fine, out.registration.depth, out.camera, parent.creation_camera,
                                           {req.parent_layer, parent.scale_index + 1, req.prompt});

  // Stage 4: auxiliary views.
  const auto aux = auxiliary_views(layer, out.camera, cfg.orbit, provider, &snap, req.prompt, req.seed, cfg.render);
  out.aux_surfels = detail::add_aux_surfels(layer, aux, parent.creation_camera);

  // Stage 5: optimize against the frozen coarse layers as they will render
  // once this layer is committed (child bounds applied).
  MultiScaleScene preview(snap);
  preview.assign_child_bounds(req.parent_layer, out.camera);
  const SceneSnapshot frozen = preview.snapshot();
  std::vector<const ScaleLayer*> refs = frozen.layer_refs();
  refs.push_back(&layer);
  const auto views = detail::training_views(out.fine, out.camera, aux);
  out.fit = optimize_layer(refs, refs.size() - 1, views, cfg.optim, cfg.render);

  // Commit.
  out.layer = scene.commit_child_layer(out.fit.layer);
  return out;
}

// ---------------------------------------------------------------------------
// Zoom sweeps

/// Layers from `from` down to `to` along parent links; throws unless `to`
/// descends from `from`.
inline std::vector<std::uint32_t> lineage(const SceneSnapshot& scene, std::uint32_t from, std::uint32_t to) {
  if (from >= scene.layer_count() || to >= scene.layer_count()) {
    throw Error(ErrorCode::InvalidLayer, "sweep layer out of range");
  }
  std::vector<std::uint32_t> chain{to};
  while (chain.back() != from) {
    const auto& p = scene.layer(chain.back()).parent_layer;
    if (!p) throw Error(ErrorCode::InvalidArgument, "target layer does not descend from the start layer");
    chain.push_back(*p);
  }
  std::reverse(chain.begin(), chain.end());
  return chain;
}

/// Camera between a parent creation camera and a child zoom camera sharing
/// its pose, at magnification `m` in [1, F] about the fixed image point of
/// the zoom.
inline Camera interpolate_zoom(const Camera& parent, const Camera& child, double m) {
  const double fx = child.fx / parent.fx, fy = child.fy / parent.fy;
  Camera c = parent;
  c.fx = parent.fx * m;
  c.fy = parent.fy * m;
  const double ux = (fx * parent.cx - child.cx) / (fx - 1.0);
  const double uy = (fy * parent.cy - child.cy) / (fy - 1.0);
  c.cx = ux - m * (ux - parent.cx);
  c.cy = uy - m * (uy - parent.cy);
  return c;
}

/// `frames` cameras from the creation camera of `from` to that of `to`,
/// log-uniform in focal length; both endpoints included.
inline std::vector<Camera> focal_sweep(const SceneSnapshot& scene, std::uint32_t from, std::uint32_t to, int frames) {
  if (frames < 2) throw Error(ErrorCode::InvalidArgument, "a sweep needs at least two frames");
  const auto chain = lineage(scene, from, to);
  std::vector<Camera> cams;
  for (const auto l : chain) cams.push_back(scene.layer(l).creation_camera);
  if (chain.size() == 1) return std::vector<Camera>(static_cast<std::size_t>(frames), cams.front());
  for (std::size_t i = 1; i < cams.size(); ++i) {
    if ((cams[i].pose - cams[0].pose).cwiseAbs().maxCoeff() > 1e-12) {
      throw Error(ErrorCode::InvalidArgument, "sweep layers do not share a pose");
    }
  }
  const double f0 = std::log(cams.front().focal_mean()), f1 = std::log(cams.back().focal_mean());
  std::vector<Camera> out;
  for (int i = 0; i < frames; ++i) {
    const double lf = f0 + (f1 - f0) * i / (frames - 1);
    std::size_t seg = 0;
    while (seg + 2 < cams.size() && lf > std::log(cams[seg + 1].focal_mean())) ++seg;
    const Camera& a = cams[seg];
    const Camera& b = cams[seg + 1];
    const double m = std::clamp(std::exp(lf - std::log(a.focal_mean())), 1.0, b.focal_mean() / a.focal_mean());
    if (i == frames - 1) {
      out.push_back(cams.back());
    } else if (i == 0) {
      out.push_back(cams.front());
    } else {
      out.push_back(interpolate_zoom(a, b, m));
    }
  }
  return out;
}

}  // namespace wz
