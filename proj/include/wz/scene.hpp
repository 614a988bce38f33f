// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/modulation.hpp"

namespace wz {

/// Flat Gaussian primitive. The covariance is
///   Q diag(sx^2, sy^2, eps^2) Q^T,  eps = kThicknessRatio * min(sx, sy)
/// with Q the rotation of `rotation`; the local z axis is the surface normal.
struct Surfel {
  Vec3 position = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);  // (w, x, y, z)
  Vec2 scale = Vec2::Ones();
  double opacity = 1.0;
  Rgb color = Rgb::Zero();
  ScaleBounds bounds;
  std::uint32_t layer = 0;

  bool operator==(const Surfel& o) const {
    return position == o.position && rotation == o.rotation && scale == o.scale && opacity == o.opacity &&
           color == o.color && bounds == o.bounds && layer == o.layer;
  }
};

inline constexpr double kThicknessRatio = 0.01;

inline double surfel_thickness(const Vec2& scale) { return kThicknessRatio * std::min(scale.x(), scale.y()); }

inline Mat3 surfel_covariance(const Surfel& s) {
  const Mat3 r = rotation_from_quaternion(s.rotation);
  const double eps = surfel_thickness(s.scale);
  const Vec3 diag(s.scale.x() * s.scale.x(), s.scale.y() * s.scale.y(), eps * eps);
  return r * diag.asDiagonal() * r.transpose();
}

/// Throws InvalidLayer with a description of the first violated invariant.
inline void validate_surfel(const Surfel& s, bool root_layer) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidLayer, "surfel invariant: " + what); };
  if (!s.position.allFinite()) fail("position not finite");
  if (!s.rotation.allFinite() || std::abs(s.rotation.norm() - 1.0) > 1e-6) fail("rotation is not a unit quaternion");
  if (!(s.scale.x() > 0.0) || !(s.scale.y() > 0.0) || !s.scale.allFinite()) fail("scales must be positive");
  if (!(s.opacity >= 0.0 && s.opacity <= 1.0)) fail("opacity outside [0, 1]");
  if (!s.color.allFinite()) fail("color not finite");
  if (!(s.bounds.native() > 0.0)) fail("native scale must be positive");
  if (!s.bounds.strictly_ordered()) fail("scale bounds must satisfy child < native < parent");
  if (root_layer && s.bounds.has_parent()) fail("root-layer surfels have no parent bound");
  if (!root_layer && !s.bounds.has_parent()) fail("non-root surfels need a parent bound");
}

/// All surfels created from one synthesized image at one creation camera.
struct ScaleLayer {
  Camera creation_camera;
  std::optional<std::uint32_t> parent_layer;
  std::vector<Surfel> surfels;
  std::uint32_t scale_index = 0;
  std::string prompt;

  bool operator==(const ScaleLayer&) const = default;
};

/// Immutable view of a scene at one version. Copies share storage; nothing
/// reachable from a snapshot is ever mutated.
class SceneSnapshot {
 public:
  struct State {
    std::vector<std::shared_ptr<const ScaleLayer>> layers;
    std::uint64_t version = 0;
  };

  SceneSnapshot() : state_(std::make_shared<const State>()) {}
  explicit SceneSnapshot(std::shared_ptr<const State> state) : state_(std::move(state)) {}

  std::uint64_t version() const noexcept { return state_->version; }
  std::size_t layer_count() const noexcept { return state_->layers.size(); }
  const ScaleLayer& layer(std::size_t i) const {
    if (i >= state_->layers.size()) throw Error(ErrorCode::InvalidArgument, "layer index out of range");
    return *state_->layers[i];
  }
  const std::vector<std::shared_ptr<const ScaleLayer>>& layers() const noexcept { return state_->layers; }

  std::size_t surfel_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : state_->layers) n += l->surfels.size();
    return n;
  }

  /// Raw layer pointers in index order, the form the renderer consumes.
  std::vector<const ScaleLayer*> layer_refs() const {
    std::vector<const ScaleLayer*> out;
    out.reserve(state_->layers.size());
    for (const auto& l : state_->layers) out.push_back(l.get());
    return out;
  }

  const std::shared_ptr<const State>& state() const noexcept { return state_; }

 private:
  std::shared_ptr<const State> state_;
};

/// The growing multi-scale scene. One writer appends layers, any number of
/// readers take snapshots. Every mutation builds a new state and publishes it
/// under the lock, so a snapshot never observes a partial append. Committed
/// surfels are only ever touched by the write-once child-bound assignment,
/// which copies the parent layer rather than editing it in place.
class MultiScaleScene {
 public:
  MultiScaleScene() : state_(std::make_shared<const SceneSnapshot::State>()) {}

  /// Forks a scene from a snapshot; the fork evolves independently.
  explicit MultiScaleScene(const SceneSnapshot& snapshot) : state_(snapshot.state()) {}

  MultiScaleScene(const MultiScaleScene&) = delete;
  MultiScaleScene& operator=(const MultiScaleScene&) = delete;

  SceneSnapshot snapshot() const {
    std::lock_guard lock(mutex_);
    return SceneSnapshot(state_);
  }

  std::uint64_t version() const { return snapshot().version(); }
  std::size_t layer_count() const { return snapshot().layer_count(); }

  /// Appends a layer; returns its index. Surfels are stamped with the index.
  std::uint32_t add_layer(ScaleLayer layer) {
    std::lock_guard lock(mutex_);
    auto next = std::make_shared<SceneSnapshot::State>(*state_);
    const std::uint32_t index = append_checked(*next, std::move(layer));
    next->version += 1;
    state_ = std::move(next);
    return index;
  }

  /// Sets s_child = depth / sqrt(fx fy) in `child_camera` on every parent
  /// surfel that projects inside the child image with positive depth and has
  /// no child bound yet. Returns the number of surfels assigned.
  std::size_t assign_child_bounds(std::uint32_t parent_layer, const Camera& child_camera) {
    std::lock_guard lock(mutex_);
    auto next = std::make_shared<SceneSnapshot::State>(*state_);
    const std::size_t count = assign_checked(*next, parent_layer, child_camera);
    if (count > 0) {
      next->version += 1;
      state_ = std::move(next);
    }
    return count;
  }

  /// Child-bound assignment on `layer.parent_layer` followed by the append,
  /// published as a single new version.
  std::uint32_t commit_child_layer(ScaleLayer layer) {
    if (!layer.parent_layer) throw Error(ErrorCode::InvalidLayer, "child layer has no parent");
    std::lock_guard lock(mutex_);
    auto next = std::make_shared<SceneSnapshot::State>(*state_);
    const std::uint32_t parent = *layer.parent_layer;
    const Camera camera = layer.creation_camera;
    validate_layer(*next, layer, static_cast<std::uint32_t>(next->layers.size()));
    assign_checked(*next, parent, camera);
    const std::uint32_t index = append_checked(*next, std::move(layer));
    next->version += 1;
    state_ = std::move(next);
    return index;
  }

  /// Checks the layer-level and surfel-level invariants `layer` would need to
  /// be appended at `index` to `state`.
  static void validate_layer(const SceneSnapshot::State& state, const ScaleLayer& layer, std::uint32_t index) {
    layer.creation_camera.validate();
    const bool root = state.layers.empty();
    if (root) {
      if (layer.parent_layer) throw Error(ErrorCode::InvalidLayer, "the root layer cannot have a parent");
      if (layer.scale_index != 0) throw Error(ErrorCode::InvalidLayer, "the root layer must have scale index 0");
    } else {
      if (!layer.parent_layer) throw Error(ErrorCode::InvalidLayer, "only layer 0 may be a root");
      const std::uint32_t parent = *layer.parent_layer;
      if (parent >= index || parent >= state.layers.size()) {
        throw Error(ErrorCode::InvalidLayer, "parent layer " + std::to_string(parent) + " is not committed");
      }
      const ScaleLayer& p = *state.layers[parent];
      if (layer.scale_index != p.scale_index + 1) {
        throw Error(ErrorCode::InvalidLayer, "scale index must be the parent's plus one");
      }
      const Camera& pc = p.creation_camera;
      if (!(layer.creation_camera.focal_mean() > pc.focal_mean())) {
        throw Error(ErrorCode::InvalidLayer, "child creation camera must zoom in on the parent");
      }
    }
    for (const Surfel& s : layer.surfels) validate_surfel(s, root);
  }

 private:
  static std::uint32_t append_checked(SceneSnapshot::State& state, ScaleLayer layer) {
    const auto index = static_cast<std::uint32_t>(state.layers.size());
    validate_layer(state, layer, index);
    for (Surfel& s : layer.surfels) s.layer = index;
    state.layers.push_back(std::make_shared<const ScaleLayer>(std::move(layer)));
    return index;
  }

  static std::size_t assign_checked(SceneSnapshot::State& state, std::uint32_t parent_layer,
                                    const Camera& child_camera) {
    if (parent_layer >= state.layers.size()) {
      throw Error(ErrorCode::InvalidLayer, "unknown parent layer " + std::to_string(parent_layer));
    }
    child_camera.validate();
    std::shared_ptr<ScaleLayer> copy;
    std::size_t count = 0;
    const ScaleLayer& layer = *state.layers[parent_layer];
    for (std::size_t i = 0; i < layer.surfels.size(); ++i) {
      const Surfel& s = layer.surfels[i];
      if (s.bounds.has_child()) continue;
      const Projection proj = project(s.position, child_camera);
      if (proj.behind) continue;
      if (proj.pixel.x() < 0.0 || proj.pixel.y() < 0.0 || proj.pixel.x() >= child_camera.width ||
          proj.pixel.y() >= child_camera.height) {
        continue;
      }
      const auto child_scale = render_scale(s.position, child_camera);
      if (!child_scale || !(*child_scale < s.bounds.native())) continue;
      if (!copy) copy = std::make_shared<ScaleLayer>(layer);
      copy->surfels[i].bounds.set_child(*child_scale);
      ++count;
    }
    if (copy) state.layers[parent_layer] = std::move(copy);
    return count;
  }

  mutable std::mutex mutex_;
  std::shared_ptr<const SceneSnapshot::State> state_;
};

}  // namespace wz
