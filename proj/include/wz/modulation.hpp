// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "wz/error.hpp"
#include "wz/geometry.hpp"

namespace wz {

/// Observation scale of a point at `depth` seen through focal lengths fx, fy.
inline double native_scale(double depth, double fx, double fy) {
  if (!(depth > 0.0) || !(fx > 0.0) || !(fy > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "native_scale requires positive depth and focal lengths");
  }
  return depth / std::sqrt(fx * fy);
}

/// Scale at which `position` is observed by `camera`; empty when the point is
/// behind the camera (culled).
inline std::optional<double> render_scale(const Vec3& position, const Camera& camera) {
  const double z = camera.to_camera(position).z();
  if (!(z > kNearDepth)) return std::nullopt;
  return z / std::sqrt(camera.fx * camera.fy);
}

/// Native scale of a surfel plus the optional parent (coarser) and child
/// (finer) bounds that delimit its fade-in and fade-out intervals.
///
/// The log-space interpolation denominators are cached here because the
/// weight is evaluated per surfel per frame.
class ScaleBounds {
 public:
  /// Log gaps at or below this are treated as a step at the native scale.
  static constexpr double kDegenerateLogGap = 1e-12;

  ScaleBounds() = default;

  explicit ScaleBounds(double native, std::optional<double> parent = std::nullopt,
                       std::optional<double> child = std::nullopt) {
    if (!(native > 0.0) || !std::isfinite(native)) {
      throw Error(ErrorCode::InvalidArgument, "native scale must be positive");
    }
    native_ = native;
    log_native_ = std::log(native);
    if (parent) set_parent(*parent);
    if (child) set_child(*child);
  }

  double native() const noexcept { return native_; }
  std::optional<double> parent() const noexcept {
    return has_parent_ ? std::optional<double>(parent_) : std::nullopt;
  }
  std::optional<double> child() const noexcept { return has_child_ ? std::optional<double>(child_) : std::nullopt; }
  bool has_parent() const noexcept { return has_parent_; }
  bool has_child() const noexcept { return has_child_; }

  void set_parent(double parent) {
    if (!(parent >= native_) || !std::isfinite(parent)) {
      throw Error(ErrorCode::InvalidArgument, "parent scale must not be below the native scale");
    }
    parent_ = parent;
    has_parent_ = true;
    const double gap = std::log(parent) - log_native_;
    inv_parent_gap_ = gap > kDegenerateLogGap ? 1.0 / gap : 0.0;
    log_parent_ = std::log(parent);
  }

  void set_child(double child) {
    if (!(child > 0.0) || !(child <= native_)) {
      throw Error(ErrorCode::InvalidArgument, "child scale must be positive and not above the native scale");
    }
    child_ = child;
    has_child_ = true;
    log_child_ = std::log(child);
    const double gap = log_native_ - log_child_;
    inv_child_gap_ = gap > kDegenerateLogGap ? 1.0 / gap : 0.0;
  }

  void clear_child() noexcept {
    has_child_ = false;
    child_ = 0.0;
    log_child_ = 0.0;
    inv_child_gap_ = 0.0;
  }

  /// True when the ordering child < native < parent holds strictly.
  bool strictly_ordered() const noexcept {
    return (!has_parent_ || parent_ > native_) && (!has_child_ || child_ < native_);
  }

  /// Opacity weight at observation scale `s`:
  ///   1                                    no parent and s >= native
  ///   (log p - log s) / (log p - log n)    p >= s >= n
  ///   (log s - log c) / (log n - log c)    n >= s >= c
  ///   1                                    no child and s <= native
  ///   0                                    otherwise
  double weight(double s) const noexcept {
    if (!has_parent_ && s >= native_) return 1.0;
    if (has_parent_ && s >= native_ && s <= parent_) {
      if (inv_parent_gap_ == 0.0) return s == native_ ? 1.0 : 0.0;
      return std::clamp((log_parent_ - std::log(s)) * inv_parent_gap_, 0.0, 1.0);
    }
    if (has_child_ && s <= native_ && s >= child_) {
      if (inv_child_gap_ == 0.0) return s == native_ ? 1.0 : 0.0;
      return std::clamp((std::log(s) - log_child_) * inv_child_gap_, 0.0, 1.0);
    }
    if (!has_child_ && s <= native_) return 1.0;
    return 0.0;
  }

  bool operator==(const ScaleBounds& o) const noexcept {
    return native_ == o.native_ && has_parent_ == o.has_parent_ && has_child_ == o.has_child_ &&
           (!has_parent_ || parent_ == o.parent_) && (!has_child_ || child_ == o.child_);
  }

 private:
  double native_ = 1.0;
  double parent_ = 0.0;
  double child_ = 0.0;
  bool has_parent_ = false;
  bool has_child_ = false;
  double log_native_ = 0.0;
  double log_parent_ = 0.0;
  double log_child_ = 0.0;
  double inv_parent_gap_ = 0.0;
  double inv_child_gap_ = 0.0;
};

/// Scale-aware opacity weight in [0, 1]. The rendered opacity of a surfel is
/// its stored opacity times this weight.
inline double opacity_weight(double s_render, const ScaleBounds& bounds) {
  if (!(s_render > 0.0)) throw Error(ErrorCode::InvalidArgument, "render scale must be positive");
  return bounds.weight(s_render);
}

}  // namespace wz
