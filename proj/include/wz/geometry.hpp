// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "wz/bytes.hpp"
#include "wz/error.hpp"
#include "wz/image.hpp"

namespace wz {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Points at or behind this camera-frame depth cannot be projected.
inline constexpr double kNearDepth = 1e-9;

/// Pinhole camera. `pose` maps world coordinates into the camera frame
/// (x right, y down, z forward). Pixel (x, y) covers [x, x+1) x [y, y+1);
/// its center sits at (x + 0.5, y + 0.5).
struct Camera {
  Mat4 pose = Mat4::Identity();
  double fx = 1024.0;
  double fy = 1024.0;
  double cx = 0.5;
  double cy = 0.5;
  int width = 1;
  int height = 1;

  /// Builds a validated camera; the principal point defaults to the image
  /// center.
  static Camera pinhole(const Mat4& pose, double fx, double fy, int width, int height,
                        std::optional<double> cx = std::nullopt, std::optional<double> cy = std::nullopt) {
    Camera c;
    c.pose = pose;
    c.fx = fx;
    c.fy = fy;
    c.width = width;
    c.height = height;
    c.cx = cx.value_or(width / 2.0);
    c.cy = cy.value_or(height / 2.0);
    c.validate();
    return c;
  }

  Mat3 rotation() const { return pose.topLeftCorner<3, 3>(); }
  Vec3 translation() const { return pose.topRightCorner<3, 1>(); }

  Vec3 to_camera(const Vec3& world) const { return rotation() * world + translation(); }
  Vec3 to_world(const Vec3& camera_point) const { return rotation().transpose() * (camera_point - translation()); }
  Vec3 center() const { return -(rotation().transpose() * translation()); }
  double focal_mean() const { return std::sqrt(fx * fy); }

  void validate() const {
    if (!pose.allFinite()) throw Error(ErrorCode::InvalidCamera, "camera pose is not finite");
    const Mat3 r = rotation();
    if (((r.transpose() * r) - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
      throw Error(ErrorCode::InvalidCamera, "camera rotation is not orthonormal");
    }
    if (std::abs(r.determinant() - 1.0) > 1e-9) {
      throw Error(ErrorCode::InvalidCamera, "camera rotation determinant is not +1");
    }
    if (pose(3, 0) != 0.0 || pose(3, 1) != 0.0 || pose(3, 2) != 0.0 || pose(3, 3) != 1.0) {
      throw Error(ErrorCode::InvalidCamera, "camera pose bottom row must be [0 0 0 1]");
    }
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy)) {
      throw Error(ErrorCode::InvalidCamera, "focal lengths must be positive");
    }
    if (width < 1 || height < 1) throw Error(ErrorCode::InvalidCamera, "image size must be at least 1x1");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw Error(ErrorCode::InvalidCamera, "principal point not finite");
  }

  bool operator==(const Camera& o) const {
    return pose == o.pose && fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width &&
           height == o.height;
  }
};

struct Projection {
  Vec2 pixel = Vec2::Zero();
  double depth = 0.0;
  bool behind = false;
};

/// Pinhole projection. Depth is the camera-frame z coordinate; points with
/// z <= kNearDepth are flagged and carry no pixel.
inline Projection project(const Vec3& world, const Camera& camera) {
  const Vec3 p = camera.to_camera(world);
  Projection out;
  out.depth = p.z();
  out.behind = !(p.z() > kNearDepth);
  if (!out.behind) {
    out.pixel = Vec2(camera.fx * p.x() / p.z() + camera.cx, camera.fy * p.y() / p.z() + camera.cy);
  }
  return out;
}

/// Camera-frame ray through a pixel, scaled to unit z.
inline Vec3 pixel_ray(const Vec2& pixel, const Camera& camera) {
  return Vec3((pixel.x() - camera.cx) / camera.fx, (pixel.y() - camera.cy) / camera.fy, 1.0);
}

inline Vec3 back_project(const Vec2& pixel, double depth, const Camera& camera) {
  if (!(depth > 0.0) || !std::isfinite(depth)) {
    throw Error(ErrorCode::InvalidArgument, "back_project requires positive finite depth");
  }
  return camera.to_world(pixel_ray(pixel, camera) * depth);
}

inline Vec2 pixel_center(int x, int y) { return Vec2(x + 0.5, y + 0.5); }

// ---------------------------------------------------------------------------
// Quaternions are stored as (w, x, y, z).

inline Mat3 rotation_from_quaternion(const Vec4& q) {
  const Vec4 n = q.normalized();
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Vec4 quaternion_from_rotation(const Mat3& r) {
  const Eigen::Quaterniond q(r);
  Vec4 out(q.w(), q.x(), q.y(), q.z());
  return out.normalized();
}

/// Shortest-arc rotation taking `from` onto `to`.
inline Vec4 quaternion_between(const Vec3& from, const Vec3& to) {
  const Eigen::Quaterniond q = Eigen::Quaterniond::FromTwoVectors(from, to);
  return Vec4(q.w(), q.x(), q.y(), q.z()).normalized();
}

inline Mat4 make_pose(const Mat3& rotation, const Vec3& translation) {
  Mat4 pose = Mat4::Identity();
  pose.topLeftCorner<3, 3>() = rotation;
  pose.topRightCorner<3, 1>() = translation;
  return pose;
}

// ---------------------------------------------------------------------------
// Depth maps

/// Per-pixel z-depth along the optical axis plus a validity mask.
struct DepthMap {
  Image<double> values;
  Mask valid;

  DepthMap() = default;
  DepthMap(int width, int height) : values(width, height, 0.0), valid(width, height, 0) {}

  int width() const noexcept { return values.width(); }
  int height() const noexcept { return values.height(); }
  bool is_valid(int x, int y) const noexcept { return valid(x, y) != 0; }
  double operator()(int x, int y) const noexcept { return values(x, y); }

  void set(int x, int y, double depth) noexcept {
    if (std::isfinite(depth) && depth > 0.0) {
      values(x, y) = depth;
      valid(x, y) = 1;
    } else {
      invalidate(x, y);
    }
  }
  void invalidate(int x, int y) noexcept {
    values(x, y) = 0.0;
    valid(x, y) = 0;
  }

  std::size_t valid_count() const { return count_set(valid); }

  bool operator==(const DepthMap&) const = default;
};

/// Binary depth layout: width u32, height u32, then width*height f32 values,
/// row-major, little-endian. Invalid pixels are written as 0.
inline std::vector<std::uint8_t> encode_depth(const DepthMap& depth) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(depth.width()));
  w.u32(static_cast<std::uint32_t>(depth.height()));
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      w.f32(depth.is_valid(x, y) ? static_cast<float>(depth(x, y)) : 0.0f);
    }
  }
  return w.take();
}

inline DepthMap decode_depth(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::uint32_t width = 0, height = 0;
  if (!r.u32(width) || !r.u32(height)) throw Error(ErrorCode::Truncated, "depth file header truncated");
  const std::uint64_t count = std::uint64_t{width} * height;
  if (r.remaining() != count * 4) throw Error(ErrorCode::Truncated, "depth payload size does not match header");
  DepthMap out(static_cast<int>(width), static_cast<int>(height));
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      float v = 0.0f;
      r.f32(v);
      out.set(x, y, static_cast<double>(v));
    }
  }
  return out;
}

inline void save_depth(const std::filesystem::path& path, const DepthMap& depth) {
  write_file(path, encode_depth(depth));
}

inline DepthMap load_depth(const std::filesystem::path& path) {
  try {
    return decode_depth(read_file(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

/// Lossless 16-bit grayscale import: stored value = depth * scale, 0 = invalid.
inline DepthMap depth_from_gray16(const Image<std::uint16_t>& img, double scale) {
  if (!(scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "depth scale must be positive");
  DepthMap out(img.width(), img.height());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (img(x, y) != 0) out.set(x, y, img(x, y) / scale);
    }
  }
  return out;
}

inline Image<std::uint16_t> depth_to_gray16(const DepthMap& depth, double scale) {
  if (!(scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "depth scale must be positive");
  Image<std::uint16_t> out(depth.width(), depth.height(), 0);
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.is_valid(x, y)) continue;
      const double v = std::round(depth(x, y) * scale);
      out(x, y) = static_cast<std::uint16_t>(std::clamp(v, 1.0, 65535.0));
    }
  }
  return out;
}

inline DepthMap load_depth_any(const std::filesystem::path& path, double png_scale = 1000.0) {
  if (path.extension() == ".png") return depth_from_gray16(read_png_gray16(path), png_scale);
  return load_depth(path);
}

// ---------------------------------------------------------------------------
// Normals

/// World-frame unit normals from central differences of back-projected
/// neighbors (one-sided at borders or next to invalid pixels). Normals face
/// the camera. Pixels without a usable tangent pair, and invalid pixels, get
/// the normal pointing back along their viewing ray.
inline Image<Vec3> normals_from_depth(const DepthMap& depth, const Camera& camera) {
  const int w = depth.width(), h = depth.height();
  if (w != camera.width || h != camera.height) {
    throw Error(ErrorCode::DimensionMismatch, "depth map does not match camera size");
  }
  Image<Vec3> points(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (depth.is_valid(x, y)) points(x, y) = pixel_ray(pixel_center(x, y), camera) * depth(x, y);
    }
  }
  auto tangent = [&](int x, int y, int dx, int dy) -> std::optional<Vec3> {
    const bool fwd = depth.valid.contains(x + dx, y + dy) && depth.is_valid(x + dx, y + dy);
    const bool back = depth.valid.contains(x - dx, y - dy) && depth.is_valid(x - dx, y - dy);
    if (fwd && back) return points(x + dx, y + dy) - points(x - dx, y - dy);
    if (fwd) return points(x + dx, y + dy) - points(x, y);
    if (back) return points(x, y) - points(x - dx, y - dy);
    return std::nullopt;
  };

  const Mat3 to_world = camera.rotation().transpose();
  Image<Vec3> normals(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Vec3 facing = -pixel_ray(pixel_center(x, y), camera).normalized();
      Vec3 n = facing;
      if (depth.is_valid(x, y)) {
        const auto tx = tangent(x, y, 1, 0);
        const auto ty = tangent(x, y, 0, 1);
        if (tx && ty) {
          const Vec3 c = tx->cross(*ty);
          const double len = c.norm();
          if (len > 1e-300 && std::isfinite(len)) {
            n = c / len;
            if (n.dot(facing) < 0.0) n = -n;
          }
        }
      }
      normals(x, y) = to_world * n;
    }
  }
  return normals;
}

}  // namespace wz
