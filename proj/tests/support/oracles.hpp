// SPDX-License-Identifier: Apache-2.0
// Independent reference implementations used as test oracles. They share no
// code with the engine beyond plain data types.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/scene.hpp"

namespace wz::oracle {

/// Opacity schedule written straight from its case table.
inline double schedule(double s, double native, std::optional<double> parent, std::optional<double> child) {
  const double ls = std::log(s), ln = std::log(native);
  if (!parent && s >= native) return 1.0;
  if (parent && *parent >= s && s >= native) return (std::log(*parent) - ls) / (std::log(*parent) - ln);
  if (child && native >= s && s >= *child) return (ls - std::log(*child)) / (ln - std::log(*child));
  if (!child && s <= native) return 1.0;
  return 0.0;
}

/// Unit-quaternion rotation from the textbook Hamilton formula.
inline Mat3 rotation(Vec4 q) {
  q /= q.norm();
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

struct RefSplat {
  double depth;
  std::uint32_t layer, index;
  Vec2 mean;
  Mat2 inv;
  double opacity;
  Rgb color;
};

struct RefOptions {
  double cutoff = 3.0;
  bool modulation = true;
  Rgb background = Rgb::Zero();
};

/// Global depth sort, then every pixel walks every splat.
inline RgbImage render(const std::vector<const ScaleLayer*>& layers, const Camera& cam, const RefOptions& opt = {}) {
  std::vector<RefSplat> splats;
  const double focal = std::sqrt(cam.fx * cam.fy);
  const Mat3 w = cam.pose.topLeftCorner<3, 3>();
  const Vec3 t = cam.pose.topRightCorner<3, 1>();
  for (std::uint32_t li = 0; li < layers.size(); ++li) {
    for (std::uint32_t si = 0; si < layers[li]->surfels.size(); ++si) {
      const Surfel& s = layers[li]->surfels[si];
      const Vec3 p = w * s.position + t;
      if (p.z() <= 1e-9) continue;
      double a = 1.0;
      if (opt.modulation) {
        a = schedule(p.z() / focal, s.bounds.native(), s.bounds.parent(), s.bounds.child());
        if (a <= 0.0) continue;
      }
      const Mat3 r = rotation(s.rotation);
      const double eps = 0.01 * std::min(s.scale.x(), s.scale.y());
      Mat3 d = Mat3::Zero();
      d(0, 0) = s.scale.x() * s.scale.x();
      d(1, 1) = s.scale.y() * s.scale.y();
      d(2, 2) = eps * eps;
      const Mat3 sigma = r * d * r.transpose();
      Eigen::Matrix<double, 2, 3> j;
      j << cam.fx / p.z(), 0, -cam.fx * p.x() / (p.z() * p.z()), 0, cam.fy / p.z(), -cam.fy * p.y() / (p.z() * p.z());
      Mat2 cov = j * w * sigma * w.transpose() * j.transpose();
      cov += 0.3 * Mat2::Identity();
      splats.push_back({p.z(), li, si, Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy),
                        cov.inverse(), s.opacity * a, s.color});
    }
  }
  std::sort(splats.begin(), splats.end(), [](const RefSplat& a, const RefSplat& b) {
    return std::tie(a.depth, a.layer, a.index) < std::tie(b.depth, b.layer, b.index);
  });
  RgbImage out(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      double tr = 1.0;
      Rgb c = Rgb::Zero();
      for (const auto& sp : splats) {
        const Vec2 d = Vec2(x + 0.5, y + 0.5) - sp.mean;
        const double m = d.dot(sp.inv * d);
        if (m > opt.cutoff * opt.cutoff) continue;
        const double alpha = std::min(0.99, sp.opacity * std::exp(-0.5 * m));
        c += sp.color * alpha * tr;
        tr *= 1.0 - alpha;
        if (tr < 1e-4) break;
      }
      out(x, y) = c + opt.background * tr;
    }
  }
  return out;
}

/// Direct windowed SSIM: for every pixel sum the Gaussian window explicitly,
/// treating out-of-image samples as zero.
inline double ssim(const RgbImage& a, const RgbImage& b) {
  const int r = 5;
  double k[11], ksum = 0.0;
  for (int i = -r; i <= r; ++i) ksum += k[i + r] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
  for (double& v : k) v /= ksum;
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < a.height(); ++y) {
      for (int x = 0; x < a.width(); ++x) {
        double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const int u = x + dx, v = y + dy;
            if (u < 0 || v < 0 || u >= a.width() || v >= a.height()) continue;
            const double wgt = k[dx + r] * k[dy + r];
            const double p = a(u, v)[ch], q = b(u, v)[ch];
            mx += wgt * p;
            my += wgt * q;
            sxx += wgt * p * p;
            syy += wgt * q * q;
            sxy += wgt * p * q;
          }
        }
        const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
        total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      }
    }
  }
  return total / (3.0 * a.width() * a.height());
}

inline double max_abs_diff(const RgbImage& a, const RgbImage& b) {
  double m = 0.0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) m = std::max(m, (a(x, y) - b(x, y)).cwiseAbs().maxCoeff());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Random content

inline Vec4 random_quaternion(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec4 q(n(rng), n(rng), n(rng), n(rng));
  return q / q.norm();
}

/// Surfels scattered in front of an identity camera, sized to a few pixels.
inline ScaleLayer random_layer(std::mt19937_64& rng, const Camera& cam, int count, double min_px = 0.7,
                               double max_px = 4.0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ScaleLayer layer;
  layer.creation_camera = cam;
  for (int i = 0; i < count; ++i) {
    Surfel s;
    const double d = 2.0 + 6.0 * u(rng);
    const Vec2 px(u(rng) * cam.width, u(rng) * cam.height);
    s.position = cam.to_world(Vec3((px.x() - cam.cx) * d / cam.fx, (px.y() - cam.cy) * d / cam.fy, d));
    s.rotation = random_quaternion(rng);
    const double f = std::sqrt(cam.fx * cam.fy);
    s.scale = Vec2(min_px + (max_px - min_px) * u(rng), min_px + (max_px - min_px) * u(rng)) * d / f;
    s.opacity = 0.1 + 0.85 * u(rng);
    s.color = Rgb(u(rng), u(rng), u(rng));
    s.bounds = ScaleBounds(d / f);
    layer.surfels.push_back(s);
  }
  return layer;
}

inline RgbImage random_image(std::mt19937_64& rng, int w, int h) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RgbImage img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) img(x, y) = Rgb(u(rng), u(rng), u(rng));
  }
  return img;
}

}  // namespace wz::oracle
