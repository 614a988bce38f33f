// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "wz/error.hpp"
#include "wz/image.hpp"
#include "wz/rasterizer.hpp"
#include "wz/scene.hpp"

namespace wz {

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double l1 = 0.8;
  double ssim = 0.2;
};

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

namespace detail {

inline const std::array<double, kSsimWindow>& ssim_kernel() {
  static const std::array<double, kSsimWindow> k = [] {
    std::array<double, kSsimWindow> out{};
    double sum = 0.0;
    for (int i = 0; i < kSsimWindow; ++i) {
      const double d = i - kSsimWindow / 2;
      out[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
      sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
  }();
  return k;
}

using Plane = Image<double>;

/// Separable Gaussian filter with zero padding ("same" output size). The
/// kernel is symmetric, so this operator is its own adjoint.
inline Plane blur(const Plane& in) {
  const auto& k = ssim_kernel();
  const int w = in.width(), h = in.height(), r = kSsimWindow / 2;
  Plane tmp(w, h), out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < w) acc += k[i + r] * in(xx, y);
      }
      tmp(x, y) = acc;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < h) acc += k[i + r] * tmp(x, yy);
      }
      out(x, y) = acc;
    }
  }
  return out;
}

inline Plane channel(const RgbImage& img, int c) {
  Plane p(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) p[i] = img[i][c];
  return p;
}

/// Sum of the SSIM map of one channel; optionally the gradient of that sum
/// with respect to `x`.
inline double ssim_channel(const Plane& x, const Plane& y, Plane* grad_x) {
  const std::size_t n = x.size();
  Plane xx(x.width(), x.height()), yy(x.width(), x.height()), xy(x.width(), x.height());
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const Plane mx = blur(x), my = blur(y), exx = blur(xx), eyy = blur(yy), exy = blur(xy);
  Plane g_mu(x.width(), x.height()), g_exx(x.width(), x.height()), g_exy(x.width(), x.height());
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = exx[i] - mx[i] * mx[i];
    const double vy = eyy[i] - my[i] * my[i];
    const double cxy = exy[i] - mx[i] * my[i];
    const double a1 = 2.0 * mx[i] * my[i] + kSsimC1;
    const double a2 = 2.0 * cxy + kSsimC2;
    const double b1 = mx[i] * mx[i] + my[i] * my[i] + kSsimC1;
    const double b2 = vx + vy + kSsimC2;
    const double s = (a1 * a2) / (b1 * b2);
    sum += s;
    if (grad_x) {
      g_mu[i] = s * (2.0 * my[i] / a1 - 2.0 * my[i] / a2 - 2.0 * mx[i] / b1 + 2.0 * mx[i] / b2);
      g_exx[i] = -s / b2;
      g_exy[i] = 2.0 * s / a2;
    }
  }
  if (grad_x) {
    const Plane bmu = blur(g_mu), bxx = blur(g_exx), bxy = blur(g_exy);
    *grad_x = Plane(x.width(), x.height());
    for (std::size_t i = 0; i < n; ++i) (*grad_x)[i] = bmu[i] + 2.0 * x[i] * bxx[i] + y[i] * bxy[i];
  }
  return sum;
}

inline void require_same_size(const RgbImage& a, const RgbImage& b) {
  if (!a.same_size(b) || a.empty()) throw Error(ErrorCode::DimensionMismatch, "image sizes differ");
}

}  // namespace detail

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5).
inline double ssim(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b);
  double sum = 0.0;
  for (int c = 0; c < 3; ++c) sum += detail::ssim_channel(detail::channel(a, c), detail::channel(b, c), nullptr);
  return sum / (3.0 * static_cast<double>(a.size()));
}

inline double mean_abs_error(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]).cwiseAbs().sum();
  return sum / (3.0 * static_cast<double>(a.size()));
}

inline double psnr(const RgbImage& a, const RgbImage& b) {
  detail::require_same_size(a, b);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]).squaredNorm();
  const double mse = sum / (3.0 * static_cast<double>(a.size()));
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

/// w_l1 * mean|r - t| + w_ssim * (1 - SSIM(r, t)) / 2.
inline double photometric_loss(const RgbImage& render, const RgbImage& target, const LossWeights& w = {}) {
  return w.l1 * mean_abs_error(render, target) + w.ssim * (1.0 - ssim(render, target)) / 2.0;
}

inline double photometric_loss(const Frame& render, const RgbImage& target, const LossWeights& w = {}) {
  return photometric_loss(render.color, target, w);
}

/// Loss and its gradient with respect to every pixel of `render`.
inline double photometric_loss_gradient(const RgbImage& render, const RgbImage& target, RgbImage& grad,
                                        const LossWeights& w = {}) {
  detail::require_same_size(render, target);
  const double n = 3.0 * static_cast<double>(render.size());
  grad = RgbImage(render.width(), render.height());
  double l1 = 0.0, ssim_sum = 0.0;
  for (std::size_t i = 0; i < render.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double d = render[i][c] - target[i][c];
      l1 += std::abs(d);
      grad[i][c] = w.l1 * static_cast<double>((d > 0.0) - (d < 0.0)) / n;
    }
  }
  for (int c = 0; c < 3; ++c) {
    detail::Plane g;
    ssim_sum += detail::ssim_channel(detail::channel(render, c), detail::channel(target, c), &g);
    for (std::size_t i = 0; i < render.size(); ++i) grad[i][c] -= 0.5 * w.ssim * g[i] / n;
  }
  return w.l1 * l1 / n + w.ssim * (1.0 - ssim_sum / n) / 2.0;
}

// ---------------------------------------------------------------------------
// Backward pass

/// Gradients for the optimizable parameters of one layer, indexed like its
/// surfels. Quaternion gradients are with respect to the stored (unnormalized
/// in general) 4-vector; opacity gradients with respect to stored opacity.
struct LayerGradient {
  std::vector<Vec4> rotation;
  std::vector<Vec2> scale;
  std::vector<double> opacity;

  explicit LayerGradient(std::size_t n = 0) : rotation(n, Vec4::Zero()), scale(n, Vec2::Zero()), opacity(n, 0.0) {}
};

struct BackwardResult {
  double loss = 0.0;
  Frame frame;
  LayerGradient gradient;
};

namespace detail {

/// d(loss)/d(rotation matrix) -> d(loss)/d(quaternion), through normalization.
inline Vec4 quaternion_gradient(const Vec4& q, const Mat3& g) {
  const double len = q.norm();
  const Vec4 n = q / len;
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  Vec4 d;
  d[0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  d[1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                w * g(2, 1) - 2.0 * x * g(2, 2));
  d[2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                z * g(2, 1) - 2.0 * y * g(2, 2));
  d[3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) +
                y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return (d - n * n.dot(d)) / len;
}

/// Per-splat accumulators: d/d(modulated opacity) and d/d(conic entries
/// a, b, c of m = a dx^2 + 2 b dx dy + c dy^2), the latter w.r.t. b itself.
struct SplatGrad {
  double opacity = 0.0;
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
};

}  // namespace detail

/// Renders `layers` at `camera`, evaluates the photometric loss against
/// `target`, and returns gradients for the q, s, o of layer `optimized`.
/// Opacity modulation weights are constants here (they depend only on frozen
/// positions and bounds).
inline BackwardResult render_backward(LayerRefs layers, std::size_t optimized, const Camera& camera,
                                      const RgbImage& target, const RenderConfig& config = {},
                                      const LossWeights& weights = {}) {
  camera.validate();
  config.validate();
  if (optimized >= layers.size()) throw Error(ErrorCode::InvalidArgument, "optimized layer index out of range");
  if (target.width() != camera.width || target.height() != camera.height) {
    throw Error(ErrorCode::DimensionMismatch, "target does not match camera size");
  }
  const std::vector<Splat> splats = cull(layers, camera, config);
  BackwardResult out;
  out.frame = composite(splats, camera, config);
  RgbImage dcolor;
  out.loss = photometric_loss_gradient(out.frame.color, target, dcolor, weights);
  out.gradient = LayerGradient(layers[optimized]->surfels.size());

  const int w = camera.width, h = camera.height;
  const detail::TileBins bins = detail::bin_splats(splats, w, h);
  const double cut2 = config.cutoff * config.cutoff;
  std::vector<std::vector<detail::SplatGrad>> tile_grads(bins.bins.size());
  const auto target_layer = static_cast<std::uint32_t>(optimized);

  detail::for_each_tile(bins, config.workers, [&](int tx, int ty, int tile) {
    const auto& list = bins.at(tx, ty);
    auto& acc = tile_grads[static_cast<std::size_t>(tile)];
    acc.assign(list.size(), {});
    struct Hit {
      std::uint32_t slot;
      double alpha, transmittance, gauss, dx, dy;
      bool clamped;
    };
    std::vector<Hit> hits;
    const int y_end = std::min(h, (ty + 1) * kTileSize);
    const int x_end = std::min(w, (tx + 1) * kTileSize);
    for (int y = ty * kTileSize; y < y_end; ++y) {
      for (int x = tx * kTileSize; x < x_end; ++x) {
        hits.clear();
        double t = 1.0;
        for (std::uint32_t slot = 0; slot < list.size(); ++slot) {
          const Splat& sp = splats[list[slot]];
          const double m = detail::mahalanobis(sp.footprint, x, y);
          if (m > cut2) continue;
          const double g = std::exp(-0.5 * m);
          const double raw = sp.opacity * g;
          const double a = std::min(config.max_alpha, raw);
          hits.push_back({slot, a, t, g, x + 0.5 - sp.footprint.mean.x(), y + 0.5 - sp.footprint.mean.y(),
                          raw > config.max_alpha});
          t *= 1.0 - a;
          if (t < config.transmittance_floor) break;
        }
        const Rgb dl = dcolor(x, y);
        Rgb after = config.background * t;  // color contributed behind the current hit
        for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
          const Splat& sp = splats[list[it->slot]];
          const Rgb dc_da = sp.color * it->transmittance - after / (1.0 - it->alpha);
          after += sp.color * (it->alpha * it->transmittance);
          if (sp.layer != target_layer || it->clamped) continue;
          const double dl_da = dl.dot(dc_da);
          detail::SplatGrad& sg = acc[it->slot];
          sg.opacity += dl_da * it->gauss;
          const double dl_dm = -0.5 * dl_da * sp.opacity * it->gauss;
          sg.a += dl_dm * it->dx * it->dx;
          sg.b += dl_dm * 2.0 * it->dx * it->dy;
          sg.c += dl_dm * it->dy * it->dy;
        }
      }
    }
  });

  // Deterministic reduction in tile order.
  std::vector<detail::SplatGrad> per_splat(splats.size());
  for (std::size_t t = 0; t < bins.bins.size(); ++t) {
    const auto& list = bins.bins[t];
    for (std::size_t slot = 0; slot < list.size(); ++slot) {
      const auto& g = tile_grads[t][slot];
      auto& dst = per_splat[list[slot]];
      dst.opacity += g.opacity;
      dst.a += g.a;
      dst.b += g.b;
      dst.c += g.c;
    }
  }

  const auto& surfels = layers[optimized]->surfels;
  for (std::size_t k = 0; k < splats.size(); ++k) {
    const Splat& sp = splats[k];
    if (sp.layer != target_layer) continue;
    const detail::SplatGrad& g = per_splat[k];
    const Surfel& s = surfels[sp.index];
    if (!config.force_opaque) out.gradient.opacity[sp.index] = g.opacity * sp.weight;

    const Mat2& conic = sp.footprint.conic;
    Mat2 gk;
    gk << g.a, 0.5 * g.b, 0.5 * g.b, g.c;
    const Mat2 dcov = -conic * gk * conic;
    const Mat3 dsigma = sp.footprint.jacobian.transpose() * dcov * sp.footprint.jacobian;
    const Mat3 r = rotation_from_quaternion(s.rotation);
    const double eps = surfel_thickness(s.scale);
    const Vec3 d(s.scale.x() * s.scale.x(), s.scale.y() * s.scale.y(), eps * eps);
    const Mat3 dr = 2.0 * dsigma * r * d.asDiagonal();
    const Mat3 dd = r.transpose() * dsigma * r;
    out.gradient.rotation[sp.index] = detail::quaternion_gradient(s.rotation, dr);
    const double deps = 2.0 * eps * kThicknessRatio * dd(2, 2);
    Vec2 ds(2.0 * s.scale.x() * dd(0, 0), 2.0 * s.scale.y() * dd(1, 1));
    if (s.scale.x() <= s.scale.y()) {
      ds.x() += deps;
    } else {
      ds.y() += deps;
    }
    out.gradient.scale[sp.index] = ds;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimConfig {
  int steps = 500;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;    // applied in log-scale space
  double lr_opacity = 5e-2;  // applied in logit space
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-15;
  LossWeights loss;
  double min_scale = 1e-6;

  void validate() const {
    if (steps < 0) throw Error(ErrorCode::InvalidArgument, "steps must be non-negative");
    if (std::abs(loss.l1 + loss.ssim - 1.0) > 1e-12) {
      throw Error(ErrorCode::InvalidArgument, "loss weights must sum to 1");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw Error(ErrorCode::InvalidArgument, "Adam betas must lie in [0, 1)");
    }
  }
};

struct TrainingView {
  RgbImage image;
  Camera camera;
};

struct TraceRow {
  int step = 0;
  double loss = 0.0;
  double psnr = 0.0;
};

struct LayerFit {
  ScaleLayer layer;
  std::vector<TraceRow> trace;
  double initial_loss = 0.0;  // mean over views before the first step
  double final_loss = 0.0;    // mean over views after the last step
};

/// Adam over a flat parameter vector.
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> params, std::span<const double> grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grads[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grads[i] * grads[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<double> m_, v_;
};

inline double logit(double p) {
  const double c = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return std::log(c / (1.0 - c));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

namespace detail {

inline double mean_view_loss(LayerRefs layers, std::span<const TrainingView> views, const RenderConfig& render,
                             const LossWeights& w) {
  double sum = 0.0;
  for (const auto& v : views) sum += photometric_loss(render_color(layers, v.camera, render).color, v.image, w);
  return sum / static_cast<double>(views.size());
}

}  // namespace detail

/// Fits rotation, scales and opacity of `layers[index]` to `views`, one view
/// per step in round-robin order. All other layers are rendered but frozen;
/// positions, colors and bounds of the fitted layer are untouched.
inline LayerFit optimize_layer(LayerRefs layers, std::size_t index, std::span<const TrainingView> views,
                               const OptimConfig& config = {}, const RenderConfig& render = {}) {
  config.validate();
  if (views.empty()) throw Error(ErrorCode::InvalidArgument, "optimize_layer needs at least one view");
  if (index >= layers.size()) throw Error(ErrorCode::InvalidArgument, "layer index out of range");

  LayerFit fit;
  fit.layer = *layers[index];
  std::vector<const ScaleLayer*> refs(layers.begin(), layers.end());
  refs[index] = &fit.layer;
  fit.initial_loss = detail::mean_view_loss(refs, views, render, config.loss);
  if (config.steps == 0) {
    fit.final_loss = fit.initial_loss;
    return fit;
  }

  auto& surfels = fit.layer.surfels;
  const std::size_t n = surfels.size();
  std::vector<double> q(4 * n), log_s(2 * n), logit_o(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k) q[4 * i + k] = surfels[i].rotation[k];
    log_s[2 * i] = std::log(surfels[i].scale.x());
    log_s[2 * i + 1] = std::log(surfels[i].scale.y());
    logit_o[i] = logit(surfels[i].opacity);
  }
  Adam adam_q(q.size(), config.lr_rotation, config.beta1, config.beta2, config.eps);
  Adam adam_s(log_s.size(), config.lr_scale, config.beta1, config.beta2, config.eps);
  Adam adam_o(logit_o.size(), config.lr_opacity, config.beta1, config.beta2, config.eps);
  std::vector<double> gq(q.size()), gs(log_s.size()), go(logit_o.size());

  for (int step = 0; step < config.steps; ++step) {
    const TrainingView& view = views[static_cast<std::size_t>(step) % views.size()];
    const BackwardResult br = render_backward(refs, index, view.camera, view.image, render, config.loss);
    fit.trace.push_back({step, br.loss, psnr(br.frame.color, view.image)});
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 4; ++k) gq[4 * i + k] = br.gradient.rotation[i][k];
      gs[2 * i] = br.gradient.scale[i].x() * surfels[i].scale.x();
      gs[2 * i + 1] = br.gradient.scale[i].y() * surfels[i].scale.y();
      const double o = surfels[i].opacity;
      go[i] = br.gradient.opacity[i] * o * (1.0 - o);
    }
    adam_q.step(q, gq);
    adam_s.step(log_s, gs);
    adam_o.step(logit_o, go);
    for (std::size_t i = 0; i < n; ++i) {
      Vec4 r(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]);
      const double len = r.norm();
      r = len > 0.0 ? Vec4(r / len) : Vec4(1, 0, 0, 0);
      for (int k = 0; k < 4; ++k) q[4 * i + k] = r[k];
      surfels[i].rotation = r;
      for (int k = 0; k < 2; ++k) {
        log_s[2 * i + k] = std::max(log_s[2 * i + k], std::log(config.min_scale));
        surfels[i].scale[k] = std::max(std::exp(log_s[2 * i + k]), config.min_scale);
      }
      surfels[i].opacity = std::clamp(sigmoid(logit_o[i]), 0.0, 1.0);
    }
  }
  fit.final_loss = detail::mean_view_loss(refs, views, render, config.loss);
  return fit;
}

inline LayerFit optimize_layer(const SceneSnapshot& scene, std::size_t index, std::span<const TrainingView> views,
                               const OptimConfig& config = {}, const RenderConfig& render = {}) {
  const auto refs = scene.layer_refs();
  return optimize_layer(refs, index, views, config, render);
}

inline void write_trace_csv(const std::filesystem::path& path, std::span<const TraceRow> trace) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "step,loss,psnr\n";
  out.precision(10);
  for (const auto& r : trace) out << r.step << ',' << r.loss << ',' << r.psnr << '\n';
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace wz
