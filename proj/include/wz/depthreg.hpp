// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/image.hpp"
#include "wz/rasterizer.hpp"

namespace wz {

struct AffineDepthParams {
  double a = 1.0;
  double b = 0.0;

  double apply(double d) const noexcept { return a * d + b; }
  bool operator==(const AffineDepthParams&) const = default;
};

struct AlignResult {
  AffineDepthParams params;
  double residual = 0.0;  // masked mean absolute error after alignment
  std::size_t samples = 0;
};

struct AlignConfig {
  int iterations = 20;
  double weight_floor = 1e-6;
  bool robust = true;  // false: stop at the least-squares initializer
  std::size_t min_segment_pixels = 32;
  int feather_radius = 2;
  int ring_width = 3;
};

/// Pixel-wise label image; 0 means "no segment".
struct SegmentSet {
  Image<std::uint32_t> labels;
  std::uint32_t count = 0;  // labels lie in [0, count)

  void validate(int width, int height) const {
    if (labels.width() != width || labels.height() != height) {
      throw Error(ErrorCode::DimensionMismatch, "segment labels do not match the depth map");
    }
    for (const auto l : labels.pixels()) {
      if (l >= count) throw Error(ErrorCode::InvalidArgument, "segment label outside [0, count)");
    }
  }

  static SegmentSet from_labels(Image<std::uint32_t> labels) {
    SegmentSet s;
    std::uint32_t max_label = 0;
    for (const auto l : labels.pixels()) max_label = std::max(max_label, l);
    s.count = labels.empty() ? 0 : max_label + 1;
    s.labels = std::move(labels);
    return s;
  }
};

/// 16-bit grayscale label image, value = segment id.
inline SegmentSet load_segments_png(const std::filesystem::path& path) {
  const Image<std::uint16_t> img = read_png_gray16(path);
  Image<std::uint32_t> labels(img.width(), img.height());
  for (std::size_t i = 0; i < img.size(); ++i) labels[i] = img[i];
  return SegmentSet::from_labels(std::move(labels));
}

/// Run-length JSON: {"width": W, "height": H, "runs": [[label, length], ...]}
/// covering the image in row-major order.
inline SegmentSet segments_from_json(const nlohmann::json& j) {
  try {
    const int w = j.at("width").get<int>();
    const int h = j.at("height").get<int>();
    if (w < 1 || h < 1) throw Error(ErrorCode::InvalidArgument, "segment image size must be positive");
    Image<std::uint32_t> labels(w, h);
    std::size_t pos = 0;
    for (const auto& run : j.at("runs")) {
      const auto label = run.at(0).get<std::uint32_t>();
      const auto length = run.at(1).get<std::size_t>();
      if (pos + length > labels.size()) throw Error(ErrorCode::InvalidArgument, "segment runs overflow the image");
      std::fill_n(labels.pixels().begin() + static_cast<std::ptrdiff_t>(pos), length, label);
      pos += length;
    }
    if (pos != labels.size()) throw Error(ErrorCode::InvalidArgument, "segment runs do not cover the image");
    return SegmentSet::from_labels(std::move(labels));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("malformed segment JSON: ") + e.what());
  }
}

inline nlohmann::json segments_to_json(const SegmentSet& s) {
  nlohmann::json runs = nlohmann::json::array();
  const auto px = s.labels.pixels();
  for (std::size_t i = 0; i < px.size();) {
    std::size_t j = i;
    while (j < px.size() && px[j] == px[i]) ++j;
    runs.push_back({px[i], j - i});
    i = j;
  }
  return {{"width", s.labels.width()}, {"height", s.labels.height()}, {"runs", runs}};
}

inline SegmentSet load_segments(const std::filesystem::path& path) {
  if (path.extension() == ".png") return load_segments_png(path);
  const auto bytes = read_file(path);
  try {
    return segments_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::InvalidArgument, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Alignment

namespace detail {

struct DepthSample {
  double pred;
  double target;
};

inline std::vector<DepthSample> masked_samples(const DepthMap& pred, const DepthMap& target, const Mask& mask,
                                               const Image<std::uint32_t>* labels = nullptr,
                                               std::uint32_t label = 0) {
  std::vector<DepthSample> out;
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      if (!mask(x, y) || !pred.is_valid(x, y) || !target.is_valid(x, y)) continue;
      if (labels && (*labels)(x, y) != label) continue;
      out.push_back({pred(x, y), target(x, y)});
    }
  }
  return out;
}

inline double mean_abs_residual(std::span<const DepthSample> s, const AffineDepthParams& p) {
  double sum = 0.0;
  for (const auto& d : s) sum += std::abs(d.target - p.apply(d.pred));
  return s.empty() ? 0.0 : sum / static_cast<double>(s.size());
}

/// Weighted least squares for target ~ a * pred + b; empty when singular.
inline std::optional<AffineDepthParams> weighted_fit(std::span<const DepthSample> s, std::span<const double> w) {
  double sw = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    sw += w[i];
    sp += w[i] * s[i].pred;
    st += w[i] * s[i].target;
  }
  if (!(sw > 0.0)) return std::nullopt;
  const double mp = sp / sw, mt = st / sw;
  double spp = 0, spt = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double dp = s[i].pred - mp;
    spp += w[i] * dp * dp;
    spt += w[i] * dp * (s[i].target - mt);
  }
  if (!(spp > 1e-300) || !std::isfinite(spp)) return std::nullopt;
  const double a = spt / spp;
  return AffineDepthParams{a, mt - a * mp};
}

inline bool has_spread(std::span<const DepthSample> s) {
  if (s.size() < 2) return false;
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end(), [](auto& l, auto& r) { return l.pred < r.pred; });
  return hi->pred - lo->pred > 1e-12 * std::max(1.0, std::abs(hi->pred));
}

/// L1 fit by IRLS from the least-squares start. Keeps the best iterate seen,
/// so the result never scores worse than the initializer.
inline AlignResult robust_fit(std::span<const DepthSample> s, const AlignConfig& cfg) {
  if (!has_spread(s)) throw Error(ErrorCode::DegenerateFit, "depth alignment needs at least two distinct predictions");
  std::vector<double> w(s.size(), 1.0);
  auto init = weighted_fit(s, w);
  if (!init) throw Error(ErrorCode::DegenerateFit, "least-squares depth fit is singular");
  AlignResult best{*init, mean_abs_residual(s, *init), s.size()};
  if (cfg.robust) {
    AffineDepthParams cur = *init;
    for (int it = 0; it < cfg.iterations; ++it) {
      for (std::size_t i = 0; i < s.size(); ++i) {
        w[i] = 1.0 / std::max(std::abs(s[i].target - cur.apply(s[i].pred)), cfg.weight_floor);
      }
      auto next = weighted_fit(s, w);
      if (!next) break;
      cur = *next;
      const double r = mean_abs_residual(s, cur);
      if (r < best.residual) best = {cur, r, s.size()};
    }
  }
  return best;
}

}  // namespace detail

/// Masked mean absolute depth discrepancy |target - depth| over pixels where
/// `mask`, `depth` and `target` are all valid.
inline double masked_depth_error(const DepthMap& depth, const DepthMap& target, const Mask& mask) {
  const auto s = detail::masked_samples(depth, target, mask);
  return detail::mean_abs_residual(s, {});
}

/// Mask of pixels where both maps are valid.
inline Mask overlap_mask(const DepthMap& a, const DepthMap& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw Error(ErrorCode::DimensionMismatch, "depth maps differ in size");
  }
  Mask m(a.width(), a.height(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (a.valid[i] && b.valid[i]) ? 1 : 0;
  return m;
}

inline DepthMap apply_affine(const DepthMap& pred, const AffineDepthParams& p) {
  DepthMap out(pred.width(), pred.height());
  for (int y = 0; y < pred.height(); ++y) {
    for (int x = 0; x < pred.width(); ++x) {
      if (!pred.is_valid(x, y)) continue;
      const double d = p.apply(pred(x, y));
      if (d > 0.0 && std::isfinite(d)) out.set(x, y, d);
    }
  }
  return out;
}

/// Scale and shift minimizing the masked mean absolute error of
/// |target - (a * pred + b)|.
inline AlignResult global_align(const DepthMap& pred, const DepthMap& target, const Mask& mask,
                                const AlignConfig& cfg = {}) {
  if (pred.width() != target.width() || pred.height() != target.height() || !mask.same_size(pred.values)) {
    throw Error(ErrorCode::DimensionMismatch, "depth maps and mask differ in size");
  }
  const auto s = detail::masked_samples(pred, target, mask);
  AlignResult r = detail::robust_fit(s, cfg);
  if (!(r.params.a > 0.0)) throw Error(ErrorCode::DegenerateFit, "depth alignment produced a non-positive scale");
  return r;
}

struct SegmentFit {
  std::uint32_t label = 0;
  std::optional<AlignResult> fit;  // empty: too few masked pixels, global kept
};

struct SegmentAlignment {
  DepthMap depth;
  std::vector<SegmentFit> segments;  // indexed by label; entry 0 is unassigned
};

/// Per-segment affine refinement on top of `global`. Segments with fewer than
/// cfg.min_segment_pixels masked pixels (or a degenerate fit) keep the global
/// parameters. Parameters are blended across boundaries by the label mix in a
/// (2r+1)^2 window, r = cfg.feather_radius.
inline SegmentAlignment segment_align(const DepthMap& pred, const DepthMap& target, const Mask& mask,
                                      const SegmentSet& segments, const AffineDepthParams& global,
                                      const AlignConfig& cfg = {}) {
  const int w = pred.width(), h = pred.height();
  segments.validate(w, h);
  SegmentAlignment out;
  out.segments.resize(segments.count);
  std::vector<AffineDepthParams> params(segments.count, global);
  for (std::uint32_t l = 1; l < segments.count; ++l) {
    out.segments[l].label = l;
    const auto s = detail::masked_samples(pred, target, mask, &segments.labels, l);
    if (s.size() < cfg.min_segment_pixels) continue;
    try {
      AlignResult r = detail::robust_fit(s, cfg);
      if (!(r.params.a > 0.0)) continue;
      // Never accept a segment fit that scores worse than the global one.
      if (r.residual > detail::mean_abs_residual(s, global)) continue;
      params[l] = r.params;
      out.segments[l].fit = r;
    } catch (const Error&) {
    }
  }

  out.depth = DepthMap(w, h);
  const int rad = std::max(0, cfg.feather_radius);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!pred.is_valid(x, y)) continue;
      double a = 0.0, b = 0.0;
      int n = 0;
      for (int dy = -rad; dy <= rad; ++dy) {
        for (int dx = -rad; dx <= rad; ++dx) {
          if (!segments.labels.contains(x + dx, y + dy)) continue;
          const auto& p = params[segments.labels(x + dx, y + dy)];
          a += p.a;
          b += p.b;
          ++n;
        }
      }
      const double d = (a / n) * pred(x, y) + b / n;
      if (d > 0.0 && std::isfinite(d)) out.depth.set(x, y, d);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masks

/// Euclidean dilation by `radius` pixels.
inline Mask dilate(const Mask& m, int radius) {
  Mask out(m.width(), m.height(), 0);
  const int r2 = radius * radius;
  for (int y = 0; y < m.height(); ++y) {
    for (int x = 0; x < m.width(); ++x) {
      if (!m(x, y)) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy <= r2 && out.contains(x + dx, y + dy)) out(x + dx, y + dy) = 1;
        }
      }
    }
  }
  return out;
}

inline Mask invert(const Mask& m) {
  Mask out(m.width(), m.height(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] ? 0 : 1;
  return out;
}

inline std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

/// Shifts the depth inside `object` so the median over its inner boundary
/// band (object pixels within `ring` of the outside) equals the median of
/// `depth` over the surrounding ring (ring-pixel dilation minus the object).
/// Returns the applied shift, or nothing when either band has no valid depth.
inline std::optional<double> anchor_object(DepthMap& depth, const Mask& object, int ring = 3) {
  if (!object.same_size(depth.values)) throw Error(ErrorCode::DimensionMismatch, "object mask size mismatch");
  const Mask outer = dilate(object, ring);
  const Mask near_outside = dilate(invert(object), ring);
  std::vector<double> ring_depths, band_depths;
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      if (!depth.is_valid(x, y)) continue;
      if (outer(x, y) && !object(x, y)) ring_depths.push_back(depth(x, y));
      if (object(x, y) && near_outside(x, y)) band_depths.push_back(depth(x, y));
    }
  }
  const auto around = median(std::move(ring_depths));
  const auto edge = median(std::move(band_depths));
  if (!around || !edge) return std::nullopt;
  const double shift = *around - *edge;
  for (int y = 0; y < depth.height(); ++y) {
    for (int x = 0; x < depth.width(); ++x) {
      if (!object(x, y) || !depth.is_valid(x, y)) continue;
      const double d = depth(x, y) + shift;
      if (d > 0.0 && std::isfinite(d)) {
        depth.set(x, y, d);
      } else {
        depth.invalidate(x, y);
      }
    }
  }
  return shift;
}

// ---------------------------------------------------------------------------
// Full registration

struct Registration {
  DepthMap depth;
  bool passthrough = false;  // no usable coarse coverage; input returned unchanged
  std::optional<AlignResult> global;
  double input_error = 0.0;   // masked MAE before alignment
  double output_error = 0.0;  // masked MAE after alignment (before object anchoring)
  std::vector<std::optional<double>> object_shifts;
};

/// Registers `fine` to a known target depth: global affine fit, optional
/// per-segment refinement, then re-anchoring of novel objects.
inline Registration register_depth_to_target(const DepthMap& fine, const DepthMap& target,
                                             const SegmentSet* segments = nullptr,
                                             std::span<const Mask> novel_objects = {}, const AlignConfig& cfg = {}) {
  Registration out;
  const Mask mask = overlap_mask(fine, target);
  out.input_error = masked_depth_error(fine, target, mask);
  try {
    out.global = global_align(fine, target, mask, cfg);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::DegenerateFit) throw;
  }
  if (!out.global) {
    out.depth = fine;
    out.passthrough = true;
    out.output_error = out.input_error;
    return out;
  }
  DepthMap aligned = apply_affine(fine, out.global->params);
  if (segments) aligned = segment_align(fine, target, mask, *segments, out.global->params, cfg).depth;
  // Alignment must not worsen the masked error; fall back to the better map.
  double err = masked_depth_error(aligned, target, mask);
  if (segments) {
    DepthMap global_only = apply_affine(fine, out.global->params);
    const double g = masked_depth_error(global_only, target, mask);
    if (g < err) {
      aligned = std::move(global_only);
      err = g;
    }
  }
  if (err > out.input_error) {
    aligned = fine;
    err = out.input_error;
  }
  out.output_error = err;
  for (const Mask& object : novel_objects) out.object_shifts.push_back(anchor_object(aligned, object, cfg.ring_width));
  out.depth = std::move(aligned);
  return out;
}

/// Registers `fine` (predicted at `camera`) to the depth the coarse scene
/// renders there.
inline Registration register_depth(const DepthMap& fine, const SceneSnapshot& scene, const Camera& camera,
                                   const SegmentSet* segments = nullptr, std::span<const Mask> novel_objects = {},
                                   const AlignConfig& cfg = {}, const RenderConfig& render = {}) {
  if (fine.width() != camera.width || fine.height() != camera.height) {
    throw Error(ErrorCode::DimensionMismatch, "fine depth does not match the camera");
  }
  const DepthMap target = render_depth(scene, camera, render);
  return register_depth_to_target(fine, target, segments, novel_objects, cfg);
}

}  // namespace wz
