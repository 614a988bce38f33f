// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "wz/bytes.hpp"
#include "wz/camera_json.hpp"
#include "wz/error.hpp"
#include "wz/scene.hpp"

namespace wz {

// Layout (little-endian, unpadded):
//   "WZSC" u32 version u32 layer_count
//   per layer: u32 scale_index, i32 parent (-1 none), u32 prompt_len, prompt,
//              16 f64 pose (row-major), f64 fx fy cx cy, u32 width height,
//              u64 surfel_count, then surfel_count records of 16 f32:
//              p(3) q(4, wxyz) s(2) o c(3) native parent child (NaN = absent)
inline constexpr char kSceneMagic[4] = {'W', 'Z', 'S', 'C'};
inline constexpr std::uint32_t kSceneVersion = 1;
inline constexpr std::size_t kSceneHeaderBytes = 12;
inline constexpr std::size_t kLayerHeaderBytes = 188;  // excluding the prompt text
inline constexpr std::size_t kSurfelRecordBytes = 64;

inline std::vector<std::uint8_t> encode_scene(const SceneSnapshot& scene) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kSceneMagic), 4));
  w.u32(kSceneVersion);
  w.u32(static_cast<std::uint32_t>(scene.layer_count()));
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (const auto& lp : scene.layers()) {
    const ScaleLayer& l = *lp;
    w.u32(l.scale_index);
    w.i32(l.parent_layer ? static_cast<std::int32_t>(*l.parent_layer) : -1);
    w.u32(static_cast<std::uint32_t>(l.prompt.size()));
    w.raw(l.prompt);
    const Camera& c = l.creation_camera;
    for (int r = 0; r < 4; ++r) {
      for (int k = 0; k < 4; ++k) w.f64(c.pose(r, k));
    }
    w.f64(c.fx);
    w.f64(c.fy);
    w.f64(c.cx);
    w.f64(c.cy);
    w.u32(static_cast<std::uint32_t>(c.width));
    w.u32(static_cast<std::uint32_t>(c.height));
    w.u64(l.surfels.size());
    for (const Surfel& s : l.surfels) {
      for (int k = 0; k < 3; ++k) w.f32(static_cast<float>(s.position[k]));
      for (int k = 0; k < 4; ++k) w.f32(static_cast<float>(s.rotation[k]));
      for (int k = 0; k < 2; ++k) w.f32(static_cast<float>(s.scale[k]));
      w.f32(static_cast<float>(s.opacity));
      for (int k = 0; k < 3; ++k) w.f32(static_cast<float>(s.color[k]));
      w.f32(static_cast<float>(s.bounds.native()));
      w.f32(s.bounds.parent() ? static_cast<float>(*s.bounds.parent()) : nan);
      w.f32(s.bounds.child() ? static_cast<float>(*s.bounds.child()) : nan);
    }
  }
  return w.take();
}

namespace detail {

[[noreturn]] inline void truncated(const std::string& where) {
  throw Error(ErrorCode::Truncated, "scene file truncated in " + where);
}

}  // namespace detail

/// Parses and validates a scene file image. Distinct error codes for a bad
/// magic, an unsupported version, truncation, invariant violations and
/// trailing bytes.
inline std::unique_ptr<MultiScaleScene> decode_scene(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  std::string magic;
  if (!r.string(4, magic)) detail::truncated("file header");
  if (magic != std::string(kSceneMagic, 4)) throw Error(ErrorCode::BadMagic, "not a scene file (bad magic)");
  std::uint32_t version = 0, count = 0;
  if (!r.u32(version)) detail::truncated("file header");
  if (version != kSceneVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "unsupported scene file version " + std::to_string(version));
  }
  if (!r.u32(count)) detail::truncated("file header");

  auto scene = std::make_unique<MultiScaleScene>();
  for (std::uint32_t li = 0; li < count; ++li) {
    const std::string where = "layer " + std::to_string(li);
    ScaleLayer layer;
    std::int32_t parent = 0;
    std::uint32_t prompt_len = 0;
    if (!r.u32(layer.scale_index) || !r.i32(parent) || !r.u32(prompt_len)) detail::truncated(where + " header");
    if (!r.string(prompt_len, layer.prompt)) detail::truncated(where + " prompt");
    if (parent < -1) throw Error(ErrorCode::InvariantViolation, where + ": invalid parent index");
    if (parent >= 0) layer.parent_layer = static_cast<std::uint32_t>(parent);
    Camera& c = layer.creation_camera;
    for (int row = 0; row < 4; ++row) {
      for (int k = 0; k < 4; ++k) {
        if (!r.f64(c.pose(row, k))) detail::truncated(where + " camera");
      }
    }
    std::uint32_t w = 0, h = 0;
    std::uint64_t n = 0;
    if (!r.f64(c.fx) || !r.f64(c.fy) || !r.f64(c.cx) || !r.f64(c.cy) || !r.u32(w) || !r.u32(h) || !r.u64(n)) {
      detail::truncated(where + " header");
    }
    if (w > static_cast<std::uint32_t>(std::numeric_limits<int>::max()) ||
        h > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      throw Error(ErrorCode::InvariantViolation, where + ": image size out of range");
    }
    c.width = static_cast<int>(w);
    c.height = static_cast<int>(h);
    if (n > r.remaining() / kSurfelRecordBytes) detail::truncated(where + " surfel block");
    layer.surfels.resize(static_cast<std::size_t>(n));
    try {
      for (Surfel& s : layer.surfels) {
        float f[16];
        for (float& v : f) r.f32(v);
        s.position = Vec3(f[0], f[1], f[2]);
        s.rotation = Vec4(f[3], f[4], f[5], f[6]);
        s.scale = Vec2(f[7], f[8]);
        s.opacity = f[9];
        s.color = Rgb(f[10], f[11], f[12]);
        std::optional<double> sp, sc;
        if (!std::isnan(f[14])) sp = f[14];
        if (!std::isnan(f[15])) sc = f[15];
        s.bounds = ScaleBounds(f[13], sp, sc);
      }
      scene->add_layer(std::move(layer));
    } catch (const Error& e) {
      throw Error(ErrorCode::InvariantViolation, where + ": " + e.what());
    }
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::TrailingData, std::to_string(r.remaining()) + " unexpected bytes after the last layer");
  }
  return scene;
}

/// Writes atomically (temporary file + rename); returns the byte count.
inline std::size_t save_scene(const SceneSnapshot& scene, const std::filesystem::path& path) {
  const auto bytes = encode_scene(scene);
  write_file_atomic(path, bytes);
  return bytes.size();
}

inline std::unique_ptr<MultiScaleScene> load_scene(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_scene(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

/// Layer list for clients: lineage, creation cameras and surfel counts.
inline nlohmann::json scene_manifest(const SceneSnapshot& scene) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < scene.layer_count(); ++i) {
    const ScaleLayer& l = scene.layer(i);
    layers.push_back({{"index", i},
                      {"parent", l.parent_layer ? nlohmann::json(*l.parent_layer) : nlohmann::json(nullptr)},
                      {"scale_index", l.scale_index},
                      {"prompt", l.prompt},
                      {"surfels", l.surfels.size()},
                      {"camera", camera_to_json(l.creation_camera)}});
  }
  return {{"type", "layers"}, {"version", scene.version()}, {"surfels", scene.surfel_count()}, {"layers", layers}};
}

}  // namespace wz
