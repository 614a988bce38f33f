// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

#include "wz/error.hpp"
#include "wz/geometry.hpp"
#include "wz/image.hpp"

namespace wz {

/// Camera schema shared by pose files, manifests and the wire protocol:
/// {"pose": [16 numbers, row-major world-to-camera], "fx", "fy", "cx", "cy", "w", "h"}.
inline nlohmann::json camera_to_json(const Camera& c) {
  nlohmann::json pose = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) {
    for (int k = 0; k < 4; ++k) pose.push_back(c.pose(r, k));
  }
  return {{"pose", pose}, {"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"w", c.width}, {"h", c.height}};
}

/// Parses the camera schema; cx/cy default to the image center.
inline Camera camera_from_json(const nlohmann::json& j) {
  try {
    const auto& pose = j.at("pose");
    if (!pose.is_array() || pose.size() != 16) throw Error(ErrorCode::InvalidCamera, "pose must have 16 numbers");
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
      for (int k = 0; k < 4; ++k) m(r, k) = pose.at(static_cast<std::size_t>(4 * r + k)).get<double>();
    }
    const int w = j.at("w").get<int>();
    const int h = j.at("h").get<int>();
    std::optional<double> cx, cy;
    if (j.contains("cx")) cx = j.at("cx").get<double>();
    if (j.contains("cy")) cy = j.at("cy").get<double>();
    Camera c = Camera::pinhole(m, j.at("fx").get<double>(), j.at("fy").get<double>(), w, h, cx, cy);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidCamera, std::string("malformed camera: ") + e.what());
  }
}

inline Camera load_camera(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return camera_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::InvalidCamera, path.string() + ": " + e.what());
  }
}

}  // namespace wz
