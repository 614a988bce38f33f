// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "support/oracles.hpp"
#include "wz/camera_json.hpp"
#include "wz/geometry.hpp"

using namespace wz;

namespace {

Camera square(double f, int size, double c) {
  return Camera::pinhole(Mat4::Identity(), f, f, size, size, c, c);
}

Mat4 random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return make_pose(oracle::rotation(oracle::random_quaternion(rng)), Vec3(u(rng), u(rng), u(rng)));
}

}  // namespace

TEST(Project, OnAxisPointHitsPrincipalPoint) {
  const Camera cam = square(100, 100, 50);
  const auto p = project(Vec3(0, 0, 2), cam);
  EXPECT_FALSE(p.behind);
  EXPECT_DOUBLE_EQ(p.pixel.x(), 50.0);
  EXPECT_DOUBLE_EQ(p.pixel.y(), 50.0);
  EXPECT_DOUBLE_EQ(p.depth, 2.0);
}

TEST(Project, OffAxisPointByHand) {
  const auto p = project(Vec3(1, 0, 2), square(100, 100, 50));
  EXPECT_DOUBLE_EQ(p.pixel.x(), 100.0);
  EXPECT_DOUBLE_EQ(p.pixel.y(), 50.0);
}

TEST(Project, BehindCameraIsFlagged) {
  EXPECT_TRUE(project(Vec3(0, 0, -1), square(100, 100, 50)).behind);
  EXPECT_TRUE(project(Vec3(0, 0, 0), square(100, 100, 50)).behind);
}

TEST(Project, UsesPoseTranslation) {
  Camera cam = square(100, 100, 50);
  cam.pose(2, 3) = 3.0;  // world origin sits 3 units ahead
  const auto p = project(Vec3(0, 0, 0), cam);
  EXPECT_DOUBLE_EQ(p.depth, 3.0);
  EXPECT_DOUBLE_EQ(cam.center().z(), -3.0);
}

TEST(BackProject, PrincipalRay) {
  const Camera cam = square(100, 100, 50);
  const Vec3 p = back_project(Vec2(50, 50), 7.0, cam);
  EXPECT_NEAR((p - Vec3(0, 0, 7)).norm(), 0.0, 1e-15);
}

TEST(BackProject, HandEvaluatedInverse) {
  const Camera cam = square(100, 100, 50);
  const Vec3 p = back_project(Vec2(150, 50), 1.0, cam);
  EXPECT_NEAR((p - Vec3(1, 0, 1)).norm(), 0.0, 1e-15);
}

TEST(BackProject, RejectsNonPositiveDepth) {
  const Camera cam = square(100, 100, 50);
  EXPECT_THROW(back_project(Vec2(1, 1), 0.0, cam), Error);
  EXPECT_THROW(back_project(Vec2(1, 1), -2.0, cam), Error);
  EXPECT_THROW(back_project(Vec2(1, 1), std::nan(""), cam), Error);
}

TEST(BackProject, RoundTripThousandRandomPairs) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Camera cam = Camera::pinhole(random_pose(rng), 50 + 2000 * u(rng), 50 + 2000 * u(rng), 640, 480,
                                       320 + 10 * u(rng), 240 - 10 * u(rng));
    const Vec2 px(640 * u(rng), 480 * u(rng));
    const double d = 0.1 + 100 * u(rng);
    const auto p = project(back_project(px, d, cam), cam);
    worst = std::max({worst, (p.pixel - px).norm(), std::abs(p.depth - d)});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(CameraValidate, RejectsBadCameras) {
  Camera cam = square(100, 10, 5);
  EXPECT_NO_THROW(cam.validate());
  Camera bad = cam;
  bad.fx = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = cam;
  bad.pose(0, 0) = 2.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = cam;
  bad.pose(0, 0) = -1.0;  // reflection
  EXPECT_THROW(bad.validate(), Error);
  bad = cam;
  bad.width = 0;
  EXPECT_THROW(bad.validate(), Error);
  try {
    bad.validate();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidCamera);
  }
}

TEST(Quaternion, RotationIsOrthonormalAndRoundTrips) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Vec4 q = oracle::random_quaternion(rng);
    const Mat3 r = rotation_from_quaternion(q);
    EXPECT_LT((r * r.transpose() - Mat3::Identity()).norm(), 1e-12);
    EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
    EXPECT_LT((r - oracle::rotation(q)).norm(), 1e-12);
    const Vec4 back = quaternion_from_rotation(r);
    EXPECT_LT(std::min((back - q).norm(), (back + q).norm()), 1e-9);
  }
}

TEST(Quaternion, BetweenMapsSourceOntoTarget) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  for (int i = 0; i < 200; ++i) {
    const Vec3 a = Vec3(n(rng), n(rng), n(rng)).normalized();
    const Vec3 b = Vec3(n(rng), n(rng), n(rng)).normalized();
    EXPECT_LT((rotation_from_quaternion(quaternion_between(a, b)) * a - b).norm(), 1e-12);
  }
  EXPECT_LT((rotation_from_quaternion(quaternion_between(Vec3::UnitZ(), -Vec3::UnitZ())) * Vec3::UnitZ() +
             Vec3::UnitZ()).norm(), 1e-9);
}

TEST(Normals, FrontoParallelPlaneFacesCamera) {
  const Camera cam = square(64, 16, 8);
  DepthMap d(16, 16);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) d.set(x, y, 3.0);
  }
  const auto n = normals_from_depth(d, cam);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) EXPECT_LT((n(x, y) - Vec3(0, 0, -1)).norm(), 1e-9) << x << "," << y;
  }
}

TEST(Normals, TiltedPlaneMatchesAnalyticNormal) {
  // Plane z = d0 + k X in a rotated camera; depth from exact ray intersection.
  std::mt19937_64 rng(8);
  const Mat4 pose = random_pose(rng);
  const Camera cam = Camera::pinhole(pose, 48, 48, 32, 32);
  const double d0 = 4.0, k = 0.6;
  DepthMap d(32, 32);
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double rx = (x + 0.5 - cam.cx) / cam.fx;  // ray (rx, ry, 1)
      d.set(x, y, d0 / (1.0 - k * rx));
    }
  }
  const Vec3 expected = (cam.rotation().transpose() * Vec3(k, 0, -1)).normalized();
  const auto n = normals_from_depth(d, cam);
  double worst = 0.0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) worst = std::max(worst, std::acos(std::clamp(n(x, y).dot(expected), -1.0, 1.0)));
  }
  EXPECT_LT(worst * 180.0 / std::numbers::pi, 1.0);
}

TEST(Normals, IsolatedPixelFallsBackTowardCamera) {
  const Camera cam = square(32, 8, 4);
  DepthMap d(8, 8);
  d.set(2, 5, 2.0);
  const auto n = normals_from_depth(d, cam);
  const Vec3 ray = pixel_ray(pixel_center(2, 5), cam).normalized();
  EXPECT_LT((n(2, 5) + ray).norm(), 1e-12);
}

TEST(Normals, SizeMismatchThrows) {
  EXPECT_THROW(normals_from_depth(DepthMap(4, 4), square(32, 8, 4)), Error);
}

TEST(Depth, BinaryRoundTripKeepsValidity) {
  DepthMap d(5, 3);
  d.set(0, 0, 1.5);
  d.set(4, 2, 7.25);
  const DepthMap back = decode_depth(encode_depth(d));
  EXPECT_EQ(back, d);
  auto bytes = encode_depth(d);
  bytes.pop_back();
  EXPECT_THROW(decode_depth(bytes), Error);
}

TEST(Depth, Gray16Conversion) {
  DepthMap d(3, 1);
  d.set(0, 0, 1.0);
  d.set(2, 0, 2.5);
  const DepthMap back = depth_from_gray16(depth_to_gray16(d, 1000.0), 1000.0);
  EXPECT_TRUE(back.is_valid(0, 0));
  EXPECT_FALSE(back.is_valid(1, 0));
  EXPECT_DOUBLE_EQ(back(2, 0), 2.5);
}

TEST(CameraJson, RoundTrip) {
  std::mt19937_64 rng(3);
  const Camera cam = Camera::pinhole(random_pose(rng), 700, 710, 320, 200, 161.5, 99.0);
  const Camera back = camera_from_json(camera_to_json(cam));
  EXPECT_EQ(back, cam);
  auto j = camera_to_json(cam);
  j.erase("cx");
  j.erase("cy");
  EXPECT_DOUBLE_EQ(camera_from_json(j).cx, 160.0);
  j["pose"] = {1, 2, 3};
  EXPECT_THROW(camera_from_json(j), Error);
}
