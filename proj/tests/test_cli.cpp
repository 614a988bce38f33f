// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "wz/cli.hpp"

using namespace wz;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

/// Runs the CLI in-process with captured stdout and stderr.
Outcome wz_run(std::vector<std::string> args) {
  args.insert(args.begin(), "wz");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Outcome o;
  o.code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("wz_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  /// fixture + init: a one-layer scene at scene.wzs.
  void make_scene() {
    ASSERT_EQ(wz_run({"fixture", "--out", path("fx"), "--size", "32"}).code, 0);
    const Outcome r = wz_run({"init", "--image", path("fx/image.png"), "--depth", path("fx/depth.bin"), "--pose",
                              path("fx/camera.json"), "--steps", "5", "--out", path("scene.wzs")});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  Outcome zoom(std::uint32_t layer, const std::string& center, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"zoom",  "--scene", path("scene.wzs"),   "--layer", std::to_string(layer),
                                  "--center", center, "--steps", "3", "--out", path("scene.wzs")};
    args.insert(args.end(), extra.begin(), extra.end());
    return wz_run(args);
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, FixtureWritesThreeFiles) {
  const Outcome r = wz_run({"fixture", "--out", path("fx"), "--size", "24", "--focal", "300"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_png(path("fx/image.png")).width(), 24);
  EXPECT_EQ(load_depth(path("fx/depth.bin")).width(), 24);
  EXPECT_DOUBLE_EQ(load_camera(path("fx/camera.json")).fx, 300.0);
}

TEST_F(Cli, InitBuildsRootLayer) {
  make_scene();
  const auto scene = load_scene(path("scene.wzs"));
  ASSERT_EQ(scene->layer_count(), 1u);
  EXPECT_EQ(scene->snapshot().layer(0).surfels.size(), 32u * 32u);
}

TEST_F(Cli, InitWritesLossTrace) {
  ASSERT_EQ(wz_run({"fixture", "--out", path("fx"), "--size", "16"}).code, 0);
  const Outcome r = wz_run({"init", "--image", path("fx/image.png"), "--depth", path("fx/depth.bin"), "--steps", "4",
                            "--trace", path("trace.csv"), "--out", path("s.wzs")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("trace.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, 5);  // header + one row per step
}

TEST_F(Cli, ZoomChainAddsLayers) {
  make_scene();
  const char* centers[] = {"16,16", "15,17", "16,16"};
  for (std::uint32_t i = 0; i < 3; ++i) {
    const Outcome r = zoom(i, centers[i], {"--seed", std::to_string(i)});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.out, std::to_string(i + 1) + "\n");
  }
  const auto scene = load_scene(path("scene.wzs"));
  ASSERT_EQ(scene->layer_count(), 4u);
  EXPECT_EQ(scene->snapshot().layer(3).parent_layer, std::optional<std::uint32_t>(2u));
}

TEST_F(Cli, RenderBySceneLayerAndPose) {
  make_scene();
  Outcome r = wz_run({"render", "--scene", path("scene.wzs"), "--layer", "0", "--out", path("a.png"), "--depth-out",
                      path("a.bin")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("visible 1024 composited ", 0), 0u) << r.out;
  EXPECT_EQ(read_png(path("a.png")).width(), 32);
  EXPECT_EQ(load_depth(path("a.bin")).width(), 32);
  r = wz_run({"render", "--scene", path("scene.wzs"), "--pose", path("fx/camera.json"), "--fx", "2048", "--out",
              path("b.png")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = wz_run({"render", "--scene", path("scene.wzs"), "--pose", path("fx/camera.json"), "--layer", "0", "--out",
              path("c.png")});
  EXPECT_EQ(r.code, 1);
  r = wz_run({"render", "--scene", path("scene.wzs"), "--out", path("c.png")});
  EXPECT_EQ(r.code, 1);
}

TEST_F(Cli, SweepWritesFramesAndStats) {
  make_scene();
  ASSERT_EQ(zoom(0, "16,16").code, 0);
  const Outcome r = wz_run({"sweep", "--scene", path("scene.wzs"), "--from-layer", "0", "--to-layer", "1", "--frames",
                            "6", "--out", path("sweep")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("frames 6 median_diff ", 0), 0u) << r.out;
  for (int i = 0; i < 6; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04d.png", i);
    EXPECT_TRUE(fs::exists(dir_ / "sweep" / name)) << name;
  }
  EXPECT_EQ(wz_run({"sweep", "--scene", path("scene.wzs"), "--from-layer", "1", "--to-layer", "0", "--out",
                    path("sweep2")})
                .code,
            1);
}

TEST_F(Cli, BenchReportsBothSettings) {
  make_scene();
  ASSERT_EQ(zoom(0, "16,16").code, 0);
  const Outcome r = wz_run({"bench", "--scene", path("scene.wzs"), "--repeat", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("pose 0: modulation on"), std::string::npos);
  EXPECT_NE(r.out.find("pose 1: modulation on"), std::string::npos);
  EXPECT_NE(r.out.find("reduction"), std::string::npos);
  EXPECT_EQ(wz_run({"bench", "--scene", path("scene.wzs"), "--repeat", "0"}).code, 1);
}

TEST_F(Cli, UserErrorsExitOne) {
  EXPECT_EQ(wz_run({}).code, 1);
  EXPECT_EQ(wz_run({"frobnicate"}).code, 1);
  EXPECT_EQ(wz_run({"render", "--scene", path("missing.wzs"), "--layer", "0", "--out", path("x.png")}).code, 1);
  make_scene();
  EXPECT_EQ(zoom(0, "not-a-pair").code, 1);
  EXPECT_EQ(zoom(5, "16,16").code, 1);
  EXPECT_EQ(zoom(0, "16,16", {"--factor", "1"}).code, 1);
  EXPECT_EQ(zoom(0, "16,16", {"--provider", "oracle"}).code, 1);
  const Outcome r = zoom(0, "1,1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("invalid_argument"), std::string::npos) << r.err;
}

TEST_F(Cli, CorruptSceneIsInternalError) {
  make_scene();
  auto bytes = read_file(path("scene.wzs"));
  bytes[12 + 188 + 4 * 9] = 0xFF;  // first surfel's opacity becomes NaN-ish
  bytes[12 + 188 + 4 * 9 + 1] = 0xFF;
  bytes[12 + 188 + 4 * 9 + 2] = 0xFF;
  bytes[12 + 188 + 4 * 9 + 3] = 0x7F;
  write_file(path("bad.wzs"), bytes);
  EXPECT_EQ(wz_run({"render", "--scene", path("bad.wzs"), "--layer", "0", "--out", path("x.png")}).code, 2);
  bytes = read_file(path("scene.wzs"));
  bytes[0] = 'Q';
  write_file(path("bad.wzs"), bytes);
  EXPECT_EQ(wz_run({"render", "--scene", path("bad.wzs"), "--layer", "0", "--out", path("x.png")}).code, 1);
}

TEST_F(Cli, FailedProviderLeavesSceneFileUntouched) {
  make_scene();
  const auto before = read_file(path("scene.wzs"));
  const Outcome r = zoom(0, "16,16", {"--provider", "cmd:false", "--workdir", path("work")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("provider"), std::string::npos) << r.err;
  EXPECT_EQ(read_file(path("scene.wzs")), before);
  for (const auto& e : fs::directory_iterator(dir_)) {
    EXPECT_EQ(e.path().filename().string().find(".tmp"), std::string::npos) << e.path();
  }
}

TEST_F(Cli, CommandProviderRoundTrip) {
  make_scene();
  const std::string script = R"(cmd:sh -c 'cp "$1/coarse.png" "$1/fine.png"' sh)";
  const Outcome r = zoom(0, "16,16", {"--provider", script, "--workdir", path("work")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "work" / "request.json"));
  EXPECT_EQ(load_scene(path("scene.wzs"))->layer_count(), 2u);
}

TEST_F(Cli, ProviderFromEnvironment) {
  make_scene();
  ::setenv("WZ_PROVIDER", "cmd:false", 1);
  const Outcome bad = zoom(0, "16,16", {"--workdir", path("work")});
  ::setenv("WZ_PROVIDER", "procedural", 1);
  const Outcome good = zoom(0, "16,16");
  ::unsetenv("WZ_PROVIDER");
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(good.code, 0) << good.err;
}
