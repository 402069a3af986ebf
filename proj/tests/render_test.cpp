#include "salon/render.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace salon;

namespace {

Camera front_camera(int w, int h, double f) {
  Camera cam;
  cam.fx = cam.fy = f;
  cam.width = w;
  cam.height = h;
  cam.cx = w / 2.0;
  cam.cy = h / 2.0;
  return cam;
}

Gaussian3D make_gaussian(const Vec3d& mu, double scale, double opacity, const Vec3d& dc) {
  Gaussian3D g;
  g.mu = mu;
  g.log_scale = {std::log(scale), std::log(scale), std::log(scale)};
  g.opacity_logit = logit(opacity);
  g.sh.assign(4, Vec3d{});
  // dc color: rgb = kC0 * sh0 + 0.5.
  g.sh[0] = (dc - Vec3d{0.5, 0.5, 0.5}) / sh::kC0;
  return g;
}

TEST(Rasterize, EmptySceneAllZero) {
  Camera cam = front_camera(32, 24, 40);
  RenderTarget<double> t = rasterize<double>({}, cam);
  for (double v : t.rgb.data) EXPECT_EQ(v, 0.0);
  for (double v : t.depth.data) EXPECT_EQ(v, 0.0);
  for (double v : t.alpha.data) EXPECT_EQ(v, 0.0);
}

TEST(Rasterize, SingleSplatClosedFormBlend) {
  Camera cam = front_camera(50, 50, 100);
  // Center lands exactly on pixel (25, 25); the gaussian density there is 1.
  std::vector<Gaussian3D> gs{make_gaussian({0, 0, 1}, 0.05, 0.99, {0.8, 0.4, 0.2})};
  RenderTarget<double> t = rasterize<double>(gs, cam);

  double a = 0.99;  // opacity * g(center) = 0.99, not above the clamp
  EXPECT_NEAR(t.alpha.at(25, 25)[0], a, 1e-12);
  EXPECT_NEAR(t.rgb.at(25, 25)[0], a * 0.8, 1e-9);
  EXPECT_NEAR(t.rgb.at(25, 25)[1], a * 0.4, 1e-9);
  EXPECT_NEAR(t.rgb.at(25, 25)[2], a * 0.2, 1e-9);
  EXPECT_NEAR(t.depth.at(25, 25)[0], a * 1.0, 1e-9);
}

TEST(Rasterize, OcclusionOrderSwap) {
  Camera cam = front_camera(40, 40, 60);
  Gaussian3D red = make_gaussian({0, 0, 1.0}, 0.2, 0.995, {1, 0, 0});
  Gaussian3D blue = make_gaussian({0, 0, 2.0}, 0.4, 0.995, {0, 0, 1});

  std::vector<Gaussian3D> front_red{red, blue};
  RenderTarget<double> t1 = rasterize<double>(front_red, cam);
  const double* px1 = t1.rgb.at(20, 20);
  EXPECT_GT(px1[0], 0.9);
  EXPECT_LT(px1[2], 0.05);

  std::swap(front_red[0].mu.z, front_red[1].mu.z);  // blue now in front
  RenderTarget<double> t2 = rasterize<double>(front_red, cam);
  const double* px2 = t2.rgb.at(20, 20);
  EXPECT_GT(px2[2], 0.9);
  EXPECT_LT(px2[0], 0.05);
}

std::vector<Gaussian3D> random_scene(std::mt19937_64& rng, int count, int sh_coeffs = 4) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::uniform_real_distribution<double> z(1.2, 3.0);
  std::uniform_real_distribution<double> sc(0.03, 0.12);
  std::uniform_real_distribution<double> op(0.2, 0.7);
  std::normal_distribution<double> g(0, 1);
  std::vector<Gaussian3D> out;
  for (int i = 0; i < count; ++i) {
    Gaussian3D splat;
    splat.mu = {0.5 * u(rng), 0.4 * u(rng), z(rng)};
    Quatd q{1.0 + 0.2 * g(rng), 0.2 * g(rng), 0.2 * g(rng), 0.2 * g(rng)};
    splat.quat = q.normalized();
    splat.log_scale = {std::log(sc(rng)), std::log(sc(rng)), std::log(sc(rng))};
    splat.opacity_logit = logit(op(rng));
    splat.sh.assign(sh_coeffs, Vec3d{});
    splat.sh[0] = {0.3 * u(rng), 0.3 * u(rng), 0.3 * u(rng)};
    for (int k = 1; k < sh_coeffs; ++k) splat.sh[k] = {0.05 * u(rng), 0.05 * u(rng), 0.05 * u(rng)};
    out.push_back(std::move(splat));
  }
  return out;
}

TEST(Rasterize, AlphaBoundsOnRandomScenes) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Camera cam = front_camera(24, 18, 30);
    auto gs = random_scene(rng, 12);
    RenderTarget<double> t = rasterize<double>(gs, cam);
    for (double v : t.alpha.data) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    // depth = 0 wherever alpha = 0
    for (size_t i = 0; i < t.alpha.data.size(); ++i)
      if (t.alpha.data[i] == 0.0) EXPECT_EQ(t.depth.data[i], 0.0);
  }
}

TEST(Rasterize, InputOrderInvarianceBitExact) {
  std::mt19937_64 rng(5);
  Camera cam = front_camera(32, 24, 40);
  auto gs = random_scene(rng, 20);
  RenderTarget<double> a = rasterize<double>(gs, cam);

  std::vector<Gaussian3D> shuffled = gs;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(17));
  RenderTarget<double> b = rasterize<double>(shuffled, cam);
  EXPECT_EQ(a.rgb.data, b.rgb.data);
  EXPECT_EQ(a.depth.data, b.depth.data);
  EXPECT_EQ(a.alpha.data, b.alpha.data);
}

TEST(Rasterize, TileSizeInvarianceBitExact) {
  std::mt19937_64 rng(7);
  Camera cam = front_camera(40, 28, 36);
  auto gs = random_scene(rng, 25);
  RenderOptions o8, o16;
  o8.tile_size = 8;
  o16.tile_size = 16;
  RenderTarget<double> a = rasterize<double>(gs, cam, o8);
  RenderTarget<double> b = rasterize<double>(gs, cam, o16);
  EXPECT_EQ(a.rgb.data, b.rgb.data);
  EXPECT_EQ(a.depth.data, b.depth.data);
  EXPECT_EQ(a.alpha.data, b.alpha.data);
}

TEST(RenderDepthMap, OpaqueWallAndOcclusion) {
  Camera cam = front_camera(32, 24, 40);
  std::vector<Gaussian3D> wall;
  for (int i = -6; i <= 6; ++i)
    for (int j = -5; j <= 5; ++j)
      wall.push_back(make_gaussian({i * 0.12, j * 0.12, 2.0}, 0.1, 0.995, {0.5, 0.5, 0.5}));
  DepthMap<double> dm = render_depth_map<double>(wall, cam);
  int valid = 0;
  for (int y = 4; y < 20; ++y)
    for (int x = 6; x < 26; ++x)
      if (dm.valid.at(x, y)[0]) {
        ++valid;
        EXPECT_NEAR(dm.depth.at(x, y)[0], 2.0, 1e-2);
      }
  EXPECT_GT(valid, 200);

  // Empty scene: everything invalid.
  DepthMap<double> empty = render_depth_map<double>({}, cam);
  for (uint8_t v : empty.valid.data) EXPECT_EQ(v, 0);

  // A nearer opaque wall wins.
  std::vector<Gaussian3D> two = wall;
  for (int i = -6; i <= 6; ++i)
    for (int j = -5; j <= 5; ++j)
      two.push_back(make_gaussian({i * 0.07, j * 0.07, 1.2}, 0.07, 0.995, {0.9, 0.1, 0.1}));
  DepthMap<double> near = render_depth_map<double>(two, cam);
  EXPECT_NEAR(near.depth.at(16, 12)[0], 1.2, 2e-2);
}

// --- Finite differences -----------------------------------------------------

struct LossImages {
  Image<double> wr, wd, wa;
};

LossImages random_loss_weights(int w, int h, std::mt19937_64& rng) {
  LossImages li{Image<double>(w, h, 3), Image<double>(w, h, 1), Image<double>(w, h, 1)};
  std::uniform_real_distribution<double> u(-1, 1);
  for (auto& v : li.wr.data) v = u(rng);
  for (auto& v : li.wd.data) v = 0.2 * u(rng);
  for (auto& v : li.wa.data) v = 0.2 * u(rng);
  return li;
}

double scene_loss(const std::vector<Gaussian3D>& gs, const Camera& cam, const LossImages& li) {
  RenderTarget<double> t = rasterize<double>(gs, cam);
  double loss = 0;
  for (size_t i = 0; i < t.rgb.data.size(); ++i) loss += t.rgb.data[i] * li.wr.data[i];
  for (size_t i = 0; i < t.depth.data.size(); ++i) loss += t.depth.data[i] * li.wd.data[i];
  for (size_t i = 0; i < t.alpha.data.size(); ++i) loss += t.alpha.data[i] * li.wa.data[i];
  return loss;
}

double rel_err(double a, double b) {
  double m = std::max({std::abs(a), std::abs(b), 1e-7});
  return std::abs(a - b) / m;
}

TEST(RasterizeBackward, ZeroCotangentGivesZeroGrads) {
  std::mt19937_64 rng(11);
  Camera cam = front_camera(24, 18, 30);
  auto gs = random_scene(rng, 6);
  Image<double> zr(24, 18, 3), zd(24, 18, 1), za(24, 18, 1);
  auto grads = rasterize_backward(gs, cam, zr, zd, za);
  for (const auto& g : grads) {
    EXPECT_EQ(g.mu.norm(), 0.0);
    EXPECT_EQ(g.opacity_logit, 0.0);
    for (double q : g.quat) EXPECT_EQ(q, 0.0);
  }
}

TEST(RasterizeBackward, SingleSplatOpacityFiniteDifference) {
  std::mt19937_64 rng(13);
  Camera cam = front_camera(24, 18, 30);
  std::vector<Gaussian3D> gs{make_gaussian({0.05, -0.03, 1.5}, 0.08, 0.55, {0.7, 0.3, 0.4})};
  LossImages li = random_loss_weights(24, 18, rng);

  auto grads = rasterize_backward(gs, cam, li.wr, li.wd, li.wa);
  const double h = 1e-5;
  auto plus = gs, minus = gs;
  plus[0].opacity_logit += h;
  minus[0].opacity_logit -= h;
  double fd = (scene_loss(plus, cam, li) - scene_loss(minus, cam, li)) / (2 * h);
  EXPECT_LT(rel_err(grads[0].opacity_logit, fd), 1e-4)
      << "analytic " << grads[0].opacity_logit << " fd " << fd;
}

TEST(RasterizeBackward, TenSplatAllParamsFiniteDifference) {
  std::mt19937_64 rng(17);
  Camera cam = front_camera(32, 32, 36);
  auto gs = random_scene(rng, 10);
  LossImages li = random_loss_weights(32, 32, rng);
  auto grads = rasterize_backward(gs, cam, li.wr, li.wd, li.wa);

  const double h = 1e-5;
  double max_rel = 0;
  auto check = [&](double analytic, auto&& bump) {
    auto plus = gs, minus = gs;
    bump(plus, +h);
    bump(minus, -h);
    double fd = (scene_loss(plus, cam, li) - scene_loss(minus, cam, li)) / (2 * h);
    max_rel = std::max(max_rel, rel_err(analytic, fd));
  };

  for (size_t i = 0; i < gs.size(); ++i) {
    for (int ax = 0; ax < 3; ++ax) {
      check(grads[i].mu[ax], [&](auto& v, double d) { v[i].mu[ax] += d; });
      check(grads[i].log_scale[ax], [&](auto& v, double d) { v[i].log_scale[ax] += d; });
    }
    check(grads[i].quat[0], [&](auto& v, double d) { v[i].quat.w += d; });
    check(grads[i].quat[1], [&](auto& v, double d) { v[i].quat.x += d; });
    check(grads[i].quat[2], [&](auto& v, double d) { v[i].quat.y += d; });
    check(grads[i].quat[3], [&](auto& v, double d) { v[i].quat.z += d; });
    check(grads[i].opacity_logit, [&](auto& v, double d) { v[i].opacity_logit += d; });
    for (int k = 0; k < 4; ++k)
      for (int c = 0; c < 3; ++c)
        check(grads[i].sh[k][c], [&](auto& v, double d) { v[i].sh[k][c] += d; });
  }
  EXPECT_LT(max_rel, 1e-3);
}

TEST(RasterizeBackward, DirectionalDerivativeConsistency) {
  std::mt19937_64 rng(23);
  Camera cam = front_camera(28, 20, 32);
  auto gs = random_scene(rng, 8);
  LossImages li = random_loss_weights(28, 20, rng);
  auto grads = rasterize_backward(gs, cam, li.wr, li.wd, li.wa);

  // Random direction over all mu parameters.
  std::normal_distribution<double> g(0, 1);
  std::vector<Vec3d> dir(gs.size());
  double directional = 0;
  for (size_t i = 0; i < gs.size(); ++i) {
    dir[i] = {g(rng), g(rng), g(rng)};
    directional += grads[i].mu.dot(dir[i]);
  }
  const double eps = 1e-6;
  auto plus = gs, minus = gs;
  for (size_t i = 0; i < gs.size(); ++i) {
    plus[i].mu += dir[i] * eps;
    minus[i].mu -= dir[i] * eps;
  }
  double fd = (scene_loss(plus, cam, li) - scene_loss(minus, cam, li)) / (2 * eps);
  EXPECT_LT(rel_err(directional, fd), 1e-3);
}

TEST(RenderIO, PpmRoundTrip) {
  Image<double> img(7, 5, 3);
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.data) v = u(rng);
  auto path = std::filesystem::temp_directory_path() / "salon_test.ppm";
  write_ppm(img, path);
  Image<double> back = read_ppm(path);
  ASSERT_EQ(back.width, 7);
  ASSERT_EQ(back.height, 5);
  for (size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255);
  std::filesystem::remove(path);
}

TEST(RenderIO, DepthRawRoundTrip) {
  Image<double> depth(6, 4, 1);
  for (size_t i = 0; i < depth.data.size(); ++i) depth.data[i] = 0.37 * double(i);
  auto path = std::filesystem::temp_directory_path() / "salon_test.depth";
  write_depth_raw(depth, path);
  Image<double> back = read_depth_raw(path);
  ASSERT_EQ(back.width, 6);
  for (size_t i = 0; i < depth.data.size(); ++i)
    EXPECT_EQ(back.data[i], double(float(depth.data[i])));
  std::filesystem::remove(path);
}

}  // namespace
