#include "salon/core.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace salon;

namespace {

std::mt19937_64 rng(7);

Quatd random_unit_quat() {
  std::normal_distribution<double> g(0, 1);
  Quatd q{g(rng), g(rng), g(rng), g(rng)};
  return q.normalized();
}

Vec3d random_vec(double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  return {u(rng), u(rng), u(rng)};
}

Camera random_camera() {
  Camera cam;
  cam.fx = 80 + 40 * std::uniform_real_distribution<double>(0, 1)(rng);
  cam.fy = 80 + 40 * std::uniform_real_distribution<double>(0, 1)(rng);
  cam.width = 64;
  cam.height = 48;
  cam.cx = cam.width / 2.0;
  cam.cy = cam.height / 2.0;
  cam.pose.rotation = random_unit_quat().to_rotation();
  cam.pose.translation = random_vec(-0.5, 0.5);
  return cam;
}

// Rotation matrix built by rotating the basis vectors with the quaternion
// sandwich product, independent of Quat::to_rotation.
Mat3d rotation_by_sandwich(const Quatd& q) {
  Mat3d r;
  for (int c = 0; c < 3; ++c) {
    Quatd v{0, c == 0 ? 1.0 : 0.0, c == 1 ? 1.0 : 0.0, c == 2 ? 1.0 : 0.0};
    Quatd conj{q.w, -q.x, -q.y, -q.z};
    Quatd rotated = q * v * conj;
    r(0, c) = rotated.x;
    r(1, c) = rotated.y;
    r(2, c) = rotated.z;
  }
  return r;
}

// Jacobi eigenvalue iteration for a symmetric 3x3 matrix.
Vec3d symmetric_eigenvalues(Mat3d a) {
  for (int sweep = 0; sweep < 64; ++sweep) {
    int p = 0, q = 1;
    double off = std::abs(a(0, 1));
    if (std::abs(a(0, 2)) > off) { p = 0; q = 2; off = std::abs(a(0, 2)); }
    if (std::abs(a(1, 2)) > off) { p = 1; q = 2; off = std::abs(a(1, 2)); }
    if (off < 1e-15) break;
    double theta = 0.5 * std::atan2(2 * a(p, q), a(q, q) - a(p, p));
    double c = std::cos(theta), s = std::sin(theta);
    Mat3d r = Mat3d::identity();
    r(p, p) = c; r(q, q) = c; r(p, q) = s; r(q, p) = -s;
    a = r.transposed() * a * r;
  }
  return {a(0, 0), a(1, 1), a(2, 2)};
}

TEST(BuildCovariance, IdentityCase) {
  Mat3d cov = build_covariance(Quatd::identity(), Vec3d{0, 0, 0});
  Mat3d expect = Mat3d::identity();
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(cov.m[i], expect.m[i], 1e-15);
}

TEST(BuildCovariance, AxisAlignedScaling) {
  Mat3d cov = build_covariance(Quatd::identity(), Vec3d{std::log(2.0), 0, 0});
  EXPECT_NEAR(cov(0, 0), 4.0, 1e-12);
  EXPECT_NEAR(cov(1, 1), 1.0, 1e-12);
  EXPECT_NEAR(cov(2, 2), 1.0, 1e-12);
  EXPECT_NEAR(cov(0, 1), 0.0, 1e-12);
}

TEST(BuildCovariance, MatchesMatrixProductOracle) {
  for (int trial = 0; trial < 200; ++trial) {
    Quatd q = random_unit_quat();
    Vec3d ls = random_vec(-1.5, 1.0);
    Mat3d cov = build_covariance(q, ls);

    Mat3d r = rotation_by_sandwich(q);
    Mat3d s = Mat3d::diag({std::exp(ls.x), std::exp(ls.y), std::exp(ls.z)});
    Mat3d oracle = r * s * s.transposed() * r.transposed();
    for (int i = 0; i < 9; ++i) EXPECT_NEAR(cov.m[i], oracle.m[i], 1e-12);

    Vec3d eig = symmetric_eigenvalues(cov);
    EXPECT_GT(eig.x, 0);
    EXPECT_GT(eig.y, 0);
    EXPECT_GT(eig.z, 0);
  }
}

TEST(BuildCovariance, SymmetryAndEigenvalueFloor) {
  for (int trial = 0; trial < 1000; ++trial) {
    Quatd q = random_unit_quat();
    Vec3d ls = random_vec(-2.0, 1.0);
    Mat3d cov = build_covariance(q, ls);
    Mat3d diff = cov - cov.transposed();
    for (double v : diff.m) EXPECT_LT(std::abs(v), 1e-12);

    double min_ls = std::min({ls.x, ls.y, ls.z});
    Vec3d eig = symmetric_eigenvalues(cov);
    double min_eig = std::min({eig.x, eig.y, eig.z});
    EXPECT_GE(min_eig, std::exp(2 * min_ls) - 1e-9);
  }
}

TEST(ShEval, ZeroCoefficients) {
  std::vector<Vec3d> coeffs(4);
  Vec3d rgb = sh_eval<double>(coeffs, Vec3d{0, 0, 1});
  EXPECT_DOUBLE_EQ(rgb.x, 0.5);
  EXPECT_DOUBLE_EQ(rgb.y, 0.5);
  EXPECT_DOUBLE_EQ(rgb.z, 0.5);
}

TEST(ShEval, DegreeZeroViewIndependent) {
  std::vector<Vec3d> coeffs{{0.3, -0.1, 0.8}};
  Vec3d a = sh_eval<double>(coeffs, Vec3d{0, 0, 1});
  Vec3d b = sh_eval<double>(coeffs, Vec3d{1, 0, 0}.normalized());
  EXPECT_DOUBLE_EQ(a.x, b.x);
  EXPECT_DOUBLE_EQ(a.y, b.y);
  EXPECT_DOUBLE_EQ(a.z, b.z);
}

TEST(ShEval, DegreeOneMatchesPolynomialOracle) {
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<Vec3d> coeffs(4);
    for (auto& c : coeffs) c = {u(rng), u(rng), u(rng)};
    Vec3d dir = random_vec(-1, 1).normalized();

    // Direct evaluation of the four real-SH basis polynomials.
    double b0 = 0.28209479177387814;
    double b1 = -0.4886025119029199 * dir.y;
    double b2 = 0.4886025119029199 * dir.z;
    double b3 = -0.4886025119029199 * dir.x;
    Vec3d oracle = coeffs[0] * b0 + coeffs[1] * b1 + coeffs[2] * b2 + coeffs[3] * b3 +
                   Vec3d{0.5, 0.5, 0.5};
    oracle.x = std::max(0.0, oracle.x);
    oracle.y = std::max(0.0, oracle.y);
    oracle.z = std::max(0.0, oracle.z);

    Vec3d rgb = sh_eval<double>(coeffs, dir);
    EXPECT_NEAR(rgb.x, oracle.x, 1e-12);
    EXPECT_NEAR(rgb.y, oracle.y, 1e-12);
    EXPECT_NEAR(rgb.z, oracle.z, 1e-12);
  }
}

TEST(ProjectPoint, OpticalAxis) {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = cam.height = 100;
  PixelProjection p = project_point({0, 0, 1}, cam);
  EXPECT_DOUBLE_EQ(p.u, 50);
  EXPECT_DOUBLE_EQ(p.v, 50);
  EXPECT_DOUBLE_EQ(p.depth, 1);

  PixelProjection q = project_point({0.1, 0, 1}, cam);
  EXPECT_DOUBLE_EQ(q.u, 60);
  EXPECT_DOUBLE_EQ(q.v, 50);
}

TEST(ProjectPoint, BehindCameraThrows) {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 50;
  cam.width = cam.height = 100;
  EXPECT_THROW(project_point({0, 0, -1}, cam), Error);
  EXPECT_THROW(project_point({0, 0, 0}, cam), Error);
}

TEST(ProjectPoint, MatchesHomogeneousMatrixOracle) {
  for (int trial = 0; trial < 200; ++trial) {
    Camera cam = random_camera();
    Vec3d p = random_vec(-1, 1) + Vec3d{0, 0, 3};

    // Full 3x4 pipeline: K [R|t] applied to homogeneous coordinates.
    double P[3][4];
    double K[3][3] = {{cam.fx, 0, cam.cx}, {0, cam.fy, cam.cy}, {0, 0, 1}};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k)
          s += K[i][k] * (j < 3 ? cam.pose.rotation(k, j) : cam.pose.translation[k]);
        P[i][j] = s;
      }
    double hx = P[0][0] * p.x + P[0][1] * p.y + P[0][2] * p.z + P[0][3];
    double hy = P[1][0] * p.x + P[1][1] * p.y + P[1][2] * p.z + P[1][3];
    double hz = P[2][0] * p.x + P[2][1] * p.y + P[2][2] * p.z + P[2][3];
    if (hz <= 1e-8) continue;

    PixelProjection proj = project_point(p, cam);
    EXPECT_NEAR(proj.u, hx / hz, 1e-10);
    EXPECT_NEAR(proj.v, hy / hz, 1e-10);
    EXPECT_NEAR(proj.depth, hz, 1e-10);
  }
}

TEST(ProjectPoint, UnprojectRoundTrip) {
  std::uniform_real_distribution<double> u01(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Camera cam = random_camera();
    double u = u01(rng) * cam.width;
    double v = u01(rng) * cam.height;
    double depth = 0.5 + 4 * u01(rng);
    Vec3d p = unproject(u, v, depth, cam);
    PixelProjection proj = project_point(p, cam);
    EXPECT_NEAR(proj.u, u, 1e-9);
    EXPECT_NEAR(proj.v, v, 1e-9);
    EXPECT_NEAR(proj.depth, depth, 1e-9);
  }
}

Image<float> random_pointmap(int w, int h) {
  Image<float> img(w, h, 3);
  std::uniform_real_distribution<double> u(-2, 2);
  for (auto& v : img.data) v = float(u(rng));
  return img;
}

TEST(WorldFromLocalPointmap, IdentityPose) {
  Image<float> pm = random_pointmap(8, 6);
  Image<float> out = world_from_local_pointmap(pm, RigidTransformd{});
  EXPECT_EQ(out.data, pm.data);
}

TEST(WorldFromLocalPointmap, PureTranslation) {
  Image<float> pm = random_pointmap(8, 6);
  RigidTransformd pose;  // camera-from-world: p_cam = p_world + t
  pose.translation = {0.5, -1.25, 2.0};
  Image<float> out = world_from_local_pointmap(pm, pose);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c)
        EXPECT_NEAR(out.at(x, y)[c], pm.at(x, y)[c] - float(pose.translation[c]), 1e-6);
}

TEST(WorldFromLocalPointmap, InverseRoundTrip) {
  for (int trial = 0; trial < 20; ++trial) {
    RigidTransformd pose;
    pose.rotation = random_unit_quat().to_rotation();
    pose.translation = random_vec(-1, 1);

    Image<float> pm = random_pointmap(8, 6);
    Image<float> world = world_from_local_pointmap(pm, pose);
    // Going back through the inverse pose applies pose itself.
    Image<float> back = world_from_local_pointmap(world, pose.inverse());
    for (size_t i = 0; i < pm.data.size(); ++i) EXPECT_NEAR(back.data[i], pm.data[i], 1e-5);
  }
}

TEST(RigidTransform, InverseComposesToIdentity) {
  for (int trial = 0; trial < 50; ++trial) {
    RigidTransformd t;
    t.rotation = random_unit_quat().to_rotation();
    t.translation = random_vec(-2, 2);
    RigidTransformd id = t.compose(t.inverse());
    Mat3d err = id.rotation - Mat3d::identity();
    for (double v : err.m) EXPECT_LT(std::abs(v), 1e-9);
    EXPECT_LT(id.translation.norm(), 1e-9);
  }
}

TEST(Camera, ValidateRejectsBadRotation) {
  Camera cam;
  cam.fx = cam.fy = 100;
  cam.cx = cam.cy = 32;
  cam.width = cam.height = 64;
  cam.validate();
  cam.pose.rotation(0, 0) = 1.001;
  EXPECT_THROW(cam.validate(), Error);
}

}  // namespace
