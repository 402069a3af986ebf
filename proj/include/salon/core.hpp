// Core geometry: small vector/matrix math, cameras, Gaussian primitives.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace salon {

enum class ErrorCode {
  BehindCamera,
  DegenerateFrame,
  MalformedFile,
  EmptyScene,
  NonFinite,
  EmptyVoxel,
  MixedVoxel,
  VoxelSizeMismatch,
  OutOfRange,
  GridOverflow,
  MaskShapeMismatch,
  ShapeMismatch,
  EmptyValidMask,
  ConfigMismatch,
  InvalidArgument,
  InternalInvariant,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

template <typename T>
struct Vec3 {
  T x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

  T& operator[](int i) { return (&x)[i]; }
  const T& operator[](int i) const { return (&x)[i]; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(T s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(T s) { x *= s; y *= s; z *= s; return *this; }

  T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  T squared_norm() const { return dot(*this); }
  T norm() const { return std::sqrt(squared_norm()); }
  Vec3 normalized() const {
    T n = norm();
    return n > T(0) ? *this / n : Vec3{T(0), T(0), T(0)};
  }
  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }

  template <typename U>
  Vec3<U> cast() const { return {U(x), U(y), U(z)}; }
};

template <typename T>
inline Vec3<T> operator*(T s, const Vec3<T>& v) { return v * s; }

using Vec3d = Vec3<double>;
using Vec3f = Vec3<float>;

// Row-major 3x3 matrix.
template <typename T>
struct Mat3 {
  std::array<T, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }
  static Mat3 zero() { return Mat3{}; }
  static Mat3 diag(const Vec3<T>& d) {
    Mat3 r;
    r(0, 0) = d.x; r(1, 1) = d.y; r(2, 2) = d.z;
    return r;
  }

  T& operator()(int r, int c) { return m[r * 3 + c]; }
  const T& operator()(int r, int c) const { return m[r * 3 + c]; }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        T s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
  Vec3<T> operator*(const Vec3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] - o.m[i];
    return r;
  }
  Mat3 operator*(T s) const {
    Mat3 r;
    for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
    return r;
  }
  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }
  // Transforms v by the transpose (inverse for orthonormal matrices).
  Vec3<T> transposed_mul(const Vec3<T>& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
  T determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }
  template <typename U>
  Mat3<U> cast() const {
    Mat3<U> r;
    for (int i = 0; i < 9; ++i) r.m[i] = U(m[i]);
    return r;
  }
};

using Mat3d = Mat3<double>;

// Quaternion (w, x, y, z); unit quaternions rotate the covariance eigenframe.
template <typename T>
struct Quat {
  T w = 1, x = 0, y = 0, z = 0;

  Quat() = default;
  Quat(T w_, T x_, T y_, T z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quat identity() { return {1, 0, 0, 0}; }

  T norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  Quat normalized() const {
    T n = norm();
    if (n <= T(0)) return identity();
    return {w / n, x / n, y / n, z / n};
  }
  // Hamilton product.
  Quat operator*(const Quat& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }
  Mat3<T> to_rotation() const {
    Mat3<T> r;
    const T xx = x * x, yy = y * y, zz = z * z;
    const T xy = x * y, xz = x * z, yz = y * z;
    const T wx = w * x, wy = w * y, wz = w * z;
    r(0, 0) = 1 - 2 * (yy + zz); r(0, 1) = 2 * (xy - wz);     r(0, 2) = 2 * (xz + wy);
    r(1, 0) = 2 * (xy + wz);     r(1, 1) = 1 - 2 * (xx + zz); r(1, 2) = 2 * (yz - wx);
    r(2, 0) = 2 * (xz - wy);     r(2, 1) = 2 * (yz + wx);     r(2, 2) = 1 - 2 * (xx + yy);
    return r;
  }
  template <typename U>
  Quat<U> cast() const { return {U(w), U(x), U(y), U(z)}; }
};

using Quatd = Quat<double>;

template <typename T>
struct RigidTransform {
  Mat3<T> rotation = Mat3<T>::identity();
  Vec3<T> translation{};

  Vec3<T> apply(const Vec3<T>& p) const { return rotation * p + translation; }
  RigidTransform inverse() const {
    RigidTransform r;
    r.rotation = rotation.transposed();
    r.translation = -(r.rotation * translation);
    return r;
  }
  RigidTransform compose(const RigidTransform& inner) const {
    RigidTransform r;
    r.rotation = rotation * inner.rotation;
    r.translation = rotation * inner.translation + translation;
    return r;
  }
  template <typename U>
  RigidTransform<U> cast() const { return {rotation.template cast<U>(), translation.template cast<U>()}; }
};

using RigidTransformd = RigidTransform<double>;

// Pinhole camera. `pose` maps world to camera coordinates (camera-from-world).
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  RigidTransformd pose;
  int width = 0, height = 0;

  Vec3d center_world() const { return pose.inverse().translation; }

  void validate() const {
    if (fx <= 0 || fy <= 0) throw Error(ErrorCode::InvalidArgument, "camera: focal must be positive");
    if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "camera: size must be positive");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
      throw Error(ErrorCode::InvalidArgument, "camera: principal point outside image");
    Mat3d rtr = pose.rotation.transposed() * pose.rotation;
    Mat3d err = rtr - Mat3d::identity();
    for (double v : err.m)
      if (std::abs(v) > 1e-9) throw Error(ErrorCode::InvalidArgument, "camera: rotation not orthonormal");
    if (std::abs(pose.rotation.determinant() - 1.0) > 1e-9)
      throw Error(ErrorCode::InvalidArgument, "camera: rotation determinant != +1");
  }
};

// Dense H x W x C grid, row-major, channel-innermost.
template <typename T>
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<T> data;

  Image() = default;
  Image(int w, int h, int c) : width(w), height(h), channels(c), data(size_t(w) * h * c, T(0)) {}

  T* at(int x, int y) { return data.data() + (size_t(y) * width + x) * channels; }
  const T* at(int x, int y) const { return data.data() + (size_t(y) * width + x) * channels; }
  size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels;
  }
};

// One splat primitive. Covariance is parametrized as rotation (unit quaternion)
// plus per-axis log standard deviation, so it stays PSD under additive updates.
// Opacity lives in logit space; sh holds (degree+1)^2 RGB coefficient triples.
struct Gaussian3D {
  Vec3d mu;
  Quatd quat = Quatd::identity();
  Vec3d log_scale;
  double opacity_logit = 0;
  std::vector<Vec3d> sh;

  int sh_degree() const {
    int n = int(sh.size());
    int d = 0;
    while ((d + 1) * (d + 1) < n) ++d;
    return d;
  }
  double opacity() const { return 1.0 / (1.0 + std::exp(-opacity_logit)); }
};

template <typename T>
inline T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

template <typename T>
inline T logit(T p) { return std::log(p / (T(1) - p)); }

template <typename T>
inline T softplus(T v) {
  // log(1+e^v), stable for large |v|.
  return v > T(20) ? v : std::log1p(std::exp(v));
}

// Sigma = R S S^T R^T with S = diag(exp(log_scale)).
template <typename T>
inline Mat3<T> build_covariance(const Quat<T>& quat, const Vec3<T>& log_scale) {
  Mat3<T> r = quat.to_rotation();
  Vec3<T> s{std::exp(log_scale.x), std::exp(log_scale.y), std::exp(log_scale.z)};
  Mat3<T> rs = r * Mat3<T>::diag(s);
  return rs * rs.transposed();
}

namespace sh {
// Real spherical harmonic basis constants, degrees 0..3 (3DGS convention).
inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.4886025119029199;
inline constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                  -1.0925484305920792, 0.5462742152960396};
inline constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                                  0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                                  -0.5900435899266435};

// Basis values for a unit direction; `out` must hold (degree+1)^2 entries.
template <typename T>
inline void basis(const Vec3<T>& d, int degree, T* out) {
  out[0] = T(kC0);
  if (degree < 1) return;
  const T x = d.x, y = d.y, z = d.z;
  out[1] = T(-kC1) * y;
  out[2] = T(kC1) * z;
  out[3] = T(-kC1) * x;
  if (degree < 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, yz = y * z, xz = x * z;
  out[4] = T(kC2[0]) * xy;
  out[5] = T(kC2[1]) * yz;
  out[6] = T(kC2[2]) * (2 * zz - xx - yy);
  out[7] = T(kC2[3]) * xz;
  out[8] = T(kC2[4]) * (xx - yy);
  if (degree < 3) return;
  out[9] = T(kC3[0]) * y * (3 * xx - yy);
  out[10] = T(kC3[1]) * xy * z;
  out[11] = T(kC3[2]) * y * (4 * zz - xx - yy);
  out[12] = T(kC3[3]) * z * (2 * zz - 3 * xx - 3 * yy);
  out[13] = T(kC3[4]) * x * (4 * zz - xx - yy);
  out[14] = T(kC3[5]) * z * (xx - yy);
  out[15] = T(kC3[6]) * x * (xx - 3 * yy);
}
}  // namespace sh

// rgb = max(0, basis(dir) . sh + 0.5); dir must be unit length.
template <typename T>
inline Vec3<T> sh_eval(std::span<const Vec3<T>> coeffs, const Vec3<T>& dir) {
  int n = int(coeffs.size());
  int degree = 0;
  while ((degree + 1) * (degree + 1) < n) ++degree;
  T b[16];
  sh::basis(dir, degree, b);
  Vec3<T> rgb{T(0.5), T(0.5), T(0.5)};
  for (int i = 0; i < n; ++i) rgb += coeffs[i] * b[i];
  rgb.x = std::max(rgb.x, T(0));
  rgb.y = std::max(rgb.y, T(0));
  rgb.z = std::max(rgb.z, T(0));
  return rgb;
}

struct PixelProjection {
  double u = 0, v = 0, depth = 0;
};

// Pinhole projection; throws BehindCamera for points at or behind the near plane.
inline PixelProjection project_point(const Vec3d& p_world, const Camera& cam) {
  Vec3d p = cam.pose.apply(p_world);
  if (p.z <= 1e-8) throw Error(ErrorCode::BehindCamera, "project_point: depth <= 0");
  return {cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy, p.z};
}

inline Vec3d unproject(double u, double v, double depth, const Camera& cam) {
  Vec3d p_cam{(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
  return cam.pose.inverse().apply(p_cam);
}

// Applies the world-from-camera transform (inverse of camera-from-world pose)
// to every point of a local pointmap.
inline Image<float> world_from_local_pointmap(const Image<float>& pointmap_local,
                                              const RigidTransformd& pose) {
  if (pointmap_local.channels != 3)
    throw Error(ErrorCode::ShapeMismatch, "pointmap must have 3 channels");
  RigidTransformd inv = pose.inverse();
  Image<float> out(pointmap_local.width, pointmap_local.height, 3);
  for (int y = 0; y < pointmap_local.height; ++y)
    for (int x = 0; x < pointmap_local.width; ++x) {
      const float* src = pointmap_local.at(x, y);
      Vec3d p = inv.apply(Vec3d{src[0], src[1], src[2]});
      float* dst = out.at(x, y);
      dst[0] = float(p.x); dst[1] = float(p.y); dst[2] = float(p.z);
    }
  return out;
}

}  // namespace salon
