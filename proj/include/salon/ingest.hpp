// Frame I/O (the backbone boundary), the synthetic oracle backbone that
// stands in for the reconstruction network at desk scale, and focal recovery.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "salon/core.hpp"
#include "salon/io.hpp"

namespace salon {

// One backbone output frame. All grids share the same H x W; saliency is
// stored as a logit and activated with softplus so fusion weights stay > 0.
struct PixelFrame {
  Image<float> rgb;             // H x W x 3 in [0,1]
  Image<float> pointmap_world;  // H x W x 3 scene units
  Image<float> latent;          // H x W x C
  Image<float> saliency_logit;  // H x W
  Camera camera;
  int64_t frame_id = 0;

  int width() const { return rgb.width; }
  int height() const { return rgb.height; }
  int latent_dim() const { return latent.channels; }

  void validate() const {
    auto same = [&](const auto& img) { return img.width == rgb.width && img.height == rgb.height; };
    if (!same(pointmap_world) || !same(latent) || !same(saliency_logit))
      throw Error(ErrorCode::ShapeMismatch, "frame grids differ in size");
    if (rgb.channels != 3 || pointmap_world.channels != 3 || saliency_logit.channels != 1)
      throw Error(ErrorCode::ShapeMismatch, "frame channel counts invalid");
    if (camera.width != rgb.width || camera.height != rgb.height)
      throw Error(ErrorCode::ShapeMismatch, "camera size differs from grids");
  }
};

// ---------------------------------------------------------------------------
// Synthetic scenes

struct AlbedoPattern {
  enum class Type { Checker, Stripes, Gradient, Rings };
  Type type = Type::Gradient;
  Vec3d color_a{0.9, 0.9, 0.9};
  Vec3d color_b{0.1, 0.1, 0.1};
  double scale = 1.0;

  Vec3d eval(double u, double v) const {
    double m = 0;
    switch (type) {
      case Type::Checker: {
        int64_t c = int64_t(std::floor(u * scale)) + int64_t(std::floor(v * scale));
        m = (c & 1) ? 1.0 : 0.0;
        break;
      }
      case Type::Stripes:
        m = 0.5 + 0.5 * std::sin(2.0 * M_PI * u * scale);
        break;
      case Type::Gradient:
        m = std::clamp(0.5 * (u + v) * scale, 0.0, 1.0);
        break;
      case Type::Rings: {
        double r = std::sqrt((u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5));
        m = 0.5 + 0.5 * std::sin(2.0 * M_PI * r * scale);
        break;
      }
    }
    return color_a * (1.0 - m) + color_b * m;
  }
};

struct Primitive {
  enum class Type { Plane, Sphere, Box };
  Type type = Type::Plane;
  // Plane: rectangle p0 + s*e1 + t*e2, (s,t) in [0,1]^2.
  Vec3d p0, e1, e2;
  // Sphere.
  Vec3d center;
  double radius = 1.0;
  // Box (axis-aligned).
  Vec3d box_min, box_max;
  AlbedoPattern albedo;
};

struct SceneSpec {
  int width = 128, height = 96;
  int latent_dim = 32;
  uint64_t seed = 0;
  double depth_noise = 0.0;  // relative sigma applied along the ray
  double background_distance = 20.0;
  Vec3d background_color{0.05, 0.05, 0.08};
  Vec3d bounds_min{-10, -10, -10}, bounds_max{10, 10, 10};
  std::vector<Primitive> primitives;
  std::vector<Camera> cameras;

  void validate() const {
    if (cameras.empty()) throw Error(ErrorCode::InvalidArgument, "scene: empty camera trajectory");
    for (const Camera& c : cameras) c.validate();
    auto inside = [&](const Vec3d& p) {
      return p.x >= bounds_min.x && p.x <= bounds_max.x && p.y >= bounds_min.y &&
             p.y <= bounds_max.y && p.z >= bounds_min.z && p.z <= bounds_max.z;
    };
    for (const Primitive& pr : primitives) {
      bool ok = true;
      switch (pr.type) {
        case Primitive::Type::Plane:
          ok = inside(pr.p0) && inside(pr.p0 + pr.e1) && inside(pr.p0 + pr.e2) &&
               inside(pr.p0 + pr.e1 + pr.e2);
          break;
        case Primitive::Type::Sphere:
          ok = inside(pr.center - Vec3d{pr.radius, pr.radius, pr.radius}) &&
               inside(pr.center + Vec3d{pr.radius, pr.radius, pr.radius});
          break;
        case Primitive::Type::Box:
          ok = inside(pr.box_min) && inside(pr.box_max);
          break;
      }
      if (!ok) throw Error(ErrorCode::InvalidArgument, "scene: primitive outside declared bounds");
    }
  }
};

namespace detail {

struct RayHit {
  double t = -1;           // camera-depth parameter (ray dir has unit camera z)
  Vec3d normal;
  Vec3d rgb;
  bool primitive = false;  // false for the background shell
};

inline bool hit_plane(const Primitive& pr, const Vec3d& o, const Vec3d& d, RayHit& hit) {
  Vec3d n = pr.e1.cross(pr.e2);
  double denom = d.dot(n);
  if (std::abs(denom) < 1e-14) return false;
  double t = (pr.p0 - o).dot(n) / denom;
  if (t <= 1e-9) return false;
  Vec3d local = o + d * t - pr.p0;
  // Solve local = s*e1 + w*e2 in the plane basis.
  double a11 = pr.e1.dot(pr.e1), a12 = pr.e1.dot(pr.e2), a22 = pr.e2.dot(pr.e2);
  double b1 = local.dot(pr.e1), b2 = local.dot(pr.e2);
  double det = a11 * a22 - a12 * a12;
  if (std::abs(det) < 1e-14) return false;
  double s = (b1 * a22 - b2 * a12) / det;
  double w = (a11 * b2 - a12 * b1) / det;
  if (s < 0 || s > 1 || w < 0 || w > 1) return false;
  hit.t = t;
  hit.normal = n.normalized();
  hit.rgb = pr.albedo.eval(s, w);
  hit.primitive = true;
  return true;
}

inline bool hit_sphere(const Primitive& pr, const Vec3d& o, const Vec3d& d, RayHit& hit) {
  Vec3d oc = o - pr.center;
  double a = d.dot(d);
  double b = 2.0 * d.dot(oc);
  double c = oc.dot(oc) - pr.radius * pr.radius;
  double disc = b * b - 4 * a * c;
  if (disc < 0) return false;
  double sq = std::sqrt(disc);
  double t = (-b - sq) / (2 * a);
  if (t <= 1e-9) t = (-b + sq) / (2 * a);
  if (t <= 1e-9) return false;
  Vec3d p = o + d * t;
  Vec3d n = (p - pr.center).normalized();
  double u = 0.5 + std::atan2(n.y, n.x) / (2.0 * M_PI);
  double v = 0.5 + std::asin(std::clamp(n.z, -1.0, 1.0)) / M_PI;
  hit.t = t;
  hit.normal = n;
  hit.rgb = pr.albedo.eval(u, v);
  hit.primitive = true;
  return true;
}

inline bool hit_box(const Primitive& pr, const Vec3d& o, const Vec3d& d, RayHit& hit) {
  double t0 = 1e-9, t1 = std::numeric_limits<double>::infinity();
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    double inv = 1.0 / d[a];
    double ta = (pr.box_min[a] - o[a]) * inv;
    double tb = (pr.box_max[a] - o[a]) * inv;
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis = a;
    }
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  if (axis < 0) return false;  // origin inside the box
  Vec3d p = o + d * t0;
  Vec3d n{};
  n[axis] = d[axis] > 0 ? -1.0 : 1.0;
  int ua = (axis + 1) % 3, va = (axis + 2) % 3;
  double u = (p[ua] - pr.box_min[ua]) / std::max(1e-12, pr.box_max[ua] - pr.box_min[ua]);
  double v = (p[va] - pr.box_min[va]) / std::max(1e-12, pr.box_max[va] - pr.box_min[va]);
  hit.t = t0;
  hit.normal = n;
  hit.rgb = pr.albedo.eval(u, v);
  hit.primitive = true;
  return true;
}

inline RayHit trace(const SceneSpec& spec, const Vec3d& o, const Vec3d& d) {
  RayHit best;
  best.t = spec.background_distance;
  best.rgb = spec.background_color;
  best.normal = -d.normalized();
  best.primitive = false;
  for (const Primitive& pr : spec.primitives) {
    RayHit h;
    bool ok = false;
    switch (pr.type) {
      case Primitive::Type::Plane: ok = hit_plane(pr, o, d, h); break;
      case Primitive::Type::Sphere: ok = hit_sphere(pr, o, d, h); break;
      case Primitive::Type::Box: ok = hit_box(pr, o, d, h); break;
    }
    if (ok && h.t < best.t) best = h;
  }
  return best;
}

}  // namespace detail

struct SynthResult {
  std::vector<PixelFrame> frames;
  std::vector<Image<float>> gt_depth;  // noiseless camera-space depth per frame
};

// Renders the scene with exact ray-primitive intersection. rgb and
// pointmap_world come from the hits; the latent grid is a fixed function of
// local rgb/normal/position and the saliency logit follows image-gradient
// magnitude. Bit-deterministic for a fixed seed.
inline SynthResult synth_sequence(const SceneSpec& spec) {
  spec.validate();
  const int W = spec.width, H = spec.height, C = spec.latent_dim;
  SynthResult result;
  uint64_t primitive_hits = 0;

  for (size_t fi = 0; fi < spec.cameras.size(); ++fi) {
    const Camera& cam = spec.cameras[fi];
    PixelFrame frame;
    frame.camera = cam;
    frame.frame_id = int64_t(fi);
    frame.rgb = Image<float>(W, H, 3);
    frame.pointmap_world = Image<float>(W, H, 3);
    frame.latent = Image<float>(W, H, C);
    frame.saliency_logit = Image<float>(W, H, 1);
    Image<float> depth(W, H, 1);
    Image<float> normals(W, H, 3);

    RigidTransformd world_from_cam = cam.pose.inverse();
    Vec3d origin = world_from_cam.translation;
    std::mt19937_64 rng(spec.seed ^ (0x9E3779B97F4A7C15ull * (fi + 1)));
    std::normal_distribution<double> gauss(0.0, 1.0);

    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        // Pixel (x, y) samples the ray through continuous image point (x, y);
        // the direction has unit camera-frame z so the hit parameter t is the
        // camera depth.
        Vec3d dir_cam{(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0};
        Vec3d dir = world_from_cam.rotation * dir_cam;
        detail::RayHit hit = detail::trace(spec, origin, dir);
        if (hit.primitive) ++primitive_hits;

        double t = hit.t;
        depth.at(x, y)[0] = float(t);
        if (spec.depth_noise > 0) t *= 1.0 + spec.depth_noise * gauss(rng);
        Vec3d p = origin + dir * t;

        float* rgb = frame.rgb.at(x, y);
        rgb[0] = float(hit.rgb.x); rgb[1] = float(hit.rgb.y); rgb[2] = float(hit.rgb.z);
        float* pm = frame.pointmap_world.at(x, y);
        pm[0] = float(p.x); pm[1] = float(p.y); pm[2] = float(p.z);
        float* nm = normals.at(x, y);
        nm[0] = float(hit.normal.x); nm[1] = float(hit.normal.y); nm[2] = float(hit.normal.z);
      }

    // Saliency from local image-gradient magnitude (central differences).
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int xm = std::max(0, x - 1), xp = std::min(W - 1, x + 1);
        int ym = std::max(0, y - 1), yp = std::min(H - 1, y + 1);
        double g = 0;
        for (int c = 0; c < 3; ++c) {
          g += std::abs(double(frame.rgb.at(xp, y)[c]) - frame.rgb.at(xm, y)[c]);
          g += std::abs(double(frame.rgb.at(x, yp)[c]) - frame.rgb.at(x, ym)[c]);
        }
        frame.saliency_logit.at(x, y)[0] = float(-1.0 + 4.0 * g / 6.0);
      }

    // Latent: rgb, normal and position channels first, then fixed sinusoidal
    // mixtures so the decoding heads have smooth signal to learn from.
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const float* rgb = frame.rgb.at(x, y);
        const float* nm = normals.at(x, y);
        const float* pm = frame.pointmap_world.at(x, y);
        float* f = frame.latent.at(x, y);
        for (int c = 0; c < C; ++c) {
          if (c < 3) {
            f[c] = rgb[c] - 0.5f;
          } else if (c < 6) {
            f[c] = nm[c - 3];
          } else if (c < 9) {
            f[c] = 0.25f * pm[c - 6];
          } else {
            double freq = 0.35 * double(1 + (c - 9) % 5);
            int pick = (c - 9) % 3;
            double mix = freq * (pm[pick] + 0.7 * pm[(pick + 1) % 3]) + 0.15 * double(c);
            f[c] = float(0.5 * std::sin(mix));
          }
        }
      }

    result.frames.push_back(std::move(frame));
    result.gt_depth.push_back(std::move(depth));
  }

  if (primitive_hits == 0)
    throw Error(ErrorCode::EmptyScene, "synth_sequence: no primitive intersects any ray");
  return result;
}

// ---------------------------------------------------------------------------
// Weiszfeld focal estimation

// Recovers the focal length minimizing the robust L1 residual between pixel
// offsets (u-cx, v-cy) and f*(x/z, y/z), with the principal point assumed at
// the image center. Iteratively reweighted fixed point, <= 10 iterations.
inline double estimate_focal_weiszfeld(const Image<float>& pointmap_local) {
  if (pointmap_local.channels != 3)
    throw Error(ErrorCode::ShapeMismatch, "pointmap must have 3 channels");
  const int W = pointmap_local.width, H = pointmap_local.height;
  const double cx = W / 2.0, cy = H / 2.0;

  std::vector<double> px, py, qx, qy;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const float* p = pointmap_local.at(x, y);
      if (!(p[2] > 1e-6f)) continue;
      px.push_back(x - cx);
      py.push_back(y - cy);
      qx.push_back(double(p[0]) / p[2]);
      qy.push_back(double(p[1]) / p[2]);
    }
  size_t n = px.size();
  if (n < 10) throw Error(ErrorCode::DegenerateFrame, "weiszfeld: fewer than 10 valid points");

  double num = 0, den = 0;
  for (size_t i = 0; i < n; ++i) {
    num += px[i] * qx[i] + py[i] * qy[i];
    den += qx[i] * qx[i] + qy[i] * qy[i];
  }
  if (den < 1e-12) throw Error(ErrorCode::DegenerateFrame, "weiszfeld: degenerate directions");
  double f = num / den;

  for (int iter = 0; iter < 10; ++iter) {
    num = den = 0;
    for (size_t i = 0; i < n; ++i) {
      double rx = px[i] - f * qx[i], ry = py[i] - f * qy[i];
      double wgt = 1.0 / std::max(std::sqrt(rx * rx + ry * ry), 1e-12);
      num += wgt * (px[i] * qx[i] + py[i] * qy[i]);
      den += wgt * (qx[i] * qx[i] + qy[i] * qy[i]);
    }
    if (den < 1e-12) throw Error(ErrorCode::DegenerateFrame, "weiszfeld: degenerate directions");
    double f_new = num / den;
    double rel = std::abs(f_new - f) / std::max(std::abs(f), 1e-12);
    f = f_new;
    if (rel < 1e-6) break;
  }
  return f;
}

// ---------------------------------------------------------------------------
// Frame file format "SLNF": header, f32 payloads (rgb, pointmap, latent,
// saliency), then the camera block. Payload round trips are bit-exact; the
// camera rotation is re-orthonormalized on load because it is stored as f32.

inline void write_frame(const PixelFrame& frame, const std::string& path) {
  frame.validate();
  std::ofstream out = open_output(path);
  write_magic(out, "SLNF");
  write_pod<uint32_t>(out, 1);
  write_pod<uint32_t>(out, uint32_t(frame.height()));
  write_pod<uint32_t>(out, uint32_t(frame.width()));
  write_pod<uint32_t>(out, uint32_t(frame.latent_dim()));
  write_array(out, frame.rgb.data.data(), frame.rgb.data.size());
  write_array(out, frame.pointmap_world.data.data(), frame.pointmap_world.data.size());
  write_array(out, frame.latent.data.data(), frame.latent.data.size());
  write_array(out, frame.saliency_logit.data.data(), frame.saliency_logit.data.size());
  float pose[12];
  for (int i = 0; i < 9; ++i) pose[i] = float(frame.camera.pose.rotation.m[i]);
  pose[9] = float(frame.camera.pose.translation.x);
  pose[10] = float(frame.camera.pose.translation.y);
  pose[11] = float(frame.camera.pose.translation.z);
  write_array(out, pose, 12);
  float intr[4] = {float(frame.camera.fx), float(frame.camera.fy), float(frame.camera.cx),
                   float(frame.camera.cy)};
  write_array(out, intr, 4);
  write_pod<uint32_t>(out, uint32_t(frame.camera.width));
  write_pod<uint32_t>(out, uint32_t(frame.camera.height));
  if (!out) throw Error(ErrorCode::MalformedFile, "write failed: " + path);
}

inline PixelFrame load_frame(const std::string& path) {
  std::ifstream in = open_input(path);
  expect_magic(in, "SLNF", "frame");
  uint32_t version = read_pod<uint32_t>(in, "version");
  if (version != 1) throw Error(ErrorCode::MalformedFile, "unsupported frame version");
  uint32_t H = read_pod<uint32_t>(in, "H");
  uint32_t W = read_pod<uint32_t>(in, "W");
  uint32_t C = read_pod<uint32_t>(in, "C");
  if (H == 0 || W == 0 || C == 0 || H > 1u << 16 || W > 1u << 16 || C > 4096)
    throw Error(ErrorCode::MalformedFile, "frame dimensions out of range");

  PixelFrame frame;
  frame.rgb = Image<float>(int(W), int(H), 3);
  frame.pointmap_world = Image<float>(int(W), int(H), 3);
  frame.latent = Image<float>(int(W), int(H), int(C));
  frame.saliency_logit = Image<float>(int(W), int(H), 1);
  read_array(in, frame.rgb.data.data(), frame.rgb.data.size(), "rgb");
  read_array(in, frame.pointmap_world.data.data(), frame.pointmap_world.data.size(), "pointmap");
  read_array(in, frame.latent.data.data(), frame.latent.data.size(), "latent");
  read_array(in, frame.saliency_logit.data.data(), frame.saliency_logit.data.size(), "saliency");

  float pose[12];
  read_array(in, pose, 12, "pose");
  float intr[4];
  read_array(in, intr, 4, "intrinsics");
  uint32_t cw = read_pod<uint32_t>(in, "camera width");
  uint32_t ch = read_pod<uint32_t>(in, "camera height");
  if (cw != W || ch != H)
    throw Error(ErrorCode::MalformedFile, "camera size disagrees with payload dimensions");

  Camera& cam = frame.camera;
  for (int i = 0; i < 9; ++i) cam.pose.rotation.m[i] = pose[i];
  cam.pose.translation = {pose[9], pose[10], pose[11]};
  cam.fx = intr[0]; cam.fy = intr[1]; cam.cx = intr[2]; cam.cy = intr[3];
  cam.width = int(cw); cam.height = int(ch);

  // Gram-Schmidt: the f32 rotation is only ~1e-7 orthonormal.
  Mat3d& R = cam.pose.rotation;
  Vec3d r0{R(0, 0), R(0, 1), R(0, 2)};
  Vec3d r1{R(1, 0), R(1, 1), R(1, 2)};
  r0 = r0.normalized();
  r1 = (r1 - r0 * r0.dot(r1)).normalized();
  Vec3d r2 = r0.cross(r1);
  R(0, 0) = r0.x; R(0, 1) = r0.y; R(0, 2) = r0.z;
  R(1, 0) = r1.x; R(1, 1) = r1.y; R(1, 2) = r1.z;
  R(2, 0) = r2.x; R(2, 1) = r2.y; R(2, 2) = r2.z;

  frame.validate();
  return frame;
}

// ---------------------------------------------------------------------------
// Sequence manifest: JSON-formatted text listing frame paths and ids.

struct ManifestEntry {
  std::string path;
  int64_t frame_id = 0;
};

struct Manifest {
  std::string scene_units = "meters";
  std::vector<ManifestEntry> entries;
};

}  // namespace salon
