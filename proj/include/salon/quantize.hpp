// Saliency-aware Gaussian quantization: voxelization, weighted anchor fusion,
// the global anchor store, frustum extraction, and incremental merging.
#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "salon/core.hpp"
#include "salon/io.hpp"

namespace salon {

// Lattice coordinates of a voxel: key = floor(x / gamma) per axis. floor, not
// round or truncation, so negative coordinates land in the voxel below zero.
struct VoxelKey {
  int64_t ix = 0, iy = 0, iz = 0;
  bool operator==(const VoxelKey& o) const { return ix == o.ix && iy == o.iy && iz == o.iz; }
  bool operator<(const VoxelKey& o) const {
    if (ix != o.ix) return ix < o.ix;
    if (iy != o.iy) return iy < o.iy;
    return iz < o.iz;
  }
};

struct VoxelKeyHash {
  size_t operator()(const VoxelKey& k) const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    mix(uint64_t(k.ix)); mix(uint64_t(k.iy)); mix(uint64_t(k.iz));
    return size_t(h);
  }
};

inline std::pair<VoxelKey, Vec3d> voxel_key(const Vec3d& x, double gamma) {
  if (gamma <= 0) throw Error(ErrorCode::InvalidArgument, "voxel size must be positive");
  if (!x.finite()) throw Error(ErrorCode::NonFinite, "voxel_key: non-finite position");
  VoxelKey k{int64_t(std::floor(x.x / gamma)), int64_t(std::floor(x.y / gamma)),
             int64_t(std::floor(x.z / gamma))};
  return {k, Vec3d{double(k.ix) * gamma, double(k.iy) * gamma, double(k.iz) * gamma}};
}

// Anchor Gaussian attributes decoded from the fused latent, plus the refined
// saliency written back after refinement. Fusion sums stay authoritative.
struct DecodedAnchor {
  Quatd quat = Quatd::identity();
  Vec3d log_scale;
  double opacity_logit = 0;
  std::vector<Vec3d> sh;
  double refined_saliency = 0;
};

// One voxel's fused representative. Kept as running saliency-weighted sums so
// incremental merging is exactly order-free up to FP associativity.
struct Anchor {
  VoxelKey key;
  double sum_s = 0;                 // accumulated saliency
  Vec3d sum_sx;                     // sum of s_i * x_i
  std::vector<double> sum_sf;       // sum of s_i * f_i
  std::optional<DecodedAnchor> decoded;

  Vec3d position() const { return sum_sx / sum_s; }
  double saliency() const { return sum_s; }
  std::vector<double> latent() const {
    std::vector<double> f(sum_sf.size());
    for (size_t i = 0; i < f.size(); ++i) f[i] = sum_sf[i] / sum_s;
    return f;
  }
  void add(const Anchor& o) {
    sum_s += o.sum_s;
    sum_sx += o.sum_sx;
    if (sum_sf.size() != o.sum_sf.size())
      throw Error(ErrorCode::ShapeMismatch, "anchor latent width mismatch");
    for (size_t i = 0; i < sum_sf.size(); ++i) sum_sf[i] += o.sum_sf[i];
  }
};

struct FusionPoint {
  Vec3d x;
  double s = 0;
  std::span<const double> f;
};

// Saliency-weighted fusion of points sharing one voxel. Positions fused are
// the original points, not the shared voxel center, so sub-voxel geometry
// survives and the weighting is meaningful.
inline Anchor fuse_points(std::span<const FusionPoint> points, double gamma) {
  if (points.empty()) throw Error(ErrorCode::EmptyVoxel, "fuse_points: empty input");
  Anchor a;
  a.key = voxel_key(points[0].x, gamma).first;
  a.sum_sf.assign(points[0].f.size(), 0.0);
  for (const FusionPoint& p : points) {
    if (!(voxel_key(p.x, gamma).first == a.key))
      throw Error(ErrorCode::MixedVoxel, "fuse_points: points span multiple voxels");
    if (p.f.size() != a.sum_sf.size())
      throw Error(ErrorCode::ShapeMismatch, "fuse_points: latent width mismatch");
    a.sum_s += p.s;
    a.sum_sx += p.x * p.s;
    for (size_t i = 0; i < p.f.size(); ++i) a.sum_sf[i] += p.s * p.f[i];
  }
  return a;
}

// Groups all points by voxel key and fuses each group. Output is sorted by
// key, so the anchor set does not depend on input ordering.
inline std::vector<Anchor> quantize_frame(std::span<const FusionPoint> points, double gamma) {
  std::unordered_map<VoxelKey, Anchor, VoxelKeyHash> groups;
  groups.reserve(points.size());
  for (const FusionPoint& p : points) {
    VoxelKey k = voxel_key(p.x, gamma).first;
    auto [it, inserted] = groups.try_emplace(k);
    Anchor& a = it->second;
    if (inserted) {
      a.key = k;
      a.sum_sf.assign(p.f.size(), 0.0);
    }
    if (p.f.size() != a.sum_sf.size())
      throw Error(ErrorCode::ShapeMismatch, "quantize_frame: latent width mismatch");
    a.sum_s += p.s;
    a.sum_sx += p.x * p.s;
    for (size_t i = 0; i < p.f.size(); ++i) a.sum_sf[i] += p.s * p.f[i];
  }
  std::vector<Anchor> anchors;
  anchors.reserve(groups.size());
  for (auto& [k, a] : groups) anchors.push_back(std::move(a));
  std::sort(anchors.begin(), anchors.end(),
            [](const Anchor& a, const Anchor& b) { return a.key < b.key; });
  return anchors;
}

struct FrustumParams {
  double margin = 0.15;  // fractional image-rectangle expansion
  double z_near = 0.01;
  double z_far = 100.0;
};

// Global spatial-hash map from voxel key to anchor.
struct AnchorStore {
  double gamma = 0.01;
  std::unordered_map<VoxelKey, Anchor, VoxelKeyHash> anchors;
  uint64_t points_absorbed = 0;

  size_t size() const { return anchors.size(); }

  void merge(std::vector<Anchor> incoming, double incoming_gamma) {
    if (incoming_gamma != gamma)
      throw Error(ErrorCode::VoxelSizeMismatch, "merge: voxel size differs from store");
    for (Anchor& a : incoming) {
      auto it = anchors.find(a.key);
      if (it == anchors.end()) {
        anchors.emplace(a.key, std::move(a));
      } else {
        it->second.add(a);
        if (a.decoded) it->second.decoded = std::move(a.decoded);
      }
    }
  }

  // Removes and returns anchors whose fused position projects inside the
  // image rectangle expanded by margin*size with camera depth in
  // (z_near, z_far). Non-extracted anchors stay untouched.
  std::vector<Anchor> frustum_extract(const Camera& cam, const FrustumParams& fr = {}) {
    if (fr.margin < 0) throw Error(ErrorCode::InvalidArgument, "frustum margin must be >= 0");
    std::vector<Anchor> out;
    for (auto it = anchors.begin(); it != anchors.end();) {
      const Vec3d mu = it->second.position();
      Vec3d p = cam.pose.apply(mu);
      bool inside = false;
      if (p.z > fr.z_near && p.z < fr.z_far) {
        double u = cam.fx * p.x / p.z + cam.cx;
        double v = cam.fy * p.y / p.z + cam.cy;
        double mx = fr.margin * cam.width;
        double my = fr.margin * cam.height;
        inside = u >= -mx && u <= cam.width + mx && v >= -my && v <= cam.height + my;
      }
      if (inside) {
        out.push_back(std::move(it->second));
        it = anchors.erase(it);
      } else {
        ++it;
      }
    }
    std::sort(out.begin(), out.end(),
              [](const Anchor& a, const Anchor& b) { return a.key < b.key; });
    return out;
  }

  std::vector<Anchor> sorted_anchors() const {
    std::vector<Anchor> out;
    out.reserve(anchors.size());
    for (const auto& [k, a] : anchors) out.push_back(a);
    std::sort(out.begin(), out.end(),
              [](const Anchor& a, const Anchor& b) { return a.key < b.key; });
    return out;
  }
};

// Convenience wrapper matching the incremental-update contract.
inline void merge_incremental(AnchorStore& store, std::vector<Anchor> new_anchors, double gamma) {
  store.merge(std::move(new_anchors), gamma);
}

// --- Snapshot format "SLNA": version, latent width, gamma, count, then per
// anchor key (3 x i64) + f64 running sums, with an optional decoded block.
inline void save_store(const AnchorStore& store, const std::string& path) {
  std::ofstream out = open_output(path);
  write_magic(out, "SLNA");
  write_pod<uint32_t>(out, 1);
  uint32_t c = 0;
  if (!store.anchors.empty()) c = uint32_t(store.anchors.begin()->second.sum_sf.size());
  write_pod<uint32_t>(out, c);
  write_pod<double>(out, store.gamma);
  write_pod<uint64_t>(out, store.anchors.size());
  write_pod<uint64_t>(out, store.points_absorbed);
  for (const Anchor& a : store.sorted_anchors()) {
    write_pod<int64_t>(out, a.key.ix);
    write_pod<int64_t>(out, a.key.iy);
    write_pod<int64_t>(out, a.key.iz);
    write_pod<double>(out, a.sum_s);
    write_array(out, &a.sum_sx.x, 3);
    write_array(out, a.sum_sf.data(), a.sum_sf.size());
    write_pod<uint8_t>(out, a.decoded ? 1 : 0);
    if (a.decoded) {
      const DecodedAnchor& d = *a.decoded;
      write_array(out, &d.quat.w, 4);
      write_array(out, &d.log_scale.x, 3);
      write_pod<double>(out, d.opacity_logit);
      write_pod<double>(out, d.refined_saliency);
      write_pod<uint32_t>(out, uint32_t(d.sh.size()));
      for (const Vec3d& v : d.sh) write_array(out, &v.x, 3);
    }
  }
}

inline AnchorStore load_store(const std::string& path) {
  std::ifstream in = open_input(path);
  expect_magic(in, "SLNA", "anchor store");
  uint32_t version = read_pod<uint32_t>(in, "version");
  if (version != 1) throw Error(ErrorCode::ConfigMismatch, "unsupported store version");
  uint32_t c = read_pod<uint32_t>(in, "latent width");
  AnchorStore store;
  store.gamma = read_pod<double>(in, "gamma");
  uint64_t count = read_pod<uint64_t>(in, "count");
  store.points_absorbed = read_pod<uint64_t>(in, "points");
  for (uint64_t i = 0; i < count; ++i) {
    Anchor a;
    a.key.ix = read_pod<int64_t>(in, "key");
    a.key.iy = read_pod<int64_t>(in, "key");
    a.key.iz = read_pod<int64_t>(in, "key");
    a.sum_s = read_pod<double>(in, "sum_s");
    read_array(in, &a.sum_sx.x, 3, "sum_sx");
    a.sum_sf.resize(c);
    read_array(in, a.sum_sf.data(), c, "sum_sf");
    if (read_pod<uint8_t>(in, "decoded flag")) {
      DecodedAnchor d;
      read_array(in, &d.quat.w, 4, "quat");
      read_array(in, &d.log_scale.x, 3, "log_scale");
      d.opacity_logit = read_pod<double>(in, "opacity");
      d.refined_saliency = read_pod<double>(in, "saliency");
      uint32_t nsh = read_pod<uint32_t>(in, "sh count");
      d.sh.resize(nsh);
      for (Vec3d& v : d.sh) read_array(in, &v.x, 3, "sh");
      a.decoded = std::move(d);
    }
    store.anchors.emplace(a.key, std::move(a));
  }
  return store;
}

}  // namespace salon
