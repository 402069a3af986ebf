// Space-filling-curve serialization of anchors, patch partitioning for
// attention, and grid pooling between U-Net stages.
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <unordered_map>
#include <vector>

#include "salon/core.hpp"
#include "salon/matrix.hpp"

namespace salon {

enum class SFCurve { Morton, Hilbert };

inline constexpr int kCurveBitsDefault = 16;

namespace detail {
inline void check_curve_coords(uint32_t ix, uint32_t iy, uint32_t iz, int bits) {
  if (bits < 1 || bits > 21) throw Error(ErrorCode::OutOfRange, "curve bits must be in [1,21]");
  uint32_t lim = uint32_t(1) << bits;
  if (ix >= lim || iy >= lim || iz >= lim)
    throw Error(ErrorCode::OutOfRange, "curve coordinate exceeds 2^bits");
}

// Skilling's transpose <-> Hilbert conversions (3 dimensions).
inline void hilbert_axes_to_transpose(uint32_t* x, int bits) {
  uint32_t m = uint32_t(1) << (bits - 1), p, q, t;
  for (q = m; q > 1; q >>= 1) {
    p = q - 1;
    for (int i = 0; i < 3; ++i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
  for (int i = 1; i < 3; ++i) x[i] ^= x[i - 1];
  t = 0;
  for (q = m; q > 1; q >>= 1)
    if (x[2] & q) t ^= q - 1;
  for (int i = 0; i < 3; ++i) x[i] ^= t;
}

inline void hilbert_transpose_to_axes(uint32_t* x, int bits) {
  uint32_t n = uint32_t(2) << (bits - 1), p, q, t;
  t = x[2] >> 1;
  for (int i = 2; i > 0; --i) x[i] ^= x[i - 1];
  x[0] ^= t;
  for (q = 2; q != n; q <<= 1) {
    p = q - 1;
    for (int i = 2; i >= 0; --i) {
      if (x[i] & q) {
        x[0] ^= p;
      } else {
        t = (x[0] ^ x[i]) & p;
        x[0] ^= t;
        x[i] ^= t;
      }
    }
  }
}
}  // namespace detail

// Bit interleave with x least significant: bit k of x lands at code bit 3k,
// y at 3k+1, z at 3k+2.
inline uint64_t morton_encode(uint32_t ix, uint32_t iy, uint32_t iz, int bits = kCurveBitsDefault) {
  detail::check_curve_coords(ix, iy, iz, bits);
  uint64_t code = 0;
  for (int k = 0; k < bits; ++k) {
    code |= (uint64_t(ix >> k) & 1u) << (3 * k);
    code |= (uint64_t(iy >> k) & 1u) << (3 * k + 1);
    code |= (uint64_t(iz >> k) & 1u) << (3 * k + 2);
  }
  return code;
}

inline void morton_decode(uint64_t code, int bits, uint32_t& ix, uint32_t& iy, uint32_t& iz) {
  if (bits < 1 || bits > 21) throw Error(ErrorCode::OutOfRange, "curve bits must be in [1,21]");
  if (bits < 21 && (code >> (3 * bits)) != 0)
    throw Error(ErrorCode::OutOfRange, "morton code exceeds 2^(3 bits)");
  ix = iy = iz = 0;
  for (int k = 0; k < bits; ++k) {
    ix |= uint32_t((code >> (3 * k)) & 1u) << k;
    iy |= uint32_t((code >> (3 * k + 1)) & 1u) << k;
    iz |= uint32_t((code >> (3 * k + 2)) & 1u) << k;
  }
}

// 3-D Hilbert index via Gray-code axis transposition; consecutive codes map
// to face-adjacent cells.
inline uint64_t hilbert_encode(uint32_t ix, uint32_t iy, uint32_t iz, int bits = kCurveBitsDefault) {
  detail::check_curve_coords(ix, iy, iz, bits);
  uint32_t x[3] = {ix, iy, iz};
  detail::hilbert_axes_to_transpose(x, bits);
  // Interleave the transposed coordinates MSB-first, x[0] leading.
  uint64_t code = 0;
  for (int q = bits - 1; q >= 0; --q)
    for (int i = 0; i < 3; ++i) code = (code << 1) | ((x[i] >> q) & 1u);
  return code;
}

inline void hilbert_decode(uint64_t code, int bits, uint32_t& ix, uint32_t& iy, uint32_t& iz) {
  if (bits < 1 || bits > 21) throw Error(ErrorCode::OutOfRange, "curve bits must be in [1,21]");
  if (bits < 21 && (code >> (3 * bits)) != 0)
    throw Error(ErrorCode::OutOfRange, "hilbert code exceeds 2^(3 bits)");
  uint32_t x[3] = {0, 0, 0};
  for (int q = bits - 1; q >= 0; --q)
    for (int i = 0; i < 3; ++i) x[i] |= uint32_t((code >> (3 * q + (2 - i))) & 1u) << q;
  detail::hilbert_transpose_to_axes(x, bits);
  ix = x[0]; iy = x[1]; iz = x[2];
}

inline uint64_t curve_encode(SFCurve curve, uint32_t ix, uint32_t iy, uint32_t iz,
                             int bits = kCurveBitsDefault) {
  return curve == SFCurve::Morton ? morton_encode(ix, iy, iz, bits)
                                  : hilbert_encode(ix, iy, iz, bits);
}

// Permutation sorting anchors along a space-filling curve, plus the patch
// offsets filled in by patch_partition.
struct SerializedBatch {
  std::vector<uint32_t> perm;
  std::vector<uint32_t> patch_offsets;  // size = n_patches + 1, first 0, last N
  std::vector<uint64_t> codes;          // curve code per anchor (input order)
};

// Quantizes positions to a lattice (floor, shifted so min coord >= 0), encodes
// on the chosen curve and stable-sorts; same-cell ties keep input order.
// `axis_perm` rotates which spatial axis feeds each curve dimension.
inline SerializedBatch serialize_order(std::span<const Vec3d> positions, double grid,
                                       SFCurve curve, int bits = kCurveBitsDefault,
                                       int axis_perm = 0) {
  if (grid <= 0) throw Error(ErrorCode::InvalidArgument, "serialization grid must be positive");
  const size_t n = positions.size();
  SerializedBatch batch;
  batch.perm.resize(n);
  batch.codes.resize(n);
  std::iota(batch.perm.begin(), batch.perm.end(), 0u);
  if (n == 0) {
    batch.patch_offsets = {0};
    return batch;
  }

  std::vector<int64_t> cells(n * 3);
  int64_t lo[3] = {std::numeric_limits<int64_t>::max(), std::numeric_limits<int64_t>::max(),
                   std::numeric_limits<int64_t>::max()};
  int64_t hi[3] = {std::numeric_limits<int64_t>::min(), std::numeric_limits<int64_t>::min(),
                   std::numeric_limits<int64_t>::min()};
  for (size_t i = 0; i < n; ++i) {
    const Vec3d& p = positions[i];
    if (!p.finite()) throw Error(ErrorCode::NonFinite, "serialize_order: non-finite position");
    for (int a = 0; a < 3; ++a) {
      int64_t c = int64_t(std::floor(p[a] / grid));
      cells[i * 3 + a] = c;
      lo[a] = std::min(lo[a], c);
      hi[a] = std::max(hi[a], c);
    }
  }
  const int64_t lim = int64_t(1) << bits;
  for (int a = 0; a < 3; ++a)
    if (hi[a] - lo[a] >= lim)
      throw Error(ErrorCode::GridOverflow, "serialize_order: lattice extent exceeds 2^bits");

  axis_perm = ((axis_perm % 3) + 3) % 3;
  for (size_t i = 0; i < n; ++i) {
    uint32_t c[3];
    for (int a = 0; a < 3; ++a)
      c[a] = uint32_t(cells[i * 3 + (a + axis_perm) % 3] - lo[(a + axis_perm) % 3]);
    batch.codes[i] = curve_encode(curve, c[0], c[1], c[2], bits);
  }
  std::stable_sort(batch.perm.begin(), batch.perm.end(),
                   [&](uint32_t a, uint32_t b) { return batch.codes[a] < batch.codes[b]; });
  return batch;
}

// Splits the serialized order into contiguous chunks of at most patch_size;
// the last patch may be smaller. Patches are disjoint and cover all indices.
inline void patch_partition(SerializedBatch& batch, int patch_size) {
  if (patch_size < 1) throw Error(ErrorCode::InvalidArgument, "patch_size must be >= 1");
  const uint32_t n = uint32_t(batch.perm.size());
  batch.patch_offsets.clear();
  batch.patch_offsets.push_back(0);
  for (uint32_t off = 0; off < n; off += uint32_t(patch_size))
    batch.patch_offsets.push_back(std::min(n, off + uint32_t(patch_size)));
  if (n == 0) return;
}

struct GridPoolMap {
  std::vector<uint32_t> parent;     // fine index -> coarse index
  std::vector<Vec3d> coarse_pos;    // mean position per coarse cell
  std::vector<uint32_t> counts;     // children per coarse cell
};

namespace detail {
struct CellKey {
  int64_t x, y, z;
  bool operator==(const CellKey& o) const { return x == o.x && y == o.y && z == o.z; }
};
struct CellKeyHash {
  size_t operator()(const CellKey& k) const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](uint64_t v) {
      h ^= v;
      h *= 1099511628211ull;
    };
    mix(uint64_t(k.x)); mix(uint64_t(k.y)); mix(uint64_t(k.z));
    return size_t(h);
  }
};
}  // namespace detail

// Groups anchors by coarse voxel key and mean-reduces features; the parent map
// records each fine anchor's coarse cell. Coarse cells are ordered by
// lexicographic key so the pooled set is independent of input order.
template <typename T>
inline GridPoolMap grid_pool(std::span<const Vec3d> positions, const Matrix<T>& features,
                             double pool_grid, Matrix<T>& pooled) {
  if (pool_grid <= 0) throw Error(ErrorCode::InvalidArgument, "pool grid must be positive");
  const size_t n = positions.size();
  GridPoolMap map;
  map.parent.resize(n);

  std::vector<detail::CellKey> keys(n);
  for (size_t i = 0; i < n; ++i)
    keys[i] = {int64_t(std::floor(positions[i].x / pool_grid)),
               int64_t(std::floor(positions[i].y / pool_grid)),
               int64_t(std::floor(positions[i].z / pool_grid))};

  std::vector<uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    const auto& ka = keys[a];
    const auto& kb = keys[b];
    if (ka.x != kb.x) return ka.x < kb.x;
    if (ka.y != kb.y) return ka.y < kb.y;
    if (ka.z != kb.z) return ka.z < kb.z;
    return a < b;
  });

  uint32_t n_coarse = 0;
  for (size_t j = 0; j < n; ++j) {
    if (j > 0 && !(keys[order[j]] == keys[order[j - 1]])) ++n_coarse;
    map.parent[order[j]] = n_coarse;
  }
  if (n > 0) ++n_coarse;

  map.coarse_pos.assign(n_coarse, Vec3d{});
  map.counts.assign(n_coarse, 0);
  pooled = Matrix<T>(int(n_coarse), features.cols);
  for (size_t i = 0; i < n; ++i) {
    uint32_t c = map.parent[i];
    map.coarse_pos[c] += positions[i];
    ++map.counts[c];
    const T* src = features.row(int(i));
    T* dst = pooled.row(int(c));
    for (int k = 0; k < features.cols; ++k) dst[k] += src[k];
  }
  for (uint32_t c = 0; c < n_coarse; ++c) {
    double inv = 1.0 / double(map.counts[c]);
    map.coarse_pos[c] *= inv;
    T* dst = pooled.row(int(c));
    for (int k = 0; k < pooled.cols; ++k) dst[k] *= T(inv);
  }
  return map;
}

// Broadcasts coarse features back to fine anchors through the parent map.
template <typename T>
inline void grid_unpool(const Matrix<T>& pooled, const GridPoolMap& map, Matrix<T>& fine) {
  fine = Matrix<T>(int(map.parent.size()), pooled.cols);
  for (size_t i = 0; i < map.parent.size(); ++i) {
    const T* src = pooled.row(int(map.parent[i]));
    T* dst = fine.row(int(i));
    for (int k = 0; k < pooled.cols; ++k) dst[k] = src[k];
  }
}

}  // namespace salon
