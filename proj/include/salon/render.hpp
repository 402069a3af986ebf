// CPU tile-based forward and backward Gaussian-splatting rasterizer producing
// RGB, alpha-blended depth, and accumulated alpha. Templated on the scalar so
// finite-difference suites can run the whole path in f64.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "salon/core.hpp"
#include "salon/io.hpp"
#include "salon/threading.hpp"

namespace salon {

template <typename T>
struct RenderTarget {
  Image<T> rgb;
  Image<T> depth;
  Image<T> alpha;
};

struct RenderOptions {
  int tile_size = 16;
  double z_near = 0.01;
  double blur = 0.3;                // screen-space covariance regularizer (px^2)
  double alpha_clamp = 0.99;        // per-sample alpha ceiling
  double transmittance_min = 1e-4;  // early stop
  double contrib_min = 1e-8;        // per-sample inclusion threshold
};

// Structure-of-arrays splat set with activated opacity; the differentiable
// training path works on this form directly.
template <typename T>
struct SplatBatch {
  std::vector<Vec3<T>> mu;
  std::vector<std::array<T, 4>> quat;
  std::vector<Vec3<T>> log_scale;
  std::vector<T> alpha;
  int sh_coeffs = 4;
  std::vector<Vec3<T>> sh;  // size() * sh_coeffs, coefficient-major per splat

  size_t size() const { return mu.size(); }
  std::span<const Vec3<T>> sh_of(size_t i) const {
    return {sh.data() + i * size_t(sh_coeffs), size_t(sh_coeffs)};
  }
  int sh_degree() const {
    int deg = 0;
    while ((deg + 1) * (deg + 1) < sh_coeffs) ++deg;
    return deg;
  }
};

template <typename T>
struct SplatGrads {
  std::vector<Vec3<T>> mu;
  std::vector<std::array<T, 4>> quat;
  std::vector<Vec3<T>> log_scale;
  std::vector<T> alpha;
  std::vector<Vec3<T>> sh;

  void resize_like(const SplatBatch<T>& batch) {
    mu.assign(batch.size(), Vec3<T>{});
    quat.assign(batch.size(), {T(0), T(0), T(0), T(0)});
    log_scale.assign(batch.size(), Vec3<T>{});
    alpha.assign(batch.size(), T(0));
    sh.assign(batch.sh.size(), Vec3<T>{});
  }
  void add(const SplatGrads& o) {
    for (size_t i = 0; i < mu.size(); ++i) {
      mu[i] += o.mu[i];
      for (int k = 0; k < 4; ++k) quat[i][k] += o.quat[i][k];
      log_scale[i] += o.log_scale[i];
      alpha[i] += o.alpha[i];
    }
    for (size_t i = 0; i < sh.size(); ++i) sh[i] += o.sh[i];
  }
};

inline SplatBatch<double> to_batch(std::span<const Gaussian3D> gaussians) {
  SplatBatch<double> b;
  b.sh_coeffs = gaussians.empty() ? 4 : int(gaussians[0].sh.size());
  for (const Gaussian3D& g : gaussians) {
    if (int(g.sh.size()) != b.sh_coeffs)
      throw Error(ErrorCode::ShapeMismatch, "gaussians disagree on sh coefficient count");
    b.mu.push_back(g.mu);
    b.quat.push_back({g.quat.w, g.quat.x, g.quat.y, g.quat.z});
    b.log_scale.push_back(g.log_scale);
    b.alpha.push_back(g.opacity());
    for (const Vec3d& c : g.sh) b.sh.push_back(c);
  }
  return b;
}

namespace render_detail {

// d(basis)/d(dir) for degrees 0..3; each output holds (degree+1)^2 entries.
template <typename T>
inline void basis_grad(const Vec3<T>& d, int degree, T* gx, T* gy, T* gz) {
  int n = (degree + 1) * (degree + 1);
  for (int i = 0; i < n; ++i) gx[i] = gy[i] = gz[i] = T(0);
  if (degree < 1) return;
  const T x = d.x, y = d.y, z = d.z;
  gy[1] = T(-sh::kC1);
  gz[2] = T(sh::kC1);
  gx[3] = T(-sh::kC1);
  if (degree < 2) return;
  gx[4] = T(sh::kC2[0]) * y; gy[4] = T(sh::kC2[0]) * x;
  gy[5] = T(sh::kC2[1]) * z; gz[5] = T(sh::kC2[1]) * y;
  gx[6] = T(sh::kC2[2]) * (-2 * x);
  gy[6] = T(sh::kC2[2]) * (-2 * y);
  gz[6] = T(sh::kC2[2]) * (4 * z);
  gx[7] = T(sh::kC2[3]) * z; gz[7] = T(sh::kC2[3]) * x;
  gx[8] = T(sh::kC2[4]) * (2 * x); gy[8] = T(sh::kC2[4]) * (-2 * y);
  if (degree < 3) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  gx[9] = T(sh::kC3[0]) * 6 * x * y;
  gy[9] = T(sh::kC3[0]) * (3 * xx - 3 * yy);
  gx[10] = T(sh::kC3[1]) * y * z;
  gy[10] = T(sh::kC3[1]) * x * z;
  gz[10] = T(sh::kC3[1]) * x * y;
  gx[11] = T(sh::kC3[2]) * (-2 * x * y);
  gy[11] = T(sh::kC3[2]) * (4 * zz - xx - 3 * yy);
  gz[11] = T(sh::kC3[2]) * (8 * y * z);
  gx[12] = T(sh::kC3[3]) * (-6 * x * z);
  gy[12] = T(sh::kC3[3]) * (-6 * y * z);
  gz[12] = T(sh::kC3[3]) * (6 * zz - 3 * xx - 3 * yy);
  gx[13] = T(sh::kC3[4]) * (4 * zz - 3 * xx - yy);
  gy[13] = T(sh::kC3[4]) * (-2 * x * y);
  gz[13] = T(sh::kC3[4]) * (8 * x * z);
  gx[14] = T(sh::kC3[5]) * (2 * x * z);
  gy[14] = T(sh::kC3[5]) * (-2 * y * z);
  gz[14] = T(sh::kC3[5]) * (xx - yy);
  gx[15] = T(sh::kC3[6]) * (3 * xx - 3 * yy);
  gy[15] = T(sh::kC3[6]) * (-6 * x * y);
}

template <typename T>
struct ProjectedSplat {
  bool visible = false;
  Vec3<T> p_cam;
  T mean2[2] = {0, 0};
  T conic[3] = {0, 0, 0};  // inverse screen covariance (a00, a01, a11)
  T opacity = 0;
  T z = 0;
  Vec3<T> color;  // post-clamp
  bool clamped[3] = {false, false, false};
  Vec3<T> dir;    // unit view direction used for sh_eval
  T dir_len = 1;
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // pixel rect, half-open
};

// EWA projection: Sigma2 = J W Sigma W^T J^T + blur*I with J the pinhole
// Jacobian at the splat center.
template <typename T>
inline std::vector<ProjectedSplat<T>> project_splats(const SplatBatch<T>& batch,
                                                     const Camera& cam,
                                                     const RenderOptions& opt) {
  const size_t n = batch.size();
  std::vector<ProjectedSplat<T>> out(n);
  const Mat3<T> w_rot = cam.pose.rotation.cast<T>();
  const Vec3<T> w_tr = cam.pose.translation.cast<T>();
  const Vec3<T> cam_center = cam.center_world().cast<T>();
  const T fx = T(cam.fx), fy = T(cam.fy), cx = T(cam.cx), cy = T(cam.cy);
  const int degree = batch.sh_degree();

  parallel_for(n, [&](size_t i) {
    ProjectedSplat<T>& p = out[i];
    Vec3<T> t = w_rot * batch.mu[i] + w_tr;
    if (!(t.z > T(opt.z_near))) return;
    if (!(batch.alpha[i] > T(opt.contrib_min))) return;

    p.p_cam = t;
    p.z = t.z;
    p.opacity = batch.alpha[i];
    p.mean2[0] = fx * t.x / t.z + cx;
    p.mean2[1] = fy * t.y / t.z + cy;

    const auto& q = batch.quat[i];
    T qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (!(qn > T(0))) return;
    Quat<T> qu{q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn};
    Mat3<T> cov3 = build_covariance(qu, batch.log_scale[i]);

    const T iz = T(1) / t.z, iz2 = iz * iz;
    const T j00 = fx * iz, j02 = -fx * t.x * iz2;
    const T j11 = fy * iz, j12 = -fy * t.y * iz2;
    T t2[2][3];
    for (int c = 0; c < 3; ++c) {
      t2[0][c] = j00 * w_rot(0, c) + j02 * w_rot(2, c);
      t2[1][c] = j11 * w_rot(1, c) + j12 * w_rot(2, c);
    }
    T tc[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        tc[r][c] = t2[r][0] * cov3(0, c) + t2[r][1] * cov3(1, c) + t2[r][2] * cov3(2, c);
    T s00 = tc[0][0] * t2[0][0] + tc[0][1] * t2[0][1] + tc[0][2] * t2[0][2] + T(opt.blur);
    T s01 = tc[0][0] * t2[1][0] + tc[0][1] * t2[1][1] + tc[0][2] * t2[1][2];
    T s11 = tc[1][0] * t2[1][0] + tc[1][1] * t2[1][1] + tc[1][2] * t2[1][2] + T(opt.blur);

    T det = s00 * s11 - s01 * s01;
    if (!(det > T(0))) return;
    p.conic[0] = s11 / det;
    p.conic[1] = -s01 / det;
    p.conic[2] = s00 / det;

    // Footprint cut where opacity * gaussian falls to contrib_min.
    T lam_max = T(0.5) * (s00 + s11 + std::sqrt((s00 - s11) * (s00 - s11) + 4 * s01 * s01));
    T log_ratio = std::log(batch.alpha[i] / T(opt.contrib_min));
    T radius = std::sqrt(2 * log_ratio * lam_max);
    p.x0 = std::max(0, int(std::floor(p.mean2[0] - radius)));
    p.x1 = std::min(cam.width, int(std::ceil(p.mean2[0] + radius)) + 1);
    p.y0 = std::max(0, int(std::floor(p.mean2[1] - radius)));
    p.y1 = std::min(cam.height, int(std::ceil(p.mean2[1] + radius)) + 1);
    if (p.x0 >= p.x1 || p.y0 >= p.y1) return;

    Vec3<T> rel = batch.mu[i] - cam_center;
    p.dir_len = rel.norm();
    p.dir = p.dir_len > T(0) ? rel / p.dir_len : Vec3<T>{T(0), T(0), T(1)};
    T basis[16];
    sh::basis(p.dir, degree, basis);
    Vec3<T> rgb{T(0.5), T(0.5), T(0.5)};
    auto coeffs = batch.sh_of(i);
    for (int k = 0; k < batch.sh_coeffs; ++k) rgb += coeffs[k] * basis[k];
    for (int c = 0; c < 3; ++c) {
      p.clamped[c] = rgb[c] < T(0);
      p.color[c] = std::max(rgb[c], T(0));
    }
    p.visible = true;
  });
  return out;
}

// Depth-sorted visible indices; ties break on splat index so the result is
// invariant to input order whenever depths are distinct.
template <typename T>
inline std::vector<uint32_t> depth_order(const std::vector<ProjectedSplat<T>>& proj) {
  std::vector<uint32_t> order;
  order.reserve(proj.size());
  for (uint32_t i = 0; i < proj.size(); ++i)
    if (proj[i].visible) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (proj[a].z != proj[b].z) return proj[a].z < proj[b].z;
    return a < b;
  });
  return order;
}

struct TileGrid {
  int tiles_x = 0, tiles_y = 0, tile = 16;
  std::vector<std::vector<uint32_t>> splats;  // per tile, in global depth order
};

template <typename T>
inline TileGrid build_tiles(const std::vector<ProjectedSplat<T>>& proj,
                            const std::vector<uint32_t>& order, int width, int height,
                            int tile_size) {
  TileGrid grid;
  grid.tile = tile_size;
  grid.tiles_x = (width + tile_size - 1) / tile_size;
  grid.tiles_y = (height + tile_size - 1) / tile_size;
  grid.splats.resize(size_t(grid.tiles_x) * grid.tiles_y);
  for (uint32_t idx : order) {
    const auto& p = proj[idx];
    int tx0 = p.x0 / tile_size, tx1 = (p.x1 - 1) / tile_size;
    int ty0 = p.y0 / tile_size, ty1 = (p.y1 - 1) / tile_size;
    for (int ty = ty0; ty <= ty1; ++ty)
      for (int tx = tx0; tx <= tx1; ++tx)
        grid.splats[size_t(ty) * grid.tiles_x + tx].push_back(idx);
  }
  return grid;
}

template <typename T>
struct PixelContrib {
  uint32_t idx;
  T a, g, dx, dy;
};

}  // namespace render_detail

// Forward rasterization. Per pixel, front-to-back alpha blending over
// depth-sorted splats: w_j = a_j * prod_{l<j}(1 - a_l) with
// a_j = min(alpha_clamp, opacity_j * g_j); early-stop when the transmittance
// drops below transmittance_min.
template <typename T>
inline RenderTarget<T> rasterize_batch(const SplatBatch<T>& batch, const Camera& cam,
                                       const RenderOptions& opt = {}) {
  using namespace render_detail;
  RenderTarget<T> target;
  target.rgb = Image<T>(cam.width, cam.height, 3);
  target.depth = Image<T>(cam.width, cam.height, 1);
  target.alpha = Image<T>(cam.width, cam.height, 1);

  auto proj = project_splats(batch, cam, opt);
  auto order = depth_order(proj);
  TileGrid grid = build_tiles(proj, order, cam.width, cam.height, opt.tile_size);

  parallel_for(grid.splats.size(), [&](size_t tile_idx) {
    const auto& list = grid.splats[tile_idx];
    int tx = int(tile_idx) % grid.tiles_x, ty = int(tile_idx) / grid.tiles_x;
    int px0 = tx * grid.tile, px1 = std::min(cam.width, px0 + grid.tile);
    int py0 = ty * grid.tile, py1 = std::min(cam.height, py0 + grid.tile);
    for (int py = py0; py < py1; ++py)
      for (int px = px0; px < px1; ++px) {
        T trans = T(1);
        Vec3<T> rgb{};
        T depth = 0, acc = 0;
        for (uint32_t idx : list) {
          const auto& p = proj[idx];
          if (px < p.x0 || px >= p.x1 || py < p.y0 || py >= p.y1) continue;
          T dx = T(px) - p.mean2[0];
          T dy = T(py) - p.mean2[1];
          T maha = p.conic[0] * dx * dx + 2 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
          T a = p.opacity * std::exp(T(-0.5) * maha);
          if (a > T(opt.alpha_clamp)) a = T(opt.alpha_clamp);
          if (a < T(opt.contrib_min)) continue;
          T w = a * trans;
          rgb += p.color * w;
          depth += p.z * w;
          acc += w;
          trans *= (T(1) - a);
          if (trans < T(opt.transmittance_min)) break;
        }
        target.rgb.at(px, py)[0] = rgb.x;
        target.rgb.at(px, py)[1] = rgb.y;
        target.rgb.at(px, py)[2] = rgb.z;
        target.depth.at(px, py)[0] = depth;
        target.alpha.at(px, py)[0] = acc;
      }
  });
  return target;
}

// Exact reverse of the forward blending recurrence. Per pixel the forward
// contributor list is re-derived, then swept back-to-front reconstructing the
// transmittance; projection, covariance, and sh chains follow analytically.
// Gradients land in activated-opacity space.
template <typename T>
inline void rasterize_batch_backward(const SplatBatch<T>& batch, const Camera& cam,
                                     const Image<T>& grad_rgb, const Image<T>& grad_depth,
                                     const Image<T>& grad_alpha, SplatGrads<T>& grads,
                                     const RenderOptions& opt = {}) {
  using namespace render_detail;
  if (grad_rgb.width != cam.width || grad_rgb.height != cam.height || grad_rgb.channels != 3)
    throw Error(ErrorCode::ShapeMismatch, "grad_rgb shape mismatch");
  grads.resize_like(batch);

  auto proj = project_splats(batch, cam, opt);
  auto order = depth_order(proj);
  TileGrid grid = build_tiles(proj, order, cam.width, cam.height, opt.tile_size);

  const size_t n = batch.size();
  struct ScreenGrad {
    T mean2[2] = {0, 0};
    T conic[3] = {0, 0, 0};
    Vec3<T> color{};
    T z = 0;
    T opacity = 0;
  };

  int workers = std::min<size_t>(thread_count(), grid.splats.size() ? grid.splats.size() : 1);
  std::vector<std::vector<ScreenGrad>> partial(workers);

  parallel_blocks(grid.splats.size(), [&](int worker, size_t begin, size_t end) {
    auto& sg = partial[worker];
    sg.assign(n, ScreenGrad{});
    std::vector<PixelContrib<T>> contribs;
    for (size_t tile_idx = begin; tile_idx < end; ++tile_idx) {
      const auto& list = grid.splats[tile_idx];
      if (list.empty()) continue;
      int tx = int(tile_idx) % grid.tiles_x, ty = int(tile_idx) / grid.tiles_x;
      int px0 = tx * grid.tile, px1 = std::min(cam.width, px0 + grid.tile);
      int py0 = ty * grid.tile, py1 = std::min(cam.height, py0 + grid.tile);
      for (int py = py0; py < py1; ++py)
        for (int px = px0; px < px1; ++px) {
          // Re-run the forward walk for this pixel.
          contribs.clear();
          T trans = T(1);
          for (uint32_t idx : list) {
            const auto& p = proj[idx];
            if (px < p.x0 || px >= p.x1 || py < p.y0 || py >= p.y1) continue;
            T dx = T(px) - p.mean2[0];
            T dy = T(py) - p.mean2[1];
            T maha = p.conic[0] * dx * dx + 2 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
            T g = std::exp(T(-0.5) * maha);
            T a = p.opacity * g;
            if (a > T(opt.alpha_clamp)) a = T(opt.alpha_clamp);
            if (a < T(opt.contrib_min)) continue;
            contribs.push_back({idx, a, g, dx, dy});
            trans *= (T(1) - a);
            if (trans < T(opt.transmittance_min)) break;
          }
          if (contribs.empty()) continue;

          const T* gr = grad_rgb.at(px, py);
          Vec3<T> grgb{gr[0], gr[1], gr[2]};
          T gdepth = grad_depth.data.empty() ? T(0) : grad_depth.at(px, py)[0];
          T galpha = grad_alpha.data.empty() ? T(0) : grad_alpha.at(px, py)[0];

          // Back-to-front: r_j = dL/dw_j; suffix accumulates sum_{l>j} w_l r_l.
          T t_cur = trans;
          T suffix = 0;
          for (size_t k = contribs.size(); k-- > 0;) {
            const auto& cb = contribs[k];
            const auto& p = proj[cb.idx];
            t_cur = t_cur / (T(1) - cb.a);  // transmittance before this splat
            T w = cb.a * t_cur;
            T r = grgb.dot(p.color) + gdepth * p.z + galpha;
            T da = t_cur * r - suffix / (T(1) - cb.a);
            suffix += w * r;

            ScreenGrad& s = sg[cb.idx];
            s.color += grgb * w;
            s.z += gdepth * w;
            if (cb.a < T(opt.alpha_clamp)) {  // clamp kills the local slope
              s.opacity += da * cb.g;
              T dg = da * p.opacity;
              T dmaha = dg * (T(-0.5) * cb.g);
              // maha = c0 dx^2 + 2 c1 dx dy + c2 dy^2, d = pixel - mean2.
              T ddx = dmaha * (2 * p.conic[0] * cb.dx + 2 * p.conic[1] * cb.dy);
              T ddy = dmaha * (2 * p.conic[1] * cb.dx + 2 * p.conic[2] * cb.dy);
              s.mean2[0] -= ddx;
              s.mean2[1] -= ddy;
              s.conic[0] += dmaha * cb.dx * cb.dx;
              s.conic[1] += dmaha * (2 * cb.dx * cb.dy);
              s.conic[2] += dmaha * cb.dy * cb.dy;
            }
          }
        }
    }
  });

  // Merge per-worker contributions in worker order (deterministic for a
  // fixed thread count), then chain through the projection per splat.
  std::vector<ScreenGrad> screen(n);
  for (int w = 0; w < workers; ++w) {
    if (partial[w].empty()) continue;
    for (size_t i = 0; i < n; ++i) {
      ScreenGrad& d = screen[i];
      const ScreenGrad& s = partial[w][i];
      d.mean2[0] += s.mean2[0];
      d.mean2[1] += s.mean2[1];
      for (int k = 0; k < 3; ++k) d.conic[k] += s.conic[k];
      d.color += s.color;
      d.z += s.z;
      d.opacity += s.opacity;
    }
  }

  const Mat3<T> w_rot = cam.pose.rotation.cast<T>();
  const Vec3<T> cam_center = cam.center_world().cast<T>();
  const T fx = T(cam.fx), fy = T(cam.fy);
  const int degree = batch.sh_degree();

  parallel_for(n, [&](size_t i) {
    const auto& p = proj[i];
    if (!p.visible) return;
    const ScreenGrad& s = screen[i];

    grads.alpha[i] += s.opacity;

    // --- color chain: sh coefficients and view direction.
    T basis[16], gbx[16], gby[16], gbz[16];
    sh::basis(p.dir, degree, basis);
    basis_grad(p.dir, degree, gbx, gby, gbz);
    Vec3<T> dcolor = s.color;
    for (int c = 0; c < 3; ++c)
      if (p.clamped[c]) dcolor[c] = T(0);
    Vec3<T> ddir{};
    auto coeffs = batch.sh_of(i);
    for (int k = 0; k < batch.sh_coeffs; ++k) {
      grads.sh[i * size_t(batch.sh_coeffs) + k] += dcolor * basis[k];
      T cdot = dcolor.dot(coeffs[k]);
      ddir.x += cdot * gbx[k];
      ddir.y += cdot * gby[k];
      ddir.z += cdot * gbz[k];
    }
    // dir = rel/|rel|; project onto the tangent space.
    if (p.dir_len > T(0)) {
      Vec3<T> dmu_dir = (ddir - p.dir * p.dir.dot(ddir)) / p.dir_len;
      grads.mu[i] += dmu_dir;
    }

    // --- screen mean and depth chain to the camera point.
    Vec3<T> dp_cam{};
    const T iz = T(1) / p.z, iz2 = iz * iz;
    dp_cam.x += s.mean2[0] * fx * iz;
    dp_cam.z -= s.mean2[0] * fx * p.p_cam.x * iz2;
    dp_cam.y += s.mean2[1] * fy * iz;
    dp_cam.z -= s.mean2[1] * fy * p.p_cam.y * iz2;
    dp_cam.z += s.z;

    // --- conic -> Sigma2 -> (J, Sigma3) chain.
    // Matrix-form gradient of the conic (off-diagonals carry half each).
    T ga[2][2] = {{s.conic[0], s.conic[1] / 2}, {s.conic[1] / 2, s.conic[2]}};
    T a00 = p.conic[0], a01 = p.conic[1], a11 = p.conic[2];
    // dSigma2 = -A * Ga * A (A symmetric).
    T ag[2][2] = {{a00 * ga[0][0] + a01 * ga[1][0], a00 * ga[0][1] + a01 * ga[1][1]},
                  {a01 * ga[0][0] + a11 * ga[1][0], a01 * ga[0][1] + a11 * ga[1][1]}};
    T gs[2][2];
    gs[0][0] = -(ag[0][0] * a00 + ag[0][1] * a01);
    gs[0][1] = -(ag[0][0] * a01 + ag[0][1] * a11);
    gs[1][0] = -(ag[1][0] * a00 + ag[1][1] * a01);
    gs[1][1] = -(ag[1][0] * a01 + ag[1][1] * a11);

    // Recompute the projection intermediates used by the chain.
    const auto& q = batch.quat[i];
    T qn = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    Quat<T> qu{q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn};
    Mat3<T> rot3 = qu.to_rotation();
    Vec3<T> scale{std::exp(batch.log_scale[i].x), std::exp(batch.log_scale[i].y),
                  std::exp(batch.log_scale[i].z)};
    Mat3<T> m = rot3 * Mat3<T>::diag(scale);
    Mat3<T> cov3 = m * m.transposed();

    const T j00 = fx * iz, j02 = -fx * p.p_cam.x * iz2;
    const T j11 = fy * iz, j12 = -fy * p.p_cam.y * iz2;
    T t2[2][3];
    for (int c = 0; c < 3; ++c) {
      t2[0][c] = j00 * w_rot(0, c) + j02 * w_rot(2, c);
      t2[1][c] = j11 * w_rot(1, c) + j12 * w_rot(2, c);
    }

    // G_T2 = (Gs + Gs^T) T2 Sigma3 = 2 Gs T2 Sigma3 (Gs symmetric here).
    T t2s[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        t2s[r][c] = t2[r][0] * cov3(0, c) + t2[r][1] * cov3(1, c) + t2[r][2] * cov3(2, c);
    T gt2[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        gt2[r][c] = 2 * (gs[r][0] * t2s[0][c] + gs[r][1] * t2s[1][c]);

    // G_Sigma3 = T2^T Gs T2 (symmetric by construction).
    Mat3<T> gcov3;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        gcov3(r, c) = t2[0][r] * (gs[0][0] * t2[0][c] + gs[0][1] * t2[1][c]) +
                      t2[1][r] * (gs[1][0] * t2[0][c] + gs[1][1] * t2[1][c]);

    // G_J = G_T2 W^T; only the four nonzero J entries matter.
    T gj[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        gj[r][c] = gt2[r][0] * w_rot(c, 0) + gt2[r][1] * w_rot(c, 1) + gt2[r][2] * w_rot(c, 2);
    dp_cam.x += gj[0][2] * (-fx * iz2);
    dp_cam.y += gj[1][2] * (-fy * iz2);
    dp_cam.z += gj[0][0] * (-fx * iz2) + gj[0][2] * (2 * fx * p.p_cam.x * iz2 * iz) +
                gj[1][1] * (-fy * iz2) + gj[1][2] * (2 * fy * p.p_cam.y * iz2 * iz);

    grads.mu[i] += w_rot.transposed_mul(dp_cam);

    // --- Sigma3 = M M^T chain: G_M = (G + G^T) M = 2 G M.
    Mat3<T> gm = gcov3 * m;
    for (auto& v : gm.m) v *= 2;
    // M = R3 * diag(scale): G_R3 = G_M diag(scale); G_scale = diag(R3^T G_M).
    Mat3<T> grot3;
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) grot3(r, c) = gm(r, c) * scale[c];
    for (int c = 0; c < 3; ++c) {
      T gscale = rot3(0, c) * gm(0, c) + rot3(1, c) * gm(1, c) + rot3(2, c) * gm(2, c);
      grads.log_scale[i][c] += gscale * scale[c];  // d scale / d log_scale = scale
    }

    // --- rotation -> unit quaternion partials.
    const T qw = qu.w, qx = qu.x, qy = qu.y, qz = qu.z;
    auto contract = [&](const Mat3<T>& dr) {
      T acc = 0;
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) acc += grot3(r, c) * dr(r, c);
      return acc;
    };
    Mat3<T> drw, drx, dry, drz;
    drw.m = {0, -2 * qz, 2 * qy, 2 * qz, 0, -2 * qx, -2 * qy, 2 * qx, 0};
    drx.m = {0, 2 * qy, 2 * qz, 2 * qy, -4 * qx, -2 * qw, 2 * qz, 2 * qw, -4 * qx};
    dry.m = {-4 * qy, 2 * qx, 2 * qw, 2 * qx, 0, 2 * qz, -2 * qw, 2 * qz, -4 * qy};
    drz.m = {-4 * qz, -2 * qw, 2 * qx, 2 * qw, -4 * qz, 2 * qy, 2 * qx, 2 * qy, 0};
    T dq_unit[4] = {contract(drw), contract(drx), contract(dry), contract(drz)};
    // Through the normalization: dq = (I - q q^T)/|q| dq_unit.
    T dot = qw * dq_unit[0] + qx * dq_unit[1] + qy * dq_unit[2] + qz * dq_unit[3];
    T qvals[4] = {qw, qx, qy, qz};
    for (int k = 0; k < 4; ++k) grads.quat[i][k] += (dq_unit[k] - qvals[k] * dot) / qn;
  });
}

// --- Public wrappers on the Gaussian3D representation -----------------------

template <typename T = double>
inline RenderTarget<T> rasterize(std::span<const Gaussian3D> gaussians, const Camera& cam,
                                 const RenderOptions& opt = {}) {
  SplatBatch<double> batch = to_batch(gaussians);
  if constexpr (std::is_same_v<T, double>) {
    return rasterize_batch(batch, cam, opt);
  } else {
    SplatBatch<T> cast;
    cast.sh_coeffs = batch.sh_coeffs;
    for (size_t i = 0; i < batch.size(); ++i) {
      cast.mu.push_back(batch.mu[i].template cast<T>());
      cast.quat.push_back({T(batch.quat[i][0]), T(batch.quat[i][1]), T(batch.quat[i][2]),
                           T(batch.quat[i][3])});
      cast.log_scale.push_back(batch.log_scale[i].template cast<T>());
      cast.alpha.push_back(T(batch.alpha[i]));
    }
    for (const Vec3d& c : batch.sh) cast.sh.push_back(c.cast<T>());
    return rasterize_batch(cast, cam, opt);
  }
}

struct GaussianGrad {
  Vec3d mu;
  std::array<double, 4> quat{};
  Vec3d log_scale;
  double opacity_logit = 0;
  std::vector<Vec3d> sh;
};

// Gradients w.r.t. the stored parametrization (opacity in logit space).
inline std::vector<GaussianGrad> rasterize_backward(std::span<const Gaussian3D> gaussians,
                                                    const Camera& cam,
                                                    const Image<double>& grad_rgb,
                                                    const Image<double>& grad_depth,
                                                    const Image<double>& grad_alpha,
                                                    const RenderOptions& opt = {}) {
  SplatBatch<double> batch = to_batch(gaussians);
  SplatGrads<double> grads;
  rasterize_batch_backward(batch, cam, grad_rgb, grad_depth, grad_alpha, grads, opt);
  std::vector<GaussianGrad> out(gaussians.size());
  for (size_t i = 0; i < gaussians.size(); ++i) {
    out[i].mu = grads.mu[i];
    out[i].quat = grads.quat[i];
    out[i].log_scale = grads.log_scale[i];
    double a = batch.alpha[i];
    out[i].opacity_logit = grads.alpha[i] * a * (1.0 - a);
    out[i].sh.assign(grads.sh.begin() + i * batch.sh_coeffs,
                     grads.sh.begin() + (i + 1) * batch.sh_coeffs);
  }
  return out;
}

template <typename T>
struct DepthMap {
  Image<T> depth;
  Image<uint8_t> valid;  // alpha >= 0.5
};

template <typename T = double>
inline DepthMap<T> render_depth_map(std::span<const Gaussian3D> gaussians, const Camera& cam,
                                    const RenderOptions& opt = {}) {
  RenderTarget<T> target = rasterize<T>(gaussians, cam, opt);
  DepthMap<T> out;
  out.depth = std::move(target.depth);
  out.valid = Image<uint8_t>(cam.width, cam.height, 1);
  for (size_t i = 0; i < out.valid.data.size(); ++i)
    out.valid.data[i] = target.alpha.data[i] >= T(0.5) ? 1 : 0;
  return out;
}

// --- Image output ------------------------------------------------------------

template <typename T>
inline void write_ppm(const Image<T>& rgb, const std::string& path) {
  if (rgb.channels != 3) throw Error(ErrorCode::ShapeMismatch, "ppm wants 3 channels");
  std::ofstream out = open_output(path);
  out << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
  std::vector<uint8_t> row(size_t(rgb.width) * 3);
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(double(rgb.at(x, y)[c]), 0.0, 1.0);
        row[size_t(x) * 3 + c] = uint8_t(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
}

inline Image<double> read_ppm(const std::string& path) {
  std::ifstream in = open_input(path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw Error(ErrorCode::MalformedFile, "not a P6 ppm: " + path);
  int w, h, maxval;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw Error(ErrorCode::MalformedFile, "bad ppm header: " + path);
  in.get();  // single whitespace after header
  Image<double> img(w, h, 3);
  std::vector<uint8_t> buf(size_t(w) * h * 3);
  in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
  if (!in) throw Error(ErrorCode::MalformedFile, "truncated ppm: " + path);
  for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0;
  return img;
}

// Raw f32 depth with a small header: magic "SLND", u32 H, u32 W.
template <typename T>
inline void write_depth_raw(const Image<T>& depth, const std::string& path) {
  if (depth.channels != 1) throw Error(ErrorCode::ShapeMismatch, "depth wants 1 channel");
  std::ofstream out = open_output(path);
  write_magic(out, "SLND");
  write_pod<uint32_t>(out, uint32_t(depth.height));
  write_pod<uint32_t>(out, uint32_t(depth.width));
  for (T v : depth.data) write_pod<float>(out, float(v));
}

inline Image<double> read_depth_raw(const std::string& path) {
  std::ifstream in = open_input(path);
  expect_magic(in, "SLND", "depth");
  uint32_t h = read_pod<uint32_t>(in, "H");
  uint32_t w = read_pod<uint32_t>(in, "W");
  if (w == 0 || h == 0 || w > 1u << 16 || h > 1u << 16)
    throw Error(ErrorCode::MalformedFile, "depth dimensions out of range");
  Image<double> img(int(w), int(h), 1);
  for (auto& v : img.data) v = read_pod<float>(in, "depth payload");
  return img;
}

}  // namespace salon
