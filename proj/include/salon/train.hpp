// Training objective, optimizer, desk-scale training loop, and the image and
// depth metrics shared with evaluation.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include "salon/core.hpp"
#include "salon/pipeline.hpp"
#include "salon/refiner.hpp"
#include "salon/render.hpp"

namespace salon {

struct LossWeights {
  double l1 = 1.0;
  double perceptual = 0.05;
  double smooth = 0.0005;
};

struct TrainConfig {
  int iterations = 2000;
  double lr = 1e-5;  // linear warmup then cosine decay
  int warmup = 100;
  int views_per_sequence = 8;
  int context_min = 2;
  int context_max = 6;
  uint64_t seed = 0;
  double beta = 0.5;   // inference-time pruning; training renders everything
  double gamma = 0.01;
  LossWeights weights;
};

// --- L1 ----------------------------------------------------------------------

template <typename T>
inline T loss_l1(const Image<T>& render, const Image<T>& target, Image<T>* grad = nullptr) {
  if (!render.same_shape(target)) throw Error(ErrorCode::ShapeMismatch, "l1: shape mismatch");
  if (grad) *grad = Image<T>(render.width, render.height, render.channels);
  const T inv_n = T(1) / T(render.data.size());
  T sum = 0;
  for (size_t i = 0; i < render.data.size(); ++i) {
    T d = render.data[i] - target.data[i];
    sum += std::abs(d);
    if (grad) grad->data[i] = (d > T(0) ? inv_n : (d < T(0) ? -inv_n : T(0)));
  }
  return sum * inv_n;
}

// --- SSIM and the perceptual proxy --------------------------------------------

namespace ssim_detail {

inline constexpr int kRadius = 5;  // 11x11 gaussian window, sigma 1.5

template <typename T>
inline std::array<T, 11> window() {
  std::array<T, 11> w{};
  T sum = 0;
  for (int k = 0; k < 11; ++k) {
    T d = T(k - kRadius);
    w[k] = std::exp(-d * d / T(2 * 1.5 * 1.5));
    sum += w[k];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable valid-mode blur; only pixels at distance >= kRadius from the
// border carry meaningful values.
template <typename T>
inline Image<T> blur(const Image<T>& in) {
  const auto w = window<T>();
  Image<T> tmp(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = kRadius; x < in.width - kRadius; ++x)
      for (int c = 0; c < in.channels; ++c) {
        T acc = 0;
        for (int k = -kRadius; k <= kRadius; ++k) acc += w[k + kRadius] * in.at(x + k, y)[c];
        tmp.at(x, y)[c] = acc;
      }
  Image<T> out(in.width, in.height, in.channels);
  for (int y = kRadius; y < in.height - kRadius; ++y)
    for (int x = kRadius; x < in.width - kRadius; ++x)
      for (int c = 0; c < in.channels; ++c) {
        T acc = 0;
        for (int k = -kRadius; k <= kRadius; ++k) acc += w[k + kRadius] * tmp.at(x, y + k)[c];
        out.at(x, y)[c] = acc;
      }
  return out;
}

// Adjoint of blur: scatters valid-region cotangents back through both passes.
template <typename T>
inline Image<T> blur_adjoint(const Image<T>& g) {
  const auto w = window<T>();
  Image<T> tmp(g.width, g.height, g.channels);
  for (int y = kRadius; y < g.height - kRadius; ++y)
    for (int x = kRadius; x < g.width - kRadius; ++x)
      for (int c = 0; c < g.channels; ++c) {
        T v = g.at(x, y)[c];
        if (v == T(0)) continue;
        for (int k = -kRadius; k <= kRadius; ++k) tmp.at(x, y + k)[c] += w[k + kRadius] * v;
      }
  Image<T> out(g.width, g.height, g.channels);
  for (int y = 0; y < g.height; ++y)
    for (int x = kRadius; x < g.width - kRadius; ++x)
      for (int c = 0; c < g.channels; ++c) {
        T v = tmp.at(x, y)[c];
        if (v == T(0)) continue;
        for (int k = -kRadius; k <= kRadius; ++k) out.at(x + k, y)[c] += w[k + kRadius] * v;
      }
  return out;
}

inline constexpr double kC1 = 0.01 * 0.01;  // (k1 L)^2 with L = 1
inline constexpr double kC2 = 0.03 * 0.03;

}  // namespace ssim_detail

// Mean SSIM over the valid window region (Wang et al. constants, 11x11
// gaussian window). With `grad_x` set, also computes d(mean ssim)/dx.
template <typename T>
inline T ssim(const Image<T>& x, const Image<T>& y, Image<T>* grad_x = nullptr) {
  using namespace ssim_detail;
  if (!x.same_shape(y)) throw Error(ErrorCode::ShapeMismatch, "ssim: shape mismatch");
  if (x.width < 11 || x.height < 11)
    throw Error(ErrorCode::ShapeMismatch, "ssim: image smaller than the 11x11 window");

  Image<T> xx(x.width, x.height, x.channels), yy = xx, xy = xx;
  for (size_t i = 0; i < x.data.size(); ++i) {
    xx.data[i] = x.data[i] * x.data[i];
    yy.data[i] = y.data[i] * y.data[i];
    xy.data[i] = x.data[i] * y.data[i];
  }
  Image<T> mx = blur(x), my = blur(y), mxx = blur(xx), myy = blur(yy), mxy = blur(xy);

  const int x0 = kRadius, x1 = x.width - kRadius;
  const int y0 = kRadius, y1 = x.height - kRadius;
  const size_t n_valid = size_t(x1 - x0) * size_t(y1 - y0) * x.channels;

  Image<T> g_mx, g_mxx, g_mxy;
  if (grad_x) {
    g_mx = Image<T>(x.width, x.height, x.channels);
    g_mxx = Image<T>(x.width, x.height, x.channels);
    g_mxy = Image<T>(x.width, x.height, x.channels);
  }

  T sum = 0;
  for (int py = y0; py < y1; ++py)
    for (int px = x0; px < x1; ++px)
      for (int c = 0; c < x.channels; ++c) {
        T ux = mx.at(px, py)[c], uy = my.at(px, py)[c];
        T vx = mxx.at(px, py)[c] - ux * ux;
        T vy = myy.at(px, py)[c] - uy * uy;
        T vxy = mxy.at(px, py)[c] - ux * uy;
        T a1 = 2 * ux * uy + T(kC1);
        T a2 = 2 * vxy + T(kC2);
        T b1 = ux * ux + uy * uy + T(kC1);
        T b2 = vx + vy + T(kC2);
        T d = b1 * b2;
        T s = a1 * a2 / d;
        sum += s;
        if (grad_x) {
          T ds = T(1) / T(n_valid);
          T da1 = ds * a2 / d;
          T da2 = ds * a1 / d;
          T db1 = -ds * s / b1;
          T db2 = -ds * s / b2;
          // vx = mxx - ux^2, vxy = mxy - ux uy.
          T dvx = db2;
          T dvxy = 2 * da2;
          g_mx.at(px, py)[c] = da1 * 2 * uy + db1 * 2 * ux - dvx * 2 * ux - dvxy * uy;
          g_mxx.at(px, py)[c] = dvx;
          g_mxy.at(px, py)[c] = dvxy;
        }
      }

  if (grad_x) {
    Image<T> ax = blur_adjoint(g_mx), axx = blur_adjoint(g_mxx), axy = blur_adjoint(g_mxy);
    *grad_x = Image<T>(x.width, x.height, x.channels);
    for (size_t i = 0; i < x.data.size(); ++i)
      grad_x->data[i] = ax.data[i] + 2 * x.data[i] * axx.data[i] + y.data[i] * axy.data[i];
  }
  return sum / T(n_valid);
}

// Perceptual proxy standing in for the paper's learned perceptual loss:
// (1 - SSIM)/2, zero iff the images agree.
template <typename T>
inline T loss_perceptual_proxy(const Image<T>& render, const Image<T>& target,
                               Image<T>* grad = nullptr) {
  T s = ssim(render, target, grad);
  if (grad)
    for (auto& v : grad->data) v *= T(-0.5);
  return (T(1) - s) / T(2);
}

// --- Edge-aware depth smoothness ------------------------------------------------

// mean(|dx d_hat| exp(-|dx I|) + |dy d_hat| exp(-|dy I|)) with depth
// normalized by its mean over valid pixels (monodepth-style). Edge weights
// come from the reference image and carry no gradient.
template <typename T>
inline T loss_edge_aware_smooth(const Image<T>& depth, const Image<T>& rgb,
                                const Image<uint8_t>* valid = nullptr,
                                Image<T>* grad_depth = nullptr) {
  if (depth.channels != 1) throw Error(ErrorCode::ShapeMismatch, "smooth: depth wants 1 channel");
  if (depth.width != rgb.width || depth.height != rgb.height)
    throw Error(ErrorCode::ShapeMismatch, "smooth: depth/rgb size mismatch");
  const int W = depth.width, H = depth.height;
  auto is_valid = [&](int x, int y) {
    return valid ? valid->at(x, y)[0] != 0 : true;
  };

  T mean = 0;
  size_t n_valid = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (is_valid(x, y)) {
        mean += depth.at(x, y)[0];
        ++n_valid;
      }
  if (n_valid == 0) throw Error(ErrorCode::EmptyValidMask, "smooth: no valid pixels");
  mean /= T(n_valid);
  if (mean == T(0)) mean = T(1);  // all-zero depth: normalization is a no-op
  const T inv_m = T(1) / mean;

  auto edge_weight = [&](int xa, int ya, int xb, int yb) {
    T g = 0;
    for (int c = 0; c < rgb.channels; ++c)
      g += std::abs(rgb.at(xb, yb)[c] - rgb.at(xa, ya)[c]);
    return std::exp(-g / T(rgb.channels));
  };

  if (grad_depth) *grad_depth = Image<T>(W, H, 1);
  T sum_x = 0, sum_y = 0;
  size_t nx = 0, ny = 0;
  // First pass: the pair terms and their direct gradients (holding the mean).
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!is_valid(x, y)) continue;
      if (x + 1 < W && is_valid(x + 1, y)) ++nx;
      if (y + 1 < H && is_valid(x, y + 1)) ++ny;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!is_valid(x, y)) continue;
      if (x + 1 < W && is_valid(x + 1, y)) {
        T d = (depth.at(x + 1, y)[0] - depth.at(x, y)[0]) * inv_m;
        T w = edge_weight(x, y, x + 1, y);
        sum_x += std::abs(d) * w;
        if (grad_depth && nx) {
          T s = (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))) * w * inv_m / T(nx);
          grad_depth->at(x + 1, y)[0] += s;
          grad_depth->at(x, y)[0] -= s;
        }
      }
      if (y + 1 < H && is_valid(x, y + 1)) {
        T d = (depth.at(x, y + 1)[0] - depth.at(x, y)[0]) * inv_m;
        T w = edge_weight(x, y, x, y + 1);
        sum_y += std::abs(d) * w;
        if (grad_depth && ny) {
          T s = (d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0))) * w * inv_m / T(ny);
          grad_depth->at(x, y + 1)[0] += s;
          grad_depth->at(x, y)[0] -= s;
        }
      }
    }
  T loss = (nx ? sum_x / T(nx) : T(0)) + (ny ? sum_y / T(ny) : T(0));

  // Mean-normalization path: d(loss)/d(mean) = -loss/mean, spread over the
  // valid pixels that formed the mean.
  if (grad_depth && mean != T(1)) {
    T d_mean = -loss * inv_m / T(n_valid);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (is_valid(x, y)) grad_depth->at(x, y)[0] += d_mean;
  }
  return loss;
}

// --- Total objective --------------------------------------------------------------

template <typename T>
struct LossParts {
  T l1 = 0, perceptual = 0, smooth = 0, total = 0;
};

// Weighted sum of the three terms; fills per-pixel cotangents for the
// rasterizer backward pass. The smoothness term is skipped (0) when no pixel
// reaches the alpha threshold, which happens in early training.
template <typename T>
inline LossParts<T> total_loss(const RenderTarget<T>& render, const Image<T>& target_rgb,
                               const LossWeights& weights, Image<T>* grad_rgb = nullptr,
                               Image<T>* grad_depth = nullptr) {
  LossParts<T> parts;
  Image<T> g_l1, g_perc;
  parts.l1 = loss_l1(render.rgb, target_rgb, grad_rgb ? &g_l1 : nullptr);
  parts.perceptual = loss_perceptual_proxy(render.rgb, target_rgb, grad_rgb ? &g_perc : nullptr);

  Image<uint8_t> valid(render.alpha.width, render.alpha.height, 1);
  size_t n_valid = 0;
  for (size_t i = 0; i < valid.data.size(); ++i) {
    valid.data[i] = render.alpha.data[i] >= T(0.5) ? 1 : 0;
    n_valid += valid.data[i];
  }
  Image<T> g_smooth;
  if (n_valid > 0) {
    parts.smooth = loss_edge_aware_smooth(render.depth, target_rgb, &valid,
                                          grad_depth ? &g_smooth : nullptr);
  }
  parts.total = T(weights.l1) * parts.l1 + T(weights.perceptual) * parts.perceptual +
                T(weights.smooth) * parts.smooth;

  if (grad_rgb) {
    *grad_rgb = Image<T>(render.rgb.width, render.rgb.height, 3);
    for (size_t i = 0; i < grad_rgb->data.size(); ++i)
      grad_rgb->data[i] = T(weights.l1) * g_l1.data[i] + T(weights.perceptual) * g_perc.data[i];
  }
  if (grad_depth) {
    *grad_depth = Image<T>(render.depth.width, render.depth.height, 1);
    if (n_valid > 0 && !g_smooth.data.empty())
      for (size_t i = 0; i < grad_depth->data.size(); ++i)
        grad_depth->data[i] = T(weights.smooth) * g_smooth.data[i];
  }
  return parts;
}

// --- Adam -------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<T> m, v;
  int64_t t = 0;
};

template <typename T>
inline void adam_step(std::vector<T>& params, const std::vector<T>& grads, AdamState<T>& state,
                      double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (params.size() != grads.size())
    throw Error(ErrorCode::ShapeMismatch, "adam: parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
  }
  if (state.m.size() != params.size())
    throw Error(ErrorCode::ShapeMismatch, "adam: state size mismatch");
  ++state.t;
  const T b1 = T(beta1), b2 = T(beta2);
  const T corr1 = T(1) - std::pow(b1, T(state.t));
  const T corr2 = T(1) - std::pow(b2, T(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * grads[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * grads[i] * grads[i];
    T mhat = state.m[i] / corr1;
    T vhat = state.v[i] / corr2;
    params[i] -= T(lr) * mhat / (std::sqrt(vhat) + T(eps));
  }
}

inline double lr_schedule(const TrainConfig& cfg, int iter) {
  if (cfg.warmup > 0 && iter < cfg.warmup) return cfg.lr * double(iter + 1) / double(cfg.warmup);
  double span = std::max(1, cfg.iterations - cfg.warmup);
  double progress = std::min(1.0, double(iter - cfg.warmup) / span);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

// --- Training loop ------------------------------------------------------------------

struct TrainLogRow {
  int iter = 0;
  double l1 = 0, perc = 0, smooth = 0, total = 0;
  size_t gaussians = 0, anchors = 0;
  double seconds = 0;
};

inline void write_loss_csv(const std::vector<TrainLogRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::MalformedFile, "cannot write loss log: " + path);
  out << "iter,l1,perc,smooth,total,gaussians,anchors,seconds\n";
  for (const TrainLogRow& r : rows)
    out << r.iter << ',' << r.l1 << ',' << r.perc << ',' << r.smooth << ',' << r.total << ','
        << r.gaussians << ',' << r.anchors << ',' << r.seconds << '\n';
}

// One training iteration's anchor inputs, cached per frame (the quantization
// of a frame is independent of the training state).
template <typename T>
struct FrameAnchors {
  std::vector<Vec3d> positions;
  std::vector<double> saliency;
  std::vector<std::vector<double>> latent;
  std::vector<VoxelKey> keys;
};

// Context views sampled uniformly in [context_min, context_max], leaving at
// least one target view.
inline int sample_context_count(std::mt19937_64& rng, const TrainConfig& cfg, int n_views) {
  int hi = std::min(cfg.context_max, n_views - 1);
  int lo = std::min(cfg.context_min, hi);
  return lo + int(rng() % uint64_t(hi - lo + 1));
}

// Samples a context/target split, reconstructs anchors from the context
// views, renders every target, and applies one Adam update on all head
// parameters. The backbone (synthetic oracle) stays fixed. Deterministic
// under the config seed.
template <typename T>
inline std::vector<TrainLogRow> train_loop(const std::vector<std::vector<PixelFrame>>& sequences,
                                           const TrainConfig& cfg, HeadParams<T>& params,
                                           AdamState<T>* opt_state = nullptr) {
  if (sequences.empty()) throw Error(ErrorCode::InvalidArgument, "train: no sequences");
  for (const auto& seq : sequences)
    if (int(seq.size()) < 2)
      throw Error(ErrorCode::InvalidArgument, "train: sequences need >= 2 frames");

  // Frame quantizations are training-invariant: cache them.
  std::vector<std::vector<std::vector<Anchor>>> cached(sequences.size());
  for (size_t s = 0; s < sequences.size(); ++s) {
    cached[s].reserve(sequences[s].size());
    for (const PixelFrame& f : sequences[s])
      cached[s].push_back(quantize_pixel_frame(f, cfg.gamma));
  }

  std::mt19937_64 rng(cfg.seed);
  AdamState<T> local_state;
  AdamState<T>& opt = opt_state ? *opt_state : local_state;
  std::vector<TrainLogRow> log;
  log.reserve(cfg.iterations);

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    auto t0 = std::chrono::steady_clock::now();
    size_t si = sequences.size() == 1 ? 0 : rng() % sequences.size();
    const auto& seq = sequences[si];

    int n_views = std::min<int>(cfg.views_per_sequence, int(seq.size()));
    std::vector<int> order(seq.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    int n_ctx = sample_context_count(rng, cfg, n_views);

    // Merge the context frames' cached anchors.
    AnchorStore store;
    store.gamma = cfg.gamma;
    for (int k = 0; k < n_ctx; ++k) store.merge(cached[si][order[k]], cfg.gamma);
    std::vector<Anchor> anchors = store.sorted_anchors();

    const int n = int(anchors.size());
    std::vector<Vec3d> positions(n);
    std::vector<T> saliency(n);
    Matrix<T> latent(n, params.cfg.latent_dim);
    for (int i = 0; i < n; ++i) {
      positions[i] = anchors[i].position();
      saliency[i] = T(anchors[i].saliency());
      std::vector<double> f = anchors[i].latent();
      for (int c = 0; c < params.cfg.latent_dim; ++c) latent(i, c) = T(f[c]);
    }

    // Training renders all grown gaussians: beta applies only at inference.
    RefineCtx<T> ctx;
    RefineResult<T> result =
        refine_and_grow_batch<T>(positions, saliency, latent, params, T(0), &ctx);

    SplatGrads<T> splat_grads;
    splat_grads.resize_like(result.splats);
    TrainLogRow row;
    row.iter = iter;
    row.anchors = size_t(n);
    row.gaussians = result.splats.size();

    const int n_targets = n_views - n_ctx;
    const T inv_targets = T(1) / T(n_targets);
    for (int k = n_ctx; k < n_views; ++k) {
      const PixelFrame& target = seq[order[k]];
      RenderTarget<T> render = rasterize_batch(result.splats, target.camera);
      Image<T> target_rgb(target.width(), target.height(), 3);
      for (size_t i = 0; i < target_rgb.data.size(); ++i)
        target_rgb.data[i] = T(target.rgb.data[i]);

      Image<T> grad_rgb, grad_depth;
      LossParts<T> parts = total_loss(render, target_rgb, cfg.weights, &grad_rgb, &grad_depth);
      row.l1 += parts.l1 * inv_targets;
      row.perc += parts.perceptual * inv_targets;
      row.smooth += parts.smooth * inv_targets;
      row.total += parts.total * inv_targets;

      for (auto& v : grad_rgb.data) v *= inv_targets;
      for (auto& v : grad_depth.data) v *= inv_targets;
      Image<T> grad_alpha;  // no alpha supervision
      SplatGrads<T> view_grads;
      rasterize_batch_backward(result.splats, target.camera, grad_rgb, grad_depth, grad_alpha,
                               view_grads);
      splat_grads.add(view_grads);
    }

    std::vector<T> grad(params.data.size(), T(0));
    refine_and_grow_backward(ctx, result, splat_grads, params, grad);
    adam_step(params.data, grad, opt, lr_schedule(cfg, iter));

    row.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(row);
  }
  return log;
}

// --- Metrics -----------------------------------------------------------------------

inline double psnr(const Image<double>& a, const Image<double>& b) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "psnr: shape mismatch");
  double mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= double(a.data.size());
  if (mse <= 1e-12) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

struct DepthMetrics {
  double abs_rel = 0;
  double delta1 = 0;
  size_t valid = 0;
};

// Abs Rel and the delta < 1.25 inlier fraction over pixels that are valid in
// both the prediction (mask) and the ground truth (positive depth).
inline DepthMetrics depth_metrics(const Image<double>& pred, const Image<double>& gt,
                                  const Image<uint8_t>* pred_valid = nullptr) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw Error(ErrorCode::ShapeMismatch, "depth metrics: shape mismatch");
  DepthMetrics m;
  double sum_rel = 0;
  size_t inliers = 0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      double g = gt.at(x, y)[0];
      double p = pred.at(x, y)[0];
      bool ok = g > 1e-6 && (pred_valid ? pred_valid->at(x, y)[0] != 0 : p > 1e-6);
      if (!ok) continue;
      ++m.valid;
      sum_rel += std::abs(g - p) / g;
      double ratio = std::max(p / g, g / p);
      if (ratio < 1.25) ++inliers;
    }
  if (m.valid > 0) {
    m.abs_rel = sum_rel / double(m.valid);
    m.delta1 = double(inliers) / double(m.valid);
  }
  return m;
}

struct EvalReport {
  double psnr = 0;
  double ssim = 0;
  double abs_rel = 0;
  double delta1 = 0;
  size_t gaussian_count = 0;
  size_t anchor_count = 0;
  double ms_per_frame = 0;
};

}  // namespace salon
