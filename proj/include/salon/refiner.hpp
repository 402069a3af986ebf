// The structure-aware network stack: anchor decoding (MLP_GS), the
// patch-attention U-Net refiner, residual growing (MLP_grow), opacity fusion
// with pruning, and refined-set assembly. Gradients are accumulated by
// explicit reverse-mode passes through the fixed operation graph; central
// finite differences are the verification contract.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "salon/core.hpp"
#include "salon/io.hpp"
#include "salon/matrix.hpp"
#include "salon/quantize.hpp"
#include "salon/render.hpp"
#include "salon/serialize.hpp"
#include "salon/threading.hpp"

namespace salon {

struct NetConfig {
  int latent_dim = 32;  // C
  int h_dim = 64;
  int heads = 4;
  int growth = 4;  // M gaussians per anchor
  int sh_degree = 1;
  int patch_size = 32;
  double gamma = 0.01;  // voxel size; also the serialization grid
  SFCurve base_curve = SFCurve::Hilbert;

  static constexpr int kEncStages = 5;
  static constexpr int kDecStages = 4;

  int sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }
  // MLP_GS output: quat residual 4, log_scale 3, opacity logit 1, sh.
  int attr_width() const { return 4 + 3 + 1 + 3 * sh_coeffs(); }
  // Refiner input: mu 3, covariance parametrization 7, alpha 1, sh, saliency 1.
  int refiner_in_width() const { return 3 + 7 + 1 + 3 * sh_coeffs() + 1; }
  // Per grown gaussian: dmu 3, dquat 4, dlog_scale 3, dalpha 1, dsh, dsaliency 1.
  int residual_width() const { return 3 + 4 + 3 + 1 + 3 * sh_coeffs() + 1; }
  std::array<int, 5> stage_widths() const {
    return {h_dim, 2 * h_dim, 2 * h_dim, 4 * h_dim, 4 * h_dim};
  }

  void validate() const {
    if (latent_dim < 1 || h_dim < 1 || growth < 1 || patch_size < 1)
      throw Error(ErrorCode::InvalidArgument, "net config: dimensions must be positive");
    if (sh_degree < 0 || sh_degree > 3)
      throw Error(ErrorCode::InvalidArgument, "net config: sh degree must be in [0,3]");
    for (int w : stage_widths())
      if (w % heads != 0)
        throw Error(ErrorCode::InvalidArgument, "net config: heads must divide stage widths");
    if (gamma <= 0) throw Error(ErrorCode::InvalidArgument, "net config: gamma must be positive");
  }
};

// All trainable parameters in one flat buffer with a named-tensor layout;
// gradients and Adam state reuse the same layout.
template <typename T>
struct HeadParams {
  struct TensorRef {
    std::string name;
    size_t offset = 0;
    int rows = 0, cols = 0;  // cols == 1 for vectors
    size_t count() const { return size_t(rows) * cols; }
  };

  NetConfig cfg;
  std::vector<TensorRef> tensors;
  std::unordered_map<std::string, uint32_t> by_name;
  std::vector<T> data;

  static HeadParams zeros(const NetConfig& cfg) {
    cfg.validate();
    HeadParams p;
    p.cfg = cfg;
    auto add = [&p](const std::string& name, int rows, int cols) {
      TensorRef t{name, p.data.size(), rows, cols};
      p.by_name.emplace(name, uint32_t(p.tensors.size()));
      p.tensors.push_back(t);
      p.data.resize(p.data.size() + t.count(), T(0));
    };
    auto add_block = [&](const std::string& prefix, int w) {
      add(prefix + ".ln1.g", w, 1);
      add(prefix + ".ln1.b", w, 1);
      add(prefix + ".attn.wq", w, w);
      add(prefix + ".attn.bq", w, 1);
      add(prefix + ".attn.wk", w, w);
      add(prefix + ".attn.bk", w, 1);
      add(prefix + ".attn.wv", w, w);
      add(prefix + ".attn.bv", w, 1);
      add(prefix + ".attn.wo", w, w);
      add(prefix + ".attn.bo", w, 1);
      add(prefix + ".ln2.g", w, 1);
      add(prefix + ".ln2.b", w, 1);
      add(prefix + ".mlp.w1", 2 * w, w);
      add(prefix + ".mlp.b1", 2 * w, 1);
      add(prefix + ".mlp.w2", w, 2 * w);
      add(prefix + ".mlp.b2", w, 1);
    };

    const auto widths = cfg.stage_widths();
    add("mlp_gs.w1", cfg.h_dim, cfg.latent_dim);
    add("mlp_gs.b1", cfg.h_dim, 1);
    add("mlp_gs.w2", cfg.attr_width(), cfg.h_dim);
    add("mlp_gs.b2", cfg.attr_width(), 1);
    add("embed.w", widths[0], cfg.refiner_in_width());
    add("embed.b", widths[0], 1);
    for (int s = 0; s < NetConfig::kEncStages; ++s) add_block("enc" + std::to_string(s), widths[s]);
    for (int s = 1; s < NetConfig::kEncStages; ++s) {
      add("pool" + std::to_string(s) + ".w", widths[s], widths[s - 1]);
      add("pool" + std::to_string(s) + ".b", widths[s], 1);
    }
    for (int d = 0; d < NetConfig::kDecStages; ++d) {
      int level = NetConfig::kDecStages - 1 - d;  // 3,2,1,0
      add("unpool" + std::to_string(d) + ".w", widths[level], widths[level + 1]);
      add("unpool" + std::to_string(d) + ".b", widths[level], 1);
      add_block("dec" + std::to_string(d), widths[level]);
    }
    add("mlp_grow.w1", cfg.h_dim, cfg.h_dim);
    add("mlp_grow.b1", cfg.h_dim, 1);
    add("mlp_grow.w2", cfg.growth * cfg.residual_width(), cfg.h_dim);
    add("mlp_grow.b2", cfg.growth * cfg.residual_width(), 1);
    return p;
  }

  static HeadParams init(const NetConfig& cfg, uint64_t seed) {
    HeadParams p = zeros(cfg);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0, 1);
    for (const TensorRef& t : p.tensors) {
      bool is_weight = t.cols > 1;
      bool is_ln_gain = t.name.ends_with("ln1.g") || t.name.ends_with("ln2.g");
      if (is_weight) {
        double scale = 1.0 / std::sqrt(double(t.cols));
        if (t.name == "mlp_gs.w2" || t.name == "mlp_grow.w2" || t.name.ends_with("attn.wo"))
          scale *= 0.1;  // keep initial outputs near the bias values
        for (size_t i = 0; i < t.count(); ++i) p.data[t.offset + i] = T(g(rng) * scale);
      } else if (is_ln_gain) {
        for (size_t i = 0; i < t.count(); ++i) p.data[t.offset + i] = T(1);
      }
    }
    // Decoded anchors start as small, translucent splats at voxel scale.
    {
      const TensorRef& b2 = p.tensor("mlp_gs.b2");
      T* b = p.data.data() + b2.offset;
      for (int k = 0; k < 3; ++k) b[4 + k] = T(std::log(0.6 * cfg.gamma));
      b[7] = T(logit(0.3));
    }
    return p;
  }

  const TensorRef& tensor(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error(ErrorCode::InternalInvariant, "unknown tensor " + name);
    return tensors[it->second];
  }
  T* ptr(const std::string& name) { return data.data() + tensor(name).offset; }
  const T* ptr(const std::string& name) const { return data.data() + tensor(name).offset; }

  template <typename U>
  HeadParams<U> cast() const {
    HeadParams<U> out = HeadParams<U>::zeros(cfg);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

// --- Checkpoint format "SLNW" ------------------------------------------------

template <typename T>
inline void save_checkpoint(const HeadParams<T>& params, const std::string& path) {
  std::ofstream out = open_output(path);
  write_magic(out, "SLNW");
  write_pod<uint32_t>(out, 1);
  write_pod<uint32_t>(out, uint32_t(params.cfg.latent_dim));
  write_pod<uint32_t>(out, uint32_t(params.cfg.h_dim));
  write_pod<uint32_t>(out, uint32_t(params.cfg.growth));
  write_pod<uint32_t>(out, uint32_t(params.cfg.sh_degree));
  write_pod<uint32_t>(out, uint32_t(NetConfig::kEncStages));
  write_pod<uint32_t>(out, uint32_t(NetConfig::kDecStages));
  write_pod<uint32_t>(out, uint32_t(params.cfg.heads));
  write_pod<uint32_t>(out, uint32_t(params.cfg.patch_size));
  write_pod<double>(out, params.cfg.gamma);
  write_pod<uint32_t>(out, uint32_t(params.cfg.base_curve == SFCurve::Hilbert ? 1 : 0));
  write_pod<uint64_t>(out, params.data.size());
  for (T v : params.data) write_pod<float>(out, float(v));
}

template <typename T = double>
inline HeadParams<T> load_checkpoint(const std::string& path) {
  std::ifstream in = open_input(path);
  expect_magic(in, "SLNW", "checkpoint");
  uint32_t version = read_pod<uint32_t>(in, "version");
  if (version != 1) throw Error(ErrorCode::ConfigMismatch, "unsupported checkpoint version");
  NetConfig cfg;
  cfg.latent_dim = int(read_pod<uint32_t>(in, "C"));
  cfg.h_dim = int(read_pod<uint32_t>(in, "h_dim"));
  cfg.growth = int(read_pod<uint32_t>(in, "M"));
  cfg.sh_degree = int(read_pod<uint32_t>(in, "degree"));
  uint32_t enc = read_pod<uint32_t>(in, "enc stages");
  uint32_t dec = read_pod<uint32_t>(in, "dec stages");
  if (enc != NetConfig::kEncStages || dec != NetConfig::kDecStages)
    throw Error(ErrorCode::ConfigMismatch, "checkpoint stage count mismatch");
  cfg.heads = int(read_pod<uint32_t>(in, "heads"));
  cfg.patch_size = int(read_pod<uint32_t>(in, "patch"));
  cfg.gamma = read_pod<double>(in, "gamma");
  cfg.base_curve = read_pod<uint32_t>(in, "curve") ? SFCurve::Hilbert : SFCurve::Morton;
  uint64_t count = read_pod<uint64_t>(in, "param count");
  HeadParams<T> params = HeadParams<T>::zeros(cfg);
  if (count != params.data.size())
    throw Error(ErrorCode::ConfigMismatch, "checkpoint parameter count mismatch");
  for (auto& v : params.data) v = T(read_pod<float>(in, "params"));
  return params;
}

// --- Primitive layers ---------------------------------------------------------

namespace net {

template <typename T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / T(M_SQRT2)));
}

template <typename T>
inline T gelu_grad(T x) {
  T phi = std::exp(-x * x / 2) / T(std::sqrt(2.0 * M_PI));
  T cdf = T(0.5) * (T(1) + std::erf(x / T(M_SQRT2)));
  return cdf + x * phi;
}

// y = x W^T + b with W stored row-major (out x in).
template <typename T>
inline void linear_forward(const Matrix<T>& x, const T* w, const T* b, int out, Matrix<T>& y) {
  const int in = x.cols;
  y = Matrix<T>(x.rows, out);
  parallel_for(size_t(x.rows), [&](size_t r) {
    const T* xr = x.row(int(r));
    T* yr = y.row(int(r));
    for (int o = 0; o < out; ++o) {
      const T* wr = w + size_t(o) * in;
      T acc = b ? b[o] : T(0);
      for (int k = 0; k < in; ++k) acc += wr[k] * xr[k];
      yr[o] = acc;
    }
  });
}

// Accumulates dW, dB and writes dX (token-serial so accumulation order is
// independent of the thread configuration).
template <typename T>
inline void linear_backward(const Matrix<T>& x, const T* w, int out, const Matrix<T>& dy,
                            T* dw, T* db, Matrix<T>& dx) {
  const int in = x.cols;
  dx = Matrix<T>(x.rows, in);
  for (int r = 0; r < x.rows; ++r) {
    const T* xr = x.row(r);
    const T* dyr = dy.row(r);
    T* dxr = dx.row(r);
    for (int o = 0; o < out; ++o) {
      const T g = dyr[o];
      if (g == T(0)) continue;
      const T* wr = w + size_t(o) * in;
      T* dwr = dw + size_t(o) * in;
      for (int k = 0; k < in; ++k) {
        dwr[k] += g * xr[k];
        dxr[k] += g * wr[k];
      }
      if (db) db[o] += g;
    }
  }
}

inline constexpr double kLnEps = 1e-5;

template <typename T>
struct LayerNormCtx {
  Matrix<T> x;       // input
  std::vector<T> mean, rstd;
};

template <typename T>
inline void layernorm_forward(const Matrix<T>& x, const T* gain, const T* bias, Matrix<T>& y,
                              LayerNormCtx<T>& ctx) {
  const int w = x.cols;
  y = Matrix<T>(x.rows, w);
  ctx.x = x;
  ctx.mean.resize(x.rows);
  ctx.rstd.resize(x.rows);
  parallel_for(size_t(x.rows), [&](size_t r) {
    const T* xr = x.row(int(r));
    T mu = 0;
    for (int k = 0; k < w; ++k) mu += xr[k];
    mu /= T(w);
    T var = 0;
    for (int k = 0; k < w; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= T(w);
    T rstd = T(1) / std::sqrt(var + T(kLnEps));
    ctx.mean[r] = mu;
    ctx.rstd[r] = rstd;
    T* yr = y.row(int(r));
    for (int k = 0; k < w; ++k) yr[k] = (xr[k] - mu) * rstd * gain[k] + bias[k];
  });
}

template <typename T>
inline void layernorm_backward(const LayerNormCtx<T>& ctx, const T* gain, const Matrix<T>& dy,
                               T* dgain, T* dbias, Matrix<T>& dx) {
  const int w = ctx.x.cols;
  dx = Matrix<T>(ctx.x.rows, w);
  for (int r = 0; r < ctx.x.rows; ++r) {
    const T* xr = ctx.x.row(r);
    const T* dyr = dy.row(r);
    T* dxr = dx.row(r);
    const T mu = ctx.mean[r], rstd = ctx.rstd[r];
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int k = 0; k < w; ++k) {
      T xhat = (xr[k] - mu) * rstd;
      T dxhat = dyr[k] * gain[k];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      dgain[k] += dyr[k] * xhat;
      dbias[k] += dyr[k];
    }
    for (int k = 0; k < w; ++k) {
      T xhat = (xr[k] - mu) * rstd;
      T dxhat = dyr[k] * gain[k];
      dxr[k] = rstd * (dxhat - sum_dxhat / T(w) - xhat * sum_dxhat_xhat / T(w));
    }
  }
}

// Pre-norm attention block: x += Wo MHA(LN1 x); x += MLP(LN2 x).
template <typename T>
struct BlockCtx {
  SerializedBatch order;  // permutation + patch offsets for this stage
  LayerNormCtx<T> ln1, ln2;
  Matrix<T> x_in;       // block input
  Matrix<T> q, k, v;    // projections of LN1 output
  std::vector<T> att;   // softmax probabilities, patch-major: heads x p x p
  std::vector<size_t> att_offset;  // per patch offset into att
  Matrix<T> att_out;    // concatenated head outputs (before Wo)
  Matrix<T> x_mid;      // after attention residual
  Matrix<T> mlp_pre;    // hidden pre-activation
  Matrix<T> mlp_act;    // hidden post-gelu
};

template <typename T>
struct BlockParams {
  const T *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *ln2_g, *ln2_b;
  const T *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
  int width;
};

template <typename T>
struct BlockGrads {
  T *ln1_g, *ln1_b, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *ln2_g, *ln2_b;
  T *mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
};

template <typename T>
inline BlockParams<T> block_params(const HeadParams<T>& p, const std::string& prefix) {
  BlockParams<T> bp;
  bp.ln1_g = p.ptr(prefix + ".ln1.g");
  bp.ln1_b = p.ptr(prefix + ".ln1.b");
  bp.wq = p.ptr(prefix + ".attn.wq");
  bp.bq = p.ptr(prefix + ".attn.bq");
  bp.wk = p.ptr(prefix + ".attn.wk");
  bp.bk = p.ptr(prefix + ".attn.bk");
  bp.wv = p.ptr(prefix + ".attn.wv");
  bp.bv = p.ptr(prefix + ".attn.bv");
  bp.wo = p.ptr(prefix + ".attn.wo");
  bp.bo = p.ptr(prefix + ".attn.bo");
  bp.ln2_g = p.ptr(prefix + ".ln2.g");
  bp.ln2_b = p.ptr(prefix + ".ln2.b");
  bp.mlp_w1 = p.ptr(prefix + ".mlp.w1");
  bp.mlp_b1 = p.ptr(prefix + ".mlp.b1");
  bp.mlp_w2 = p.ptr(prefix + ".mlp.w2");
  bp.mlp_b2 = p.ptr(prefix + ".mlp.b2");
  bp.width = p.tensor(prefix + ".ln1.g").rows;
  return bp;
}

template <typename T>
inline BlockGrads<T> block_grads(const HeadParams<T>& p, std::vector<T>& grad,
                                 const std::string& prefix) {
  auto at = [&](const std::string& name) { return grad.data() + p.tensor(name).offset; };
  BlockGrads<T> bg;
  bg.ln1_g = at(prefix + ".ln1.g");
  bg.ln1_b = at(prefix + ".ln1.b");
  bg.wq = at(prefix + ".attn.wq");
  bg.bq = at(prefix + ".attn.bq");
  bg.wk = at(prefix + ".attn.wk");
  bg.bk = at(prefix + ".attn.bk");
  bg.wv = at(prefix + ".attn.wv");
  bg.bv = at(prefix + ".attn.bv");
  bg.wo = at(prefix + ".attn.wo");
  bg.bo = at(prefix + ".attn.bo");
  bg.ln2_g = at(prefix + ".ln2.g");
  bg.ln2_b = at(prefix + ".ln2.b");
  bg.mlp_w1 = at(prefix + ".mlp.w1");
  bg.mlp_b1 = at(prefix + ".mlp.b1");
  bg.mlp_w2 = at(prefix + ".mlp.w2");
  bg.mlp_b2 = at(prefix + ".mlp.b2");
  return bg;
}

// Scaled-dot-product attention restricted to non-overlapping patches of the
// serialized order. x is in anchor order; the patch structure indexes through
// order.perm.
template <typename T>
inline void block_forward(const BlockParams<T>& bp, int heads, const SerializedBatch& order,
                          const Matrix<T>& x, Matrix<T>& out, BlockCtx<T>& ctx) {
  const int w = bp.width;
  const int hd = w / heads;
  const T inv_sqrt_hd = T(1) / std::sqrt(T(hd));
  ctx.order = order;
  ctx.x_in = x;

  Matrix<T> y1;
  layernorm_forward(x, bp.ln1_g, bp.ln1_b, y1, ctx.ln1);
  linear_forward(y1, bp.wq, bp.bq, w, ctx.q);
  linear_forward(y1, bp.wk, bp.bk, w, ctx.k);
  linear_forward(y1, bp.wv, bp.bv, w, ctx.v);

  const size_t n_patches = order.patch_offsets.size() - 1;
  ctx.att_offset.resize(n_patches + 1);
  size_t att_total = 0;
  for (size_t pi = 0; pi < n_patches; ++pi) {
    ctx.att_offset[pi] = att_total;
    size_t p = order.patch_offsets[pi + 1] - order.patch_offsets[pi];
    att_total += size_t(heads) * p * p;
  }
  ctx.att_offset[n_patches] = att_total;
  ctx.att.assign(att_total, T(0));
  ctx.att_out = Matrix<T>(x.rows, w);

  parallel_for(n_patches, [&](size_t pi) {
    const uint32_t begin = order.patch_offsets[pi], end = order.patch_offsets[pi + 1];
    const int p = int(end - begin);
    T* att = ctx.att.data() + ctx.att_offset[pi];
    for (int h = 0; h < heads; ++h) {
      const int co = h * hd;
      T* att_h = att + size_t(h) * p * p;
      for (int i = 0; i < p; ++i) {
        const T* qi = ctx.q.row(int(order.perm[begin + i])) + co;
        T* row = att_h + size_t(i) * p;
        T maxv = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < p; ++j) {
          const T* kj = ctx.k.row(int(order.perm[begin + j])) + co;
          T s = 0;
          for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
          s *= inv_sqrt_hd;
          row[j] = s;
          maxv = std::max(maxv, s);
        }
        T denom = 0;
        for (int j = 0; j < p; ++j) {
          row[j] = std::exp(row[j] - maxv);
          denom += row[j];
        }
        for (int j = 0; j < p; ++j) row[j] /= denom;
        T* oi = ctx.att_out.row(int(order.perm[begin + i])) + co;
        for (int c = 0; c < hd; ++c) oi[c] = 0;
        for (int j = 0; j < p; ++j) {
          const T* vj = ctx.v.row(int(order.perm[begin + j])) + co;
          const T a = row[j];
          for (int c = 0; c < hd; ++c) oi[c] += a * vj[c];
        }
      }
    }
  });

  Matrix<T> proj;
  linear_forward(ctx.att_out, bp.wo, bp.bo, w, proj);
  ctx.x_mid = Matrix<T>(x.rows, w);
  for (size_t i = 0; i < x.v.size(); ++i) ctx.x_mid.v[i] = x.v[i] + proj.v[i];

  Matrix<T> y2;
  layernorm_forward(ctx.x_mid, bp.ln2_g, bp.ln2_b, y2, ctx.ln2);
  linear_forward(y2, bp.mlp_w1, bp.mlp_b1, 2 * w, ctx.mlp_pre);
  ctx.mlp_act = Matrix<T>(x.rows, 2 * w);
  for (size_t i = 0; i < ctx.mlp_pre.v.size(); ++i) ctx.mlp_act.v[i] = gelu(ctx.mlp_pre.v[i]);
  Matrix<T> mlp_out;
  linear_forward(ctx.mlp_act, bp.mlp_w2, bp.mlp_b2, w, mlp_out);

  out = Matrix<T>(x.rows, w);
  for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = ctx.x_mid.v[i] + mlp_out.v[i];
}

template <typename T>
inline void block_backward(const BlockParams<T>& bp, const BlockGrads<T>& bg, int heads,
                           const BlockCtx<T>& ctx, const Matrix<T>& dout, Matrix<T>& dx) {
  const int w = bp.width;
  const int hd = w / heads;
  const T inv_sqrt_hd = T(1) / std::sqrt(T(hd));
  const int n = ctx.x_in.rows;

  // MLP branch.
  Matrix<T> y2;  // recompute LN2 output (cheap, avoids storing it)
  {
    Matrix<T> tmp;
    LayerNormCtx<T> scratch;
    layernorm_forward(ctx.x_mid, bp.ln2_g, bp.ln2_b, tmp, scratch);
    y2 = std::move(tmp);
  }
  Matrix<T> d_mlp_act;
  linear_backward(ctx.mlp_act, bp.mlp_w2, w, dout, bg.mlp_w2, bg.mlp_b2, d_mlp_act);
  Matrix<T> d_mlp_pre(n, 2 * w);
  for (size_t i = 0; i < d_mlp_pre.v.size(); ++i)
    d_mlp_pre.v[i] = d_mlp_act.v[i] * gelu_grad(ctx.mlp_pre.v[i]);
  Matrix<T> d_y2;
  linear_backward(y2, bp.mlp_w1, 2 * w, d_mlp_pre, bg.mlp_w1, bg.mlp_b1, d_y2);
  Matrix<T> d_xmid;
  layernorm_backward(ctx.ln2, bp.ln2_g, d_y2, bg.ln2_g, bg.ln2_b, d_xmid);
  for (size_t i = 0; i < d_xmid.v.size(); ++i) d_xmid.v[i] += dout.v[i];  // residual

  // Attention branch.
  Matrix<T> d_att_out;
  linear_backward(ctx.att_out, bp.wo, w, d_xmid, bg.wo, bg.bo, d_att_out);

  Matrix<T> dq(n, w), dk(n, w), dv(n, w);
  const size_t n_patches = ctx.order.patch_offsets.size() - 1;
  parallel_for(n_patches, [&](size_t pi) {
    const uint32_t begin = ctx.order.patch_offsets[pi], end = ctx.order.patch_offsets[pi + 1];
    const int p = int(end - begin);
    const T* att = ctx.att.data() + ctx.att_offset[pi];
    std::vector<T> d_row(p);
    for (int h = 0; h < heads; ++h) {
      const int co = h * hd;
      const T* att_h = att + size_t(h) * p * p;
      for (int i = 0; i < p; ++i) {
        const int ti = int(ctx.order.perm[begin + i]);
        const T* doi = d_att_out.row(ti) + co;
        const T* arow = att_h + size_t(i) * p;
        // dV and dA.
        T dot = 0;
        for (int j = 0; j < p; ++j) {
          const int tj = int(ctx.order.perm[begin + j]);
          const T* vj = ctx.v.row(tj) + co;
          T da = 0;
          for (int c = 0; c < hd; ++c) da += doi[c] * vj[c];
          d_row[j] = da;
          dot += da * arow[j];
          T* dvj = dv.row(tj) + co;
          const T a = arow[j];
          for (int c = 0; c < hd; ++c) dvj[c] += a * doi[c];
        }
        // Softmax backward, then scores -> q, k.
        const T* qi = ctx.q.row(ti) + co;
        T* dqi = dq.row(ti) + co;
        for (int j = 0; j < p; ++j) {
          const int tj = int(ctx.order.perm[begin + j]);
          T ds = arow[j] * (d_row[j] - dot) * inv_sqrt_hd;
          if (ds == T(0)) continue;
          const T* kj = ctx.k.row(tj) + co;
          T* dkj = dk.row(tj) + co;
          for (int c = 0; c < hd; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
  });

  // Back through the three projections into LN1.
  Matrix<T> y1;
  {
    Matrix<T> tmp;
    LayerNormCtx<T> scratch;
    layernorm_forward(ctx.x_in, bp.ln1_g, bp.ln1_b, tmp, scratch);
    y1 = std::move(tmp);
  }
  Matrix<T> d_y1(n, w), d_tmp;
  linear_backward(y1, bp.wq, w, dq, bg.wq, bg.bq, d_tmp);
  for (size_t i = 0; i < d_y1.v.size(); ++i) d_y1.v[i] += d_tmp.v[i];
  linear_backward(y1, bp.wk, w, dk, bg.wk, bg.bk, d_tmp);
  for (size_t i = 0; i < d_y1.v.size(); ++i) d_y1.v[i] += d_tmp.v[i];
  linear_backward(y1, bp.wv, w, dv, bg.wv, bg.bv, d_tmp);
  for (size_t i = 0; i < d_y1.v.size(); ++i) d_y1.v[i] += d_tmp.v[i];

  layernorm_backward(ctx.ln1, bp.ln1_g, d_y1, bg.ln1_g, bg.ln1_b, dx);
  for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += d_xmid.v[i];  // residual
}

}  // namespace net

// --- Refiner topology ----------------------------------------------------------

// Serialization orders and pooling maps are a pure function of anchor
// positions: the differentiable part of the network is dense linear algebra
// over this fixed wiring.
struct RefinerTopology {
  struct Level {
    std::vector<Vec3d> pos;
    SerializedBatch enc_order;
    SerializedBatch dec_order;  // unused at level 4
    GridPoolMap pool;           // to the next coarser level (unused at level 4)
    int count = 0;
  };
  std::array<Level, NetConfig::kEncStages> levels;
};

inline SFCurve stage_curve(const NetConfig& cfg, int stage) {
  bool base = (stage % 2) == 0;
  if (cfg.base_curve == SFCurve::Hilbert)
    return base ? SFCurve::Hilbert : SFCurve::Morton;
  return base ? SFCurve::Morton : SFCurve::Hilbert;
}

inline RefinerTopology build_topology(std::span<const Vec3d> positions, const NetConfig& cfg) {
  if (positions.empty()) throw Error(ErrorCode::InvalidArgument, "refiner needs >= 1 anchor");
  RefinerTopology topo;
  topo.levels[0].pos.assign(positions.begin(), positions.end());
  for (int l = 0; l < NetConfig::kEncStages; ++l) {
    auto& level = topo.levels[l];
    level.count = int(level.pos.size());
    double grid = cfg.gamma * double(1 << l);
    level.enc_order = serialize_order(level.pos, grid, stage_curve(cfg, l), kCurveBitsDefault,
                                      (l / 2) % 3);
    patch_partition(level.enc_order, cfg.patch_size);
    if (l < NetConfig::kDecStages) {
      int stage = NetConfig::kEncStages + (NetConfig::kDecStages - 1 - l);
      level.dec_order = serialize_order(level.pos, grid, stage_curve(cfg, stage),
                                        kCurveBitsDefault, (stage / 2) % 3);
      patch_partition(level.dec_order, cfg.patch_size);
    }
    if (l + 1 < NetConfig::kEncStages) {
      Matrix<double> dummy(level.count, 1), pooled;
      topo.levels[l].pool = grid_pool<double>(level.pos, dummy, cfg.gamma * double(1 << (l + 1)),
                                              pooled);
      topo.levels[l + 1].pos = topo.levels[l].pool.coarse_pos;
    }
  }
  return topo;
}

// --- Refiner U-Net -------------------------------------------------------------

template <typename T>
struct RefinerCtx {
  RefinerTopology topo;
  Matrix<T> input;                                    // embed input
  std::array<net::BlockCtx<T>, 5> enc_blocks;
  std::array<net::BlockCtx<T>, 4> dec_blocks;
  std::array<Matrix<T>, 5> enc_out;                   // per-level block outputs
  std::array<Matrix<T>, 4> pooled_mean;               // mean-pooled features (levels 1..4)
  std::array<Matrix<T>, 4> unpool_in;                 // gathered coarse features per dec stage
};

// Embed -> 5 encoder stages (attention + grid pooling) -> 4 decoder stages
// (unpooling + skip + attention) -> per-anchor latent of width h_dim.
template <typename T>
inline Matrix<T> refiner_forward_net(const Matrix<T>& input, const RefinerTopology& topo,
                                     const HeadParams<T>& params, RefinerCtx<T>& ctx) {
  const NetConfig& cfg = params.cfg;
  const auto widths = cfg.stage_widths();
  ctx.topo = topo;
  ctx.input = input;

  Matrix<T> x;
  net::linear_forward(input, params.ptr("embed.w"), params.ptr("embed.b"), widths[0], x);
  for (int l = 0; l < NetConfig::kEncStages; ++l) {
    if (l > 0) {
      const GridPoolMap& pool = topo.levels[l - 1].pool;
      Matrix<T> pooled(int(pool.coarse_pos.size()), x.cols);
      for (int i = 0; i < x.rows; ++i) {
        const T* src = x.row(i);
        T* dst = pooled.row(int(pool.parent[i]));
        for (int c = 0; c < x.cols; ++c) dst[c] += src[c];
      }
      for (int ci = 0; ci < pooled.rows; ++ci) {
        T inv = T(1) / T(pool.counts[ci]);
        T* row = pooled.row(ci);
        for (int c = 0; c < pooled.cols; ++c) row[c] *= inv;
      }
      ctx.pooled_mean[l - 1] = pooled;
      std::string name = "pool" + std::to_string(l);
      net::linear_forward(pooled, params.ptr(name + ".w"), params.ptr(name + ".b"), widths[l], x);
    }
    auto bp = net::block_params(params, "enc" + std::to_string(l));
    Matrix<T> out;
    net::block_forward(bp, cfg.heads, topo.levels[l].enc_order, x, out, ctx.enc_blocks[l]);
    ctx.enc_out[l] = out;
    x = std::move(out);
  }

  for (int d = 0; d < NetConfig::kDecStages; ++d) {
    const int level = NetConfig::kDecStages - 1 - d;
    const GridPoolMap& pool = topo.levels[level].pool;
    Matrix<T> gathered(topo.levels[level].count, x.cols);
    for (int i = 0; i < gathered.rows; ++i) {
      const T* src = x.row(int(pool.parent[i]));
      T* dst = gathered.row(i);
      for (int c = 0; c < x.cols; ++c) dst[c] = src[c];
    }
    ctx.unpool_in[d] = gathered;
    std::string name = "unpool" + std::to_string(d);
    Matrix<T> up;
    net::linear_forward(gathered, params.ptr(name + ".w"), params.ptr(name + ".b"), widths[level],
                        up);
    const Matrix<T>& skip = ctx.enc_out[level];
    for (size_t i = 0; i < up.v.size(); ++i) up.v[i] += skip.v[i];

    auto bp = net::block_params(params, "dec" + std::to_string(d));
    Matrix<T> out;
    net::block_forward(bp, cfg.heads, topo.levels[level].dec_order, up, out, ctx.dec_blocks[d]);
    x = std::move(out);
  }
  return x;
}

template <typename T>
inline void refiner_backward_net(const RefinerCtx<T>& ctx, const HeadParams<T>& params,
                                 const Matrix<T>& dout, std::vector<T>& grad,
                                 Matrix<T>& dinput) {
  const NetConfig& cfg = params.cfg;
  const auto widths = cfg.stage_widths();
  std::array<Matrix<T>, 5> d_enc_out;  // skip/residual gradients per level

  Matrix<T> dx = dout;
  for (int d = NetConfig::kDecStages - 1; d >= 0; --d) {
    const int level = NetConfig::kDecStages - 1 - d;
    auto bp = net::block_params(params, "dec" + std::to_string(d));
    auto bg = net::block_grads(params, grad, "dec" + std::to_string(d));
    Matrix<T> d_up;
    net::block_backward(bp, bg, cfg.heads, ctx.dec_blocks[d], dx, d_up);

    // Skip connection.
    if (d_enc_out[level].rows == 0) d_enc_out[level] = Matrix<T>(d_up.rows, d_up.cols);
    for (size_t i = 0; i < d_up.v.size(); ++i) d_enc_out[level].v[i] += d_up.v[i];

    std::string name = "unpool" + std::to_string(d);
    Matrix<T> d_gathered;
    net::linear_backward(ctx.unpool_in[d], params.ptr(name + ".w"), widths[level], d_up,
                         grad.data() + params.tensor(name + ".w").offset,
                         grad.data() + params.tensor(name + ".b").offset, d_gathered);
    // Scatter-add back to the coarse level.
    const GridPoolMap& pool = ctx.topo.levels[level].pool;
    Matrix<T> d_coarse(int(pool.coarse_pos.size()), d_gathered.cols);
    for (int i = 0; i < d_gathered.rows; ++i) {
      const T* src = d_gathered.row(i);
      T* dst = d_coarse.row(int(pool.parent[i]));
      for (int c = 0; c < d_gathered.cols; ++c) dst[c] += src[c];
    }
    dx = std::move(d_coarse);
  }

  // dx now holds the gradient flowing into the deepest encoder output; merge
  // with any skip gradient recorded for level 4 (none: level 4 has no skip).
  for (int l = NetConfig::kEncStages - 1; l >= 0; --l) {
    if (d_enc_out[l].rows != 0)
      for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += d_enc_out[l].v[i];

    auto bp = net::block_params(params, "enc" + std::to_string(l));
    auto bg = net::block_grads(params, grad, "enc" + std::to_string(l));
    Matrix<T> d_in;
    net::block_backward(bp, bg, cfg.heads, ctx.enc_blocks[l], dx, d_in);

    if (l > 0) {
      std::string name = "pool" + std::to_string(l);
      Matrix<T> d_pooled;
      net::linear_backward(ctx.pooled_mean[l - 1], params.ptr(name + ".w"), widths[l], d_in,
                           grad.data() + params.tensor(name + ".w").offset,
                           grad.data() + params.tensor(name + ".b").offset, d_pooled);
      const GridPoolMap& pool = ctx.topo.levels[l - 1].pool;
      Matrix<T> d_fine(int(pool.parent.size()), d_pooled.cols);
      for (int i = 0; i < d_fine.rows; ++i) {
        const T* src = d_pooled.row(int(pool.parent[i]));
        T inv = T(1) / T(pool.counts[pool.parent[i]]);
        T* dst = d_fine.row(i);
        for (int c = 0; c < d_pooled.cols; ++c) dst[c] = src[c] * inv;
      }
      dx = std::move(d_fine);
    } else {
      net::linear_backward(ctx.input, params.ptr("embed.w"), widths[0], d_in,
                           grad.data() + params.tensor("embed.w").offset,
                           grad.data() + params.tensor("embed.b").offset, dinput);
    }
  }
}

// --- MLP_GS: anchor latent -> anchor Gaussian attributes -----------------------

template <typename T>
struct DecodedAttrs {
  std::vector<Quat<T>> quat;        // unit
  std::vector<Vec3<T>> log_scale;   // clamped to [-10, 2]
  std::vector<T> alpha;             // sigmoid(opacity logit)
  std::vector<T> opacity_logit;
  std::vector<Vec3<T>> sh;          // n * sh_coeffs
  size_t size() const { return quat.size(); }
};

template <typename T>
struct AttrGrads {
  std::vector<std::array<T, 4>> quat;
  std::vector<Vec3<T>> log_scale;
  std::vector<T> alpha;
  std::vector<Vec3<T>> sh;

  void resize(size_t n, int coeffs) {
    quat.assign(n, {T(0), T(0), T(0), T(0)});
    log_scale.assign(n, Vec3<T>{});
    alpha.assign(n, T(0));
    sh.assign(n * size_t(coeffs), Vec3<T>{});
  }
};

template <typename T>
struct MlpGsCtx {
  Matrix<T> latent;  // input
  Matrix<T> pre, act, raw;
  std::vector<std::array<T, 4>> quat_prenorm;
  std::vector<T> quat_len;
};

// Two-layer GELU MLP; the raw quat output is a residual around identity and
// normalization provides the unit-norm guarantee.
template <typename T>
inline DecodedAttrs<T> mlp_gs_forward(const Matrix<T>& latent, const HeadParams<T>& params,
                                      MlpGsCtx<T>* ctx_out = nullptr) {
  const NetConfig& cfg = params.cfg;
  if (latent.cols != cfg.latent_dim)
    throw Error(ErrorCode::ShapeMismatch, "mlp_gs: latent width mismatch");
  MlpGsCtx<T> local;
  MlpGsCtx<T>& ctx = ctx_out ? *ctx_out : local;
  ctx.latent = latent;
  net::linear_forward(latent, params.ptr("mlp_gs.w1"), params.ptr("mlp_gs.b1"), cfg.h_dim,
                      ctx.pre);
  ctx.act = Matrix<T>(ctx.pre.rows, ctx.pre.cols);
  for (size_t i = 0; i < ctx.pre.v.size(); ++i) ctx.act.v[i] = net::gelu(ctx.pre.v[i]);
  net::linear_forward(ctx.act, params.ptr("mlp_gs.w2"), params.ptr("mlp_gs.b2"),
                      cfg.attr_width(), ctx.raw);

  const int n = latent.rows;
  const int coeffs = cfg.sh_coeffs();
  DecodedAttrs<T> attrs;
  attrs.quat.resize(n);
  attrs.log_scale.resize(n);
  attrs.alpha.resize(n);
  attrs.opacity_logit.resize(n);
  attrs.sh.resize(size_t(n) * coeffs);
  ctx.quat_prenorm.resize(n);
  ctx.quat_len.resize(n);
  for (int i = 0; i < n; ++i) {
    const T* r = ctx.raw.row(i);
    std::array<T, 4> pre{T(1) + r[0], r[1], r[2], r[3]};
    T len = std::sqrt(pre[0] * pre[0] + pre[1] * pre[1] + pre[2] * pre[2] + pre[3] * pre[3]);
    ctx.quat_prenorm[i] = pre;
    ctx.quat_len[i] = len;
    attrs.quat[i] = len > T(0) ? Quat<T>{pre[0] / len, pre[1] / len, pre[2] / len, pre[3] / len}
                               : Quat<T>::identity();
    for (int a = 0; a < 3; ++a) attrs.log_scale[i][a] = std::clamp(r[4 + a], T(-10), T(2));
    attrs.opacity_logit[i] = r[7];
    attrs.alpha[i] = sigmoid(r[7]);
    for (int k = 0; k < coeffs; ++k)
      attrs.sh[size_t(i) * coeffs + k] = {r[8 + 3 * k], r[8 + 3 * k + 1], r[8 + 3 * k + 2]};
  }
  return attrs;
}

template <typename T>
inline void mlp_gs_backward(const MlpGsCtx<T>& ctx, const DecodedAttrs<T>& attrs,
                            const AttrGrads<T>& d_attrs, const HeadParams<T>& params,
                            std::vector<T>& grad) {
  const NetConfig& cfg = params.cfg;
  const int n = ctx.raw.rows;
  const int coeffs = cfg.sh_coeffs();
  Matrix<T> d_raw(n, cfg.attr_width());
  for (int i = 0; i < n; ++i) {
    T* dr = d_raw.row(i);
    const T* rr = ctx.raw.row(i);
    // Quaternion normalization: dq_pre = (dq - q (q . dq)) / len.
    const auto& pre = ctx.quat_prenorm[i];
    const T len = ctx.quat_len[i];
    if (len > T(0)) {
      const auto& dq = d_attrs.quat[i];
      T q[4] = {pre[0] / len, pre[1] / len, pre[2] / len, pre[3] / len};
      T dot = q[0] * dq[0] + q[1] * dq[1] + q[2] * dq[2] + q[3] * dq[3];
      for (int k = 0; k < 4; ++k) dr[k] = (dq[k] - q[k] * dot) / len;
    }
    for (int a = 0; a < 3; ++a) {
      bool inside = rr[4 + a] > T(-10) && rr[4 + a] < T(2);
      dr[4 + a] = inside ? d_attrs.log_scale[i][a] : T(0);
    }
    const T alpha = attrs.alpha[i];
    dr[7] = d_attrs.alpha[i] * alpha * (T(1) - alpha);
    for (int k = 0; k < coeffs; ++k) {
      const Vec3<T>& ds = d_attrs.sh[size_t(i) * coeffs + k];
      dr[8 + 3 * k] = ds.x;
      dr[8 + 3 * k + 1] = ds.y;
      dr[8 + 3 * k + 2] = ds.z;
    }
  }

  Matrix<T> d_act;
  net::linear_backward(ctx.act, params.ptr("mlp_gs.w2"), cfg.attr_width(), d_raw,
                       grad.data() + params.tensor("mlp_gs.w2").offset,
                       grad.data() + params.tensor("mlp_gs.b2").offset, d_act);
  Matrix<T> d_pre(n, cfg.h_dim);
  for (size_t i = 0; i < d_pre.v.size(); ++i)
    d_pre.v[i] = d_act.v[i] * net::gelu_grad(ctx.pre.v[i]);
  Matrix<T> d_latent;
  net::linear_backward(ctx.latent, params.ptr("mlp_gs.w1"), cfg.h_dim, d_pre,
                       grad.data() + params.tensor("mlp_gs.w1").offset,
                       grad.data() + params.tensor("mlp_gs.b1").offset, d_latent);
  // d_latent stops here: the fused latent is data, not a parameter.
}

// --- MLP_grow: refined latent -> M residual tuples ------------------------------

template <typename T>
struct GrowCtx {
  Matrix<T> h;  // input
  Matrix<T> pre, act, raw;
};

template <typename T>
inline Matrix<T> mlp_grow_forward(const Matrix<T>& h, const HeadParams<T>& params,
                                  GrowCtx<T>* ctx_out = nullptr) {
  const NetConfig& cfg = params.cfg;
  if (h.cols != cfg.h_dim) throw Error(ErrorCode::ShapeMismatch, "mlp_grow: latent width mismatch");
  GrowCtx<T> local;
  GrowCtx<T>& ctx = ctx_out ? *ctx_out : local;
  ctx.h = h;
  net::linear_forward(h, params.ptr("mlp_grow.w1"), params.ptr("mlp_grow.b1"), cfg.h_dim, ctx.pre);
  ctx.act = Matrix<T>(ctx.pre.rows, ctx.pre.cols);
  for (size_t i = 0; i < ctx.pre.v.size(); ++i) ctx.act.v[i] = net::gelu(ctx.pre.v[i]);
  net::linear_forward(ctx.act, params.ptr("mlp_grow.w2"), params.ptr("mlp_grow.b2"),
                      cfg.growth * cfg.residual_width(), ctx.raw);
  return ctx.raw;
}

template <typename T>
inline void mlp_grow_backward(const GrowCtx<T>& ctx, const Matrix<T>& d_raw,
                              const HeadParams<T>& params, std::vector<T>& grad, Matrix<T>& d_h) {
  const NetConfig& cfg = params.cfg;
  Matrix<T> d_act;
  net::linear_backward(ctx.act, params.ptr("mlp_grow.w2"), cfg.growth * cfg.residual_width(),
                       d_raw, grad.data() + params.tensor("mlp_grow.w2").offset,
                       grad.data() + params.tensor("mlp_grow.b2").offset, d_act);
  Matrix<T> d_pre(ctx.pre.rows, ctx.pre.cols);
  for (size_t i = 0; i < d_pre.v.size(); ++i)
    d_pre.v[i] = d_act.v[i] * net::gelu_grad(ctx.pre.v[i]);
  net::linear_backward(ctx.h, params.ptr("mlp_grow.w1"), cfg.h_dim, d_pre,
                       grad.data() + params.tensor("mlp_grow.w1").offset,
                       grad.data() + params.tensor("mlp_grow.b1").offset, d_h);
}

// --- Opacity fusion and pruning --------------------------------------------------

// alpha_r = clamp((alpha_a + d_alpha) * (1 + tanh(s_a + d_s)), 0, 1), computed
// in activated opacity space; keep is a strict comparison against beta.
template <typename T>
inline std::pair<T, bool> fuse_opacity_and_mask(T alpha_a, T d_alpha, T s_a, T d_s, T beta) {
  T fused = (alpha_a + d_alpha) * (T(1) + std::tanh(s_a + d_s));
  T clamped = std::clamp(fused, T(0), T(1));
  return {clamped, clamped > beta};
}

// --- Refined-set assembly ---------------------------------------------------------

// Raw residual slice layout within a row of mlp_grow output.
struct ResidualLayout {
  int dmu = 0, dquat = 3, dls = 7, dalpha = 10, dsh = 11, ds;
  explicit ResidualLayout(int coeffs) { ds = 11 + 3 * coeffs; }
};

template <typename T>
struct RefineResult {
  SplatBatch<T> splats;
  std::vector<uint32_t> splat_anchor;  // per splat: source anchor
  std::vector<uint32_t> splat_slot;    // growth slot
  std::vector<uint8_t> keep;           // N*M pruning mask
  std::vector<T> alpha_r;              // N*M fused opacities (clamped)
  std::vector<T> refined_saliency;     // per anchor
  DecodedAttrs<T> attrs;
  size_t grown_total = 0;
  size_t pruned = 0;
};

template <typename T>
struct RefineCtx {
  std::vector<Vec3d> positions;
  std::vector<T> saliency;
  MlpGsCtx<T> gs;
  DecodedAttrs<T> attrs;
  Matrix<T> refiner_in;
  RefinerCtx<T> unet;
  Matrix<T> h;
  GrowCtx<T> grow;
};

// Builds the refiner input of Eq-style concatenation:
// [mu, quat, log_scale, alpha, sh, saliency].
template <typename T>
inline Matrix<T> build_refiner_input(std::span<const Vec3d> positions,
                                     std::span<const T> saliency, const DecodedAttrs<T>& attrs,
                                     const NetConfig& cfg) {
  const int n = int(positions.size());
  const int coeffs = cfg.sh_coeffs();
  Matrix<T> input(n, cfg.refiner_in_width());
  for (int i = 0; i < n; ++i) {
    T* r = input.row(i);
    int o = 0;
    r[o++] = T(positions[i].x);
    r[o++] = T(positions[i].y);
    r[o++] = T(positions[i].z);
    r[o++] = attrs.quat[i].w;
    r[o++] = attrs.quat[i].x;
    r[o++] = attrs.quat[i].y;
    r[o++] = attrs.quat[i].z;
    r[o++] = attrs.log_scale[i].x;
    r[o++] = attrs.log_scale[i].y;
    r[o++] = attrs.log_scale[i].z;
    r[o++] = attrs.alpha[i];
    for (int k = 0; k < coeffs; ++k) {
      const Vec3<T>& c = attrs.sh[size_t(i) * coeffs + k];
      r[o++] = c.x;
      r[o++] = c.y;
      r[o++] = c.z;
    }
    r[o++] = saliency[i];
  }
  return input;
}

// Full composition: mlp_gs -> refiner -> mlp_grow -> opacity fusion -> assembly.
// Every kept (anchor, slot) yields one splat whose attributes are the anchor
// attributes plus decoded residuals.
template <typename T>
inline RefineResult<T> refine_and_grow_batch(std::span<const Vec3d> positions,
                                             std::span<const T> saliency,
                                             const Matrix<T>& latent,
                                             const HeadParams<T>& params, T beta,
                                             RefineCtx<T>* ctx_out = nullptr) {
  const NetConfig& cfg = params.cfg;
  const int n = int(positions.size());
  const int m = cfg.growth;
  const int coeffs = cfg.sh_coeffs();
  const ResidualLayout lay(coeffs);

  RefineCtx<T> local;
  RefineCtx<T>& ctx = ctx_out ? *ctx_out : local;
  ctx.positions.assign(positions.begin(), positions.end());
  ctx.saliency.assign(saliency.begin(), saliency.end());

  ctx.attrs = mlp_gs_forward(latent, params, &ctx.gs);
  ctx.refiner_in = build_refiner_input<T>(positions, saliency, ctx.attrs, cfg);
  RefinerTopology topo = build_topology(positions, cfg);
  ctx.h = refiner_forward_net(ctx.refiner_in, topo, params, ctx.unet);
  Matrix<T> raw = mlp_grow_forward(ctx.h, params, &ctx.grow);

  RefineResult<T> result;
  result.attrs = ctx.attrs;
  result.keep.assign(size_t(n) * m, 0);
  result.alpha_r.assign(size_t(n) * m, T(0));
  result.refined_saliency.resize(n);
  result.splats.sh_coeffs = coeffs;
  result.grown_total = size_t(n) * m;

  for (int i = 0; i < n; ++i) {
    const T* rr = raw.row(i);
    T mean_ds = 0;
    for (int g = 0; g < m; ++g) mean_ds += rr[g * cfg.residual_width() + lay.ds];
    result.refined_saliency[i] = ctx.saliency[i] + mean_ds / T(m);

    for (int g = 0; g < m; ++g) {
      const T* s = rr + g * cfg.residual_width();
      auto [alpha_r, kept] = fuse_opacity_and_mask<T>(ctx.attrs.alpha[i], s[lay.dalpha],
                                                      ctx.saliency[i], s[lay.ds], beta);
      result.alpha_r[size_t(i) * m + g] = alpha_r;
      if (!kept) continue;
      result.keep[size_t(i) * m + g] = 1;
      result.splat_anchor.push_back(uint32_t(i));
      result.splat_slot.push_back(uint32_t(g));

      // mu + tanh-bounded offset (stays within one voxel radius).
      Vec3<T> dmu{std::tanh(s[lay.dmu]) * T(cfg.gamma), std::tanh(s[lay.dmu + 1]) * T(cfg.gamma),
                  std::tanh(s[lay.dmu + 2]) * T(cfg.gamma)};
      result.splats.mu.push_back(Vec3<T>{T(positions[i].x), T(positions[i].y),
                                         T(positions[i].z)} + dmu);

      // quat product with the residual rotation, then renormalize.
      Quat<T> r_res{T(1) + s[lay.dquat], s[lay.dquat + 1], s[lay.dquat + 2], s[lay.dquat + 3]};
      Quat<T> prod = ctx.attrs.quat[i] * r_res;
      Quat<T> qn = prod.normalized();
      result.splats.quat.push_back({qn.w, qn.x, qn.y, qn.z});

      Vec3<T> ls = ctx.attrs.log_scale[i] +
                   Vec3<T>{s[lay.dls], s[lay.dls + 1], s[lay.dls + 2]};
      for (int a = 0; a < 3; ++a) ls[a] = std::clamp(ls[a], T(-12), T(3));
      result.splats.log_scale.push_back(ls);
      result.splats.alpha.push_back(alpha_r);
      for (int k = 0; k < coeffs; ++k) {
        const Vec3<T>& base = ctx.attrs.sh[size_t(i) * coeffs + k];
        result.splats.sh.push_back(base + Vec3<T>{s[lay.dsh + 3 * k], s[lay.dsh + 3 * k + 1],
                                                  s[lay.dsh + 3 * k + 2]});
      }
    }
  }
  result.pruned = result.grown_total - result.splats.size();
  return result;
}

// Reverse pass of refine_and_grow_batch: splat gradients flow into residual
// raws, anchor attributes (two paths: assembly and the refiner input), and
// every parameter tensor.
template <typename T>
inline void refine_and_grow_backward(const RefineCtx<T>& ctx, const RefineResult<T>& result,
                                     const SplatGrads<T>& d_splats, const HeadParams<T>& params,
                                     std::vector<T>& grad) {
  const NetConfig& cfg = params.cfg;
  const int n = int(ctx.positions.size());
  const int m = cfg.growth;
  const int coeffs = cfg.sh_coeffs();
  const ResidualLayout lay(coeffs);
  const Matrix<T>& raw = ctx.grow.raw;

  Matrix<T> d_raw(n, cfg.growth * cfg.residual_width());
  AttrGrads<T> d_attrs;
  d_attrs.resize(n, coeffs);

  for (size_t sp = 0; sp < result.splats.size(); ++sp) {
    const int i = int(result.splat_anchor[sp]);
    const int g = int(result.splat_slot[sp]);
    const T* s = raw.row(i) + g * cfg.residual_width();
    T* ds_out = d_raw.row(i) + g * cfg.residual_width();

    // mu
    for (int a = 0; a < 3; ++a) {
      T th = std::tanh(s[lay.dmu + a]);
      ds_out[lay.dmu + a] += d_splats.mu[sp][a] * T(cfg.gamma) * (T(1) - th * th);
    }

    // quat: splat q = normalize(q_a * r).
    Quat<T> q_a = ctx.attrs.quat[i];
    Quat<T> r_res{T(1) + s[lay.dquat], s[lay.dquat + 1], s[lay.dquat + 2], s[lay.dquat + 3]};
    Quat<T> prod = q_a * r_res;
    T len = prod.norm();
    if (len > T(0)) {
      const auto& dq = d_splats.quat[sp];
      T q[4] = {prod.w / len, prod.x / len, prod.y / len, prod.z / len};
      T dot = q[0] * dq[0] + q[1] * dq[1] + q[2] * dq[2] + q[3] * dq[3];
      Quat<T> d_prod{(dq[0] - q[0] * dot) / len, (dq[1] - q[1] * dot) / len,
                     (dq[2] - q[2] * dot) / len, (dq[3] - q[3] * dot) / len};
      // p = a*b: dL/da = dL/dp * conj(b); dL/db = conj(a) * dL/dp.
      Quat<T> conj_r{r_res.w, -r_res.x, -r_res.y, -r_res.z};
      Quat<T> conj_a{q_a.w, -q_a.x, -q_a.y, -q_a.z};
      Quat<T> d_qa = d_prod * conj_r;
      Quat<T> d_r = conj_a * d_prod;
      d_attrs.quat[i][0] += d_qa.w;
      d_attrs.quat[i][1] += d_qa.x;
      d_attrs.quat[i][2] += d_qa.y;
      d_attrs.quat[i][3] += d_qa.z;
      ds_out[lay.dquat] += d_r.w;
      ds_out[lay.dquat + 1] += d_r.x;
      ds_out[lay.dquat + 2] += d_r.y;
      ds_out[lay.dquat + 3] += d_r.z;
    }

    // log_scale (clamped sum)
    for (int a = 0; a < 3; ++a) {
      T summed = ctx.attrs.log_scale[i][a] + s[lay.dls + a];
      if (summed > T(-12) && summed < T(3)) {
        d_attrs.log_scale[i][a] += d_splats.log_scale[sp][a];
        ds_out[lay.dls + a] += d_splats.log_scale[sp][a];
      }
    }

    // opacity fusion
    {
      T inner = ctx.attrs.alpha[i] + s[lay.dalpha];
      T th = std::tanh(ctx.saliency[i] + s[lay.ds]);
      T fused = inner * (T(1) + th);
      if (fused > T(0) && fused < T(1)) {
        T d = d_splats.alpha[sp];
        T d_inner = d * (T(1) + th);
        T d_th = d * inner;
        d_attrs.alpha[i] += d_inner;
        ds_out[lay.dalpha] += d_inner;
        ds_out[lay.ds] += d_th * (T(1) - th * th);
      }
    }

    // sh
    for (int k = 0; k < coeffs; ++k) {
      const Vec3<T>& d = d_splats.sh[sp * size_t(coeffs) + k];
      d_attrs.sh[size_t(i) * coeffs + k] += d;
      ds_out[lay.dsh + 3 * k] += d.x;
      ds_out[lay.dsh + 3 * k + 1] += d.y;
      ds_out[lay.dsh + 3 * k + 2] += d.z;
    }
  }

  // Residual raws -> grow MLP -> refined latents.
  Matrix<T> d_h;
  mlp_grow_backward(ctx.grow, d_raw, params, grad, d_h);

  // Refined latents -> U-Net -> refiner input.
  Matrix<T> d_input;
  refiner_backward_net(ctx.unet, params, d_h, grad, d_input);

  // Refiner input slices feed the anchor attributes a second time.
  for (int i = 0; i < n; ++i) {
    const T* r = d_input.row(i);
    int o = 3;  // positions are data
    d_attrs.quat[i][0] += r[o++];
    d_attrs.quat[i][1] += r[o++];
    d_attrs.quat[i][2] += r[o++];
    d_attrs.quat[i][3] += r[o++];
    d_attrs.log_scale[i].x += r[o++];
    d_attrs.log_scale[i].y += r[o++];
    d_attrs.log_scale[i].z += r[o++];
    d_attrs.alpha[i] += r[o++];
    for (int k = 0; k < coeffs; ++k) {
      d_attrs.sh[size_t(i) * coeffs + k].x += r[o++];
      d_attrs.sh[size_t(i) * coeffs + k].y += r[o++];
      d_attrs.sh[size_t(i) * coeffs + k].z += r[o++];
    }
    // saliency slice is data
  }

  mlp_gs_backward(ctx.gs, ctx.attrs, d_attrs, params, grad);
}

// --- Anchor-level public API -------------------------------------------------------

struct RefineStats {
  size_t grown_total = 0;
  size_t pruned = 0;
};

// Inference-side composition on fused anchors. Decoded attributes and the
// refined saliency are written back to each anchor's `decoded` slot; the
// fusion sums stay untouched.
inline std::vector<Gaussian3D> refine_and_grow(std::vector<Anchor>& anchors,
                                               const HeadParams<double>& params, double beta,
                                               RefineStats* stats = nullptr) {
  if (anchors.empty()) {
    if (stats) *stats = {};
    return {};
  }
  const NetConfig& cfg = params.cfg;
  const int n = int(anchors.size());
  std::vector<Vec3d> positions(n);
  std::vector<double> saliency(n);
  Matrix<double> latent(n, cfg.latent_dim);
  for (int i = 0; i < n; ++i) {
    positions[i] = anchors[i].position();
    saliency[i] = anchors[i].saliency();
    if (int(anchors[i].sum_sf.size()) != cfg.latent_dim)
      throw Error(ErrorCode::ConfigMismatch, "anchor latent width differs from checkpoint");
    std::vector<double> f = anchors[i].latent();
    std::copy(f.begin(), f.end(), latent.row(i));
  }

  RefineResult<double> result =
      refine_and_grow_batch<double>(positions, saliency, latent, params, beta);

  const int coeffs = cfg.sh_coeffs();
  for (int i = 0; i < n; ++i) {
    DecodedAnchor dec;
    dec.quat = result.attrs.quat[i];
    dec.log_scale = result.attrs.log_scale[i];
    dec.opacity_logit = result.attrs.opacity_logit[i];
    dec.sh.assign(result.attrs.sh.begin() + size_t(i) * coeffs,
                  result.attrs.sh.begin() + size_t(i + 1) * coeffs);
    dec.refined_saliency = result.refined_saliency[i];
    anchors[i].decoded = std::move(dec);
  }

  std::vector<Gaussian3D> out;
  out.reserve(result.splats.size());
  for (size_t sp = 0; sp < result.splats.size(); ++sp) {
    Gaussian3D g;
    g.mu = result.splats.mu[sp];
    g.quat = {result.splats.quat[sp][0], result.splats.quat[sp][1], result.splats.quat[sp][2],
              result.splats.quat[sp][3]};
    g.log_scale = result.splats.log_scale[sp];
    g.opacity_logit = logit(std::clamp(result.splats.alpha[sp], 1e-7, 1.0 - 1e-7));
    g.sh.assign(result.splats.sh.begin() + sp * size_t(coeffs),
                result.splats.sh.begin() + (sp + 1) * size_t(coeffs));
    out.push_back(std::move(g));
  }
  if (stats) {
    stats->grown_total = result.grown_total;
    stats->pruned = result.pruned;
  }
  return out;
}

}  // namespace salon
