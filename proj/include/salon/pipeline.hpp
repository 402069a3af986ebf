// Online orchestration: per-frame pass from ingestion through frustum
// extraction, merging, refinement, and global-state update, with timing and
// census instrumentation.
#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include "salon/core.hpp"
#include "salon/ingest.hpp"
#include "salon/quantize.hpp"
#include "salon/refiner.hpp"

namespace salon {

struct PipelineConfig {
  double gamma = 0.01;
  double beta = 0.5;
  FrustumParams frustum;
};

struct FrameCensus {
  int64_t frame_id = 0;
  size_t new_points = 0;
  size_t new_anchors = 0;
  size_t extracted = 0;
  size_t merged_store_size = 0;
  size_t grown_gaussians = 0;
  size_t pruned = 0;
  double ms_quantize = 0;
  double ms_refine = 0;
  double ms_total = 0;
};

struct PipelineState {
  AnchorStore store;
  HeadParams<double> params;
  PipelineConfig config;
  std::vector<FrameCensus> census;

  PipelineState(HeadParams<double> p, PipelineConfig c) : params(std::move(p)), config(c) {
    store.gamma = config.gamma;
  }
};

// Converts one frame's grids into fused anchors at the given voxel size.
// Saliency logits pass through softplus so fusion weights stay positive.
inline std::vector<Anchor> quantize_pixel_frame(const PixelFrame& frame, double gamma) {
  frame.validate();
  const int W = frame.width(), H = frame.height(), C = frame.latent_dim();
  std::vector<Vec3d> xs(size_t(W) * H);
  std::vector<double> ss(size_t(W) * H);
  std::vector<double> fs(size_t(W) * H * C);
  size_t idx = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x, ++idx) {
      const float* pm = frame.pointmap_world.at(x, y);
      xs[idx] = {pm[0], pm[1], pm[2]};
      ss[idx] = softplus(double(frame.saliency_logit.at(x, y)[0]));
      const float* lat = frame.latent.at(x, y);
      for (int c = 0; c < C; ++c) fs[idx * C + c] = lat[c];
    }
  std::vector<FusionPoint> points(xs.size());
  for (size_t i = 0; i < xs.size(); ++i)
    points[i] = {xs[i], ss[i], std::span<const double>(fs.data() + i * C, size_t(C))};
  return quantize_frame(points, gamma);
}

namespace detail {
inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

// One incremental update: quantize the frame, extract the near-frustum part
// of the global store, merge, refine the merged set, and fold it back with
// refined decoded attributes attached. Fusion sums are the authoritative
// state; refinement outputs live in the anchors' decoded slots.
inline std::vector<Gaussian3D> process_frame(PipelineState& state, const PixelFrame& frame) {
  auto t_start = std::chrono::steady_clock::now();
  FrameCensus census;
  census.frame_id = frame.frame_id;
  census.new_points = size_t(frame.width()) * frame.height();

  auto t_quant = std::chrono::steady_clock::now();
  std::vector<Anchor> fresh = quantize_pixel_frame(frame, state.config.gamma);
  census.new_anchors = fresh.size();
  census.ms_quantize = detail::ms_since(t_quant);

  std::vector<Anchor> extracted = state.store.frustum_extract(frame.camera, state.config.frustum);
  census.extracted = extracted.size();

  AnchorStore work;
  work.gamma = state.config.gamma;
  work.merge(std::move(extracted), state.config.gamma);
  work.merge(std::move(fresh), state.config.gamma);
  std::vector<Anchor> merged = work.sorted_anchors();

  auto t_refine = std::chrono::steady_clock::now();
  RefineStats stats;
  std::vector<Gaussian3D> gaussians =
      refine_and_grow(merged, state.params, state.config.beta, &stats);
  census.ms_refine = detail::ms_since(t_refine);
  census.grown_gaussians = stats.grown_total;
  census.pruned = stats.pruned;

  state.store.merge(std::move(merged), state.config.gamma);
  state.store.points_absorbed += census.new_points;
  census.merged_store_size = state.store.size();
  census.ms_total = detail::ms_since(t_start);
  state.census.push_back(census);
  return gaussians;
}

struct ReconstructionResult {
  std::vector<Gaussian3D> gaussians;
  std::vector<FrameCensus> census;
  size_t anchor_count = 0;
  size_t total_pixel_gaussians = 0;
};

// Folds process_frame over a sequence, then assembles the final refined set
// chunked per view frustum (each anchor refined once, in the first view that
// sees it; anchors outside every frustum form a final chunk).
inline ReconstructionResult reconstruct_sequence(PipelineState& state,
                                                 const std::vector<PixelFrame>& frames) {
  if (frames.empty()) throw Error(ErrorCode::InvalidArgument, "reconstruct: no frames");
  ReconstructionResult result;
  for (const PixelFrame& frame : frames) {
    process_frame(state, frame);
    result.total_pixel_gaussians += size_t(frame.width()) * frame.height();
  }

  std::vector<Anchor> holding;
  for (const PixelFrame& frame : frames) {
    std::vector<Anchor> chunk = state.store.frustum_extract(frame.camera, state.config.frustum);
    if (chunk.empty()) continue;
    std::vector<Gaussian3D> g = refine_and_grow(chunk, state.params, state.config.beta);
    result.gaussians.insert(result.gaussians.end(), g.begin(), g.end());
    holding.insert(holding.end(), std::make_move_iterator(chunk.begin()),
                   std::make_move_iterator(chunk.end()));
  }
  std::vector<Anchor> leftovers = state.store.sorted_anchors();
  if (!leftovers.empty()) {
    state.store.anchors.clear();
    std::vector<Gaussian3D> g = refine_and_grow(leftovers, state.params, state.config.beta);
    result.gaussians.insert(result.gaussians.end(), g.begin(), g.end());
    holding.insert(holding.end(), std::make_move_iterator(leftovers.begin()),
                   std::make_move_iterator(leftovers.end()));
  }
  state.store.merge(std::move(holding), state.config.gamma);

  result.census = state.census;
  result.anchor_count = state.store.size();
  return result;
}

inline void write_census_csv(const std::vector<FrameCensus>& census, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::MalformedFile, "cannot write census: " + path);
  out << "frame_id,new_points,new_anchors,extracted,merged_store_size,grown_gaussians,pruned,"
         "ms_quantize,ms_refine,ms_total\n";
  for (const FrameCensus& c : census)
    out << c.frame_id << ',' << c.new_points << ',' << c.new_anchors << ',' << c.extracted << ','
        << c.merged_store_size << ',' << c.grown_gaussians << ',' << c.pruned << ','
        << c.ms_quantize << ',' << c.ms_refine << ',' << c.ms_total << '\n';
}

}  // namespace salon
