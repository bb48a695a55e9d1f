#pragma once

// Spatial-temporal weighting adaptor. Each head's attention is sliced into a
// spatial branch (query frame == key frame) and a temporal branch (all other
// frames), each softmax-normalized within its own key set. Branch features
// receive the projected motion descriptor and are blended by a per-video gate.

#include <cmath>
#include <cstdint>
#include <map>
#include <tuple>
#include <string>
#include <vector>

#include "devit/depth.hpp"
#include "devit/mppa.hpp"
#include "devit/patch.hpp"

namespace devit {

enum class Branch { spatial, temporal };

inline KeyMask branch_mask(const PatchGeometry& g, Branch b) {
  const std::size_t N = g.count(), per = g.per_frame();
  thread_local std::map<std::tuple<std::size_t, std::size_t, bool>, KeyMask> cache;
  const auto key = std::make_tuple(g.frames, per, b == Branch::spatial);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto m = std::make_shared<std::vector<std::uint8_t>>(N * N, 0);
  for (std::size_t q = 0; q < N; ++q)
    for (std::size_t k = 0; k < N; ++k) {
      const bool same = q / per == k / per;
      (*m)[q * N + k] = (b == Branch::spatial) == same ? 1 : 0;
    }
  cache.emplace(key, m);
  return m;
}

/// Per-frame block of a branch map: spatial [T, Np, Np], temporal [T, Np, (T-1)Np].
inline Tensor branch_blocks(const AttentionMap& map, const PatchGeometry& g, Branch b) {
  const std::size_t T = g.frames, Np = g.per_frame(), N = g.count();
  const std::size_t cols = b == Branch::spatial ? Np : (T - 1) * Np;
  Tensor out({T, Np, cols});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < Np; ++i) {
      const std::size_t q = t * Np + i;
      std::size_t j = 0;
      for (std::size_t k = 0; k < N; ++k)
        if ((*map.mask)[q * N + k]) out[(t * Np + i) * cols + j++] = map.scores[q * N + k];
    }
  return out;
}

struct HeadInputs {
  PatchSet query;
  AlignedKV aligned;
};

struct HeadBranches {
  Tensor spatial;   // [T, c_h, H, W]
  Tensor temporal;  // [T, c_h, H, W]; undefined when T < 2
  AttentionMap spatial_map;
  AttentionMap temporal_map;
  PatchGeometry geom;
};

inline HeadBranches sta_head(const HeadInputs& in, const MppaOptions& opt = {}) {
  const PatchGeometry& g = in.query.geom;
  Tensor attn = attention_logits(in.query, in.aligned.key, opt);
  HeadBranches hb;
  hb.geom = g;
  auto run = [&](Branch b, Tensor& out, AttentionMap& map) {
    KeyMask mask = branch_mask(g, b);
    Tensor alpha = masked_softmax_rows(attn, mask);
    out = merge_patches(aggregate_values(alpha, in.aligned.value.tokens), g.frames, g.grid);
    map = {alpha, attn, mask};
  };
  run(Branch::spatial, hb.spatial, hb.spatial_map);
  if (g.frames >= 2) run(Branch::temporal, hb.temporal, hb.temporal_map);
  return hb;
}

/// Two-layer perceptron on theta' producing the (spatial, temporal) logits.
/// The output layer starts at zero, so a fresh gate weighs both branches 0.5.
struct GateWeights {
  Tensor w1, b1, w2, b2;

  std::vector<Tensor*> parameters() { return {&w1, &b1, &w2, &b2}; }

  template <class Rng>
  static GateWeights init(std::size_t motion_dim, std::size_t hidden, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(motion_dim));
    return {Tensor::uniform({hidden, motion_dim}, rng, -bound, bound), Tensor::zeros({hidden}),
            Tensor::zeros({2, hidden}), Tensor::zeros({2})};
  }
};

struct GateResult {
  Tensor fused;
  Tensor w_spatial;   // [1]
  Tensor w_temporal;  // [1]
};

inline Tensor gate_weights(const Tensor& theta_prime, const GateWeights& gate) {
  Tensor h = tanh(linear(theta_prime, gate.w1, gate.b1));
  return softmax(linear(h, gate.w2, gate.b2), 1);
}

inline GateResult gate_fuse(const Tensor& fs, const Tensor& ft, const Tensor& theta_prime, const GateWeights& gate) {
  if (fs.shape() != ft.shape())
    throw ShapeError("gate_fuse: branch shapes differ " + shape_str(fs.shape()) + " vs " + shape_str(ft.shape()));
  Tensor w = reshape(gate_weights(theta_prime, gate), {2});
  Tensor ws = slice(w, 0, 0, 1), wt = slice(w, 0, 1, 1);
  return {add(scale_by(fs, ws), scale_by(ft, wt)), ws, wt};
}

struct StaWeights {
  Tensor motion_proj;  // [c, d_m]
  GateWeights gate;

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> p{&motion_proj};
    for (Tensor* t : gate.parameters()) p.push_back(t);
    return p;
  }

  template <class Rng>
  static StaWeights init(std::size_t channels, std::size_t motion_dim, Rng& rng, std::size_t hidden = 16) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(motion_dim));
    return {Tensor::uniform({channels, motion_dim}, rng, -bound, bound), GateWeights::init(motion_dim, hidden, rng)};
  }
};

struct StaOutput {
  Tensor fused;  // [T, c, H, W]
  Tensor spatial;
  Tensor temporal;  // undefined when T < 2
  Tensor w_spatial;
  Tensor w_temporal;
  std::vector<HeadBranches> heads;
  bool single_frame_fallback = false;
};

/// Runs every head, concatenates head channels, adds the motion encoding and
/// fuses the branches. With T < 2 the temporal branch does not exist and the
/// spatial branch passes through with w_s = 1.
inline StaOutput sta_forward(const std::vector<HeadInputs>& heads, const Tensor& theta_prime, const StaWeights& w,
                             const MppaOptions& opt = {}) {
  if (heads.empty()) throw std::invalid_argument("sta_forward: no heads");
  StaOutput out;
  std::vector<Tensor> fs, ft;
  for (const HeadInputs& h : heads) {
    out.heads.push_back(sta_head(h, opt));
    fs.push_back(out.heads.back().spatial);
    if (out.heads.back().temporal.defined()) ft.push_back(out.heads.back().temporal);
  }
  Tensor spatial = fs.size() == 1 ? fs[0] : concat(fs, 1);
  if (spatial.dim(1) != w.motion_proj.dim(0))
    throw ShapeError("sta_forward: motion projection expects " + std::to_string(w.motion_proj.dim(0)) +
                     " channels, heads produce " + std::to_string(spatial.dim(1)));
  Tensor motion = reshape(linear(theta_prime, w.motion_proj), {w.motion_proj.dim(0)});
  out.spatial = add_channel_bias(spatial, motion);
  if (ft.empty()) {
    out.single_frame_fallback = true;
    out.fused = out.spatial;
    out.w_spatial = Tensor::scalar(1.0);
    out.w_temporal = Tensor::scalar(0.0);
    return out;
  }
  out.temporal = add_channel_bias(ft.size() == 1 ? ft[0] : concat(ft, 1), motion);
  GateResult gr = gate_fuse(out.spatial, out.temporal, theta_prime, w.gate);
  out.fused = gr.fused;
  out.w_spatial = gr.w_spatial;
  out.w_temporal = gr.w_temporal;
  return out;
}

// ---------------------------------------------------------------- FLOPs

struct FlopsLayer {
  std::size_t kernel = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
};

struct FlopsConfig {
  std::size_t frames = 5;           // n in the complexity expression
  std::size_t height = 60;          // feature map size
  std::size_t width = 108;
  std::vector<std::size_t> patches{4, 9, 36, 144};  // N_p per head
  std::vector<FlopsLayer> layers;   // D convolutional layers inside the attention stack
};

struct FlopsReport {
  double attention_spatial = 0.0;
  double attention_temporal = 0.0;
  std::vector<double> conv_per_layer;  // n * k^2 * HW * C_{l-1} * C_l, once per branch term
  double conv = 0.0;
  double total = 0.0;
  std::vector<std::uint64_t> spatial_entries;   // per head: T * Np^2
  std::vector<std::uint64_t> temporal_entries;  // per head: T * Np * (T-1) * Np
  std::uint64_t parameters = 0;
};

/// Evaluates the complexity expression
///   sum_l [(HW/Np)^2 (Np C_l) + n k_l^2 HW C_{l-1} C_l]
/// + sum_l [n (HW/Np)(n-1)(HW/Np)(Np C_l) + n k_l^2 HW C_{l-1} C_l]
/// with the attention terms summed over heads, each head owning C_l / heads
/// channels.
inline FlopsReport flops_estimate(const FlopsConfig& cfg) {
  if (cfg.patches.empty() || cfg.frames == 0) throw std::invalid_argument("flops_estimate: empty configuration");
  FlopsReport r;
  const double n = static_cast<double>(cfg.frames);
  const double hw = static_cast<double>(cfg.height * cfg.width);
  const double heads = static_cast<double>(cfg.patches.size());
  for (const FlopsLayer& l : cfg.layers) {
    const double cl = static_cast<double>(l.out_channels) / heads;
    for (std::size_t np_i : cfg.patches) {
      const double np = static_cast<double>(np_i);
      const double tok = hw / np;
      r.attention_spatial += tok * tok * (np * cl);
      r.attention_temporal += n * tok * (n - 1.0) * tok * (np * cl);
    }
    const double conv = n * static_cast<double>(l.kernel * l.kernel) * hw * static_cast<double>(l.in_channels) *
                        static_cast<double>(l.out_channels);
    r.conv_per_layer.push_back(2.0 * conv);
    r.conv += 2.0 * conv;
  }
  for (std::size_t np : cfg.patches) {
    r.spatial_entries.push_back(cfg.frames * np * np);
    r.temporal_entries.push_back(cfg.frames * np * (cfg.frames - 1) * np);
  }
  r.total = r.attention_spatial + r.attention_temporal + r.conv;
  return r;
}

}  // namespace devit
