#pragma once

// Frame feature maps <-> patch tokens.
//
// Token layout is frame-major, then row-major over the n x n patch raster:
// token (t, py, px) lives at index t*n*n + py*n + px.

#include <memory>
#include <string>
#include <vector>

#include "devit/ops.hpp"
#include "devit/tensor.hpp"

namespace devit {

enum class Role { query, key, value };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::query: return "query";
    case Role::key: return "key";
    case Role::value: return "value";
  }
  return "?";
}

struct PatchGeometry {
  std::size_t frames = 0;
  std::size_t grid = 0;  // n; each frame holds n*n patches
  std::size_t channels = 0;
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;

  std::size_t per_frame() const { return grid * grid; }
  std::size_t count() const { return frames * grid * grid; }
  std::size_t area() const { return patch_h * patch_w; }
  bool operator==(const PatchGeometry&) const = default;
};

struct PatchSet {
  Tensor tokens;  // [N, c, h_p, w_p]
  Tensor valid;   // [N, 1, h_p, w_p], entries in [0, 1]
  PatchGeometry geom;
  Role role = Role::query;
};

struct HeadConfig {
  std::vector<std::size_t> grids{2, 3, 6, 12};

  std::size_t heads() const { return grids.size(); }

  std::size_t head_channels(std::size_t c) const {
    if (grids.empty() || c % grids.size() != 0)
      throw ShapeError("channel count " + std::to_string(c) + " does not split evenly over " +
                       std::to_string(grids.size()) + " heads");
    return c / grids.size();
  }

  /// Coarsest head is the one with the fewest patches per frame.
  std::size_t coarsest() const {
    std::size_t best = 0;
    for (std::size_t i = 1; i < grids.size(); ++i)
      if (grids[i] < grids[best]) best = i;
    return best;
  }

  void validate(std::size_t c, std::size_t h, std::size_t w) const {
    head_channels(c);
    for (std::size_t n : grids)
      if (n == 0 || h % n != 0 || w % n != 0)
        throw ShapeError("patch grid n=" + std::to_string(n) + " does not divide feature size h=" + std::to_string(h) +
                         ", w=" + std::to_string(w));
  }
};

/// Area-average a [T, 1, H, W] hole mask down by `factor` and mark any cell
/// that touches a hole pixel as a hole (1).
inline Tensor downsample_mask(const Tensor& mask, std::size_t factor) {
  if (mask.rank() != 4 || mask.dim(1) != 1) throw ShapeError("downsample_mask: mask must be [T,1,H,W]");
  if (factor == 0 || mask.dim(2) % factor || mask.dim(3) % factor)
    throw ShapeError("downsample_mask: factor " + std::to_string(factor) + " does not divide mask size " +
                     shape_str(mask.shape()));
  const std::size_t T = mask.dim(0), H = mask.dim(2), W = mask.dim(3), h = H / factor, w = W / factor;
  Tensor out({T, 1, h, w});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) acc += mask[(t * H + y * factor + dy) * W + x * factor + dx];
        out[(t * h + y) * w + x] = acc / static_cast<double>(factor * factor) > 0.0 ? 1.0 : 0.0;
      }
  return out;
}

namespace detail {

inline std::shared_ptr<std::vector<std::size_t>> patch_map(std::size_t T, std::size_t C, std::size_t H, std::size_t W,
                                                           std::size_t n) {
  const std::size_t hp = H / n, wp = W / n;
  auto map = std::make_shared<std::vector<std::size_t>>(T * C * H * W);
  std::size_t i = 0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t py = 0; py < n; ++py)
      for (std::size_t px = 0; px < n; ++px)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t y = 0; y < hp; ++y)
            for (std::size_t x = 0; x < wp; ++x) (*map)[i++] = ((t * C + c) * H + py * hp + y) * W + px * wp + x;
  return map;
}

inline std::shared_ptr<std::vector<std::size_t>> inverse_map(const std::vector<std::size_t>& m) {
  auto inv = std::make_shared<std::vector<std::size_t>>(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) (*inv)[m[i]] = i;
  return inv;
}

}  // namespace detail

/// Splits [T, C, H, W] into n x n non-overlapping patches per frame.
inline Tensor split_patches(const Tensor& feat, std::size_t n) {
  if (feat.rank() != 4) throw ShapeError("split_patches: features must be [T,C,H,W], got " + shape_str(feat.shape()));
  const std::size_t T = feat.dim(0), C = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
  if (n == 0 || H % n || W % n)
    throw ShapeError("patch grid n=" + std::to_string(n) + " does not divide h=" + std::to_string(H) +
                     ", w=" + std::to_string(W));
  return remap(feat, {T * n * n, C, H / n, W / n}, detail::patch_map(T, C, H, W, n));
}

/// Inverse of split_patches.
inline Tensor merge_patches(const Tensor& tokens, std::size_t frames, std::size_t n) {
  if (tokens.rank() != 4 || frames == 0 || n == 0 || tokens.dim(0) != frames * n * n)
    throw ShapeError("merge_patches: " + shape_str(tokens.shape()) + " is not " + std::to_string(frames) + " frames of " +
                     std::to_string(n) + "x" + std::to_string(n) + " patches");
  const std::size_t C = tokens.dim(1), H = tokens.dim(2) * n, W = tokens.dim(3) * n;
  auto fwd = detail::patch_map(frames, C, H, W, n);
  return remap(tokens, {frames, C, H, W}, detail::inverse_map(*fwd));
}

/// Tokenizes features. `mask` is a [T, 1, h', w'] hole mask whose size is an
/// integer multiple of the feature size; it is downsampled when larger.
inline PatchSet extract_patches(const Tensor& feat, const Tensor& mask, std::size_t n, Role role = Role::query) {
  if (feat.rank() != 4) throw ShapeError("extract_patches: features must be [T,C,H,W], got " + shape_str(feat.shape()));
  const std::size_t T = feat.dim(0), C = feat.dim(1), H = feat.dim(2), W = feat.dim(3);
  if (n == 0 || H % n || W % n)
    throw ShapeError("patch grid n=" + std::to_string(n) + " does not divide h=" + std::to_string(H) +
                     ", w=" + std::to_string(W));
  if (mask.rank() != 4 || mask.dim(0) != T || mask.dim(1) != 1 || mask.dim(2) % H || mask.dim(3) % W ||
      mask.dim(2) / H != mask.dim(3) / W)
    throw ShapeError("extract_patches: mask " + shape_str(mask.shape()) + " incompatible with features " +
                     shape_str(feat.shape()));
  Tensor m = mask.dim(2) == H ? mask.detach() : downsample_mask(mask, mask.dim(2) / H);
  Tensor valid({T, 1, H, W});
  for (std::size_t i = 0; i < valid.numel(); ++i) valid[i] = 1.0 - m[i];

  PatchSet p;
  p.tokens = split_patches(feat, n);
  {
    NoGradGuard ng;
    p.valid = split_patches(valid, n);
  }
  p.geom = {T, n, C, H / n, W / n};
  p.role = role;
  return p;
}

inline Tensor reassemble(const PatchSet& p) {
  const auto& g = p.geom;
  if (!p.tokens.defined() || p.tokens.rank() != 4 || p.tokens.dim(0) != g.count() || p.tokens.dim(1) != g.channels ||
      p.tokens.dim(2) != g.patch_h || p.tokens.dim(3) != g.patch_w)
    throw ShapeError("reassemble: tokens " + (p.tokens.defined() ? shape_str(p.tokens.shape()) : std::string("<none>")) +
                     " inconsistent with geometry T=" + std::to_string(g.frames) + " n=" + std::to_string(g.grid));
  return merge_patches(p.tokens, g.frames, g.grid);
}

struct EmbedWeights {
  Tensor wq, bq, wk, bk, wv, bv;  // [c, c, 1, 1] kernels, [c] biases
};

struct QKV {
  Tensor q, k, v;
};

/// 1x1 convolutions into query/key/value spaces.
inline QKV embed_qkv(const Tensor& feat, const EmbedWeights& w) {
  if (feat.rank() != 4) throw ShapeError("embed_qkv: features must be [T,C,H,W]");
  for (const Tensor* k : {&w.wq, &w.wk, &w.wv})
    if (k->rank() != 4 || k->dim(2) != 1 || k->dim(3) != 1 || k->dim(1) != feat.dim(1))
      throw ShapeError("embed_qkv: channel mismatch, features have " + std::to_string(feat.dim(1)) +
                       " channels but kernel is " + shape_str(k->shape()));
  return {conv2d(feat, w.wq, w.bq), conv2d(feat, w.wk, w.bk), conv2d(feat, w.wv, w.bv)};
}

}  // namespace devit
