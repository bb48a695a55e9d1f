#pragma once

// Deformed patch alignment: a small estimator predicts one 2x3 affine matrix
// per (query patch, key patch) pair, key/value tokens and their valid maps are
// warped onto the query lattice, and the set of matrices is pooled into a
// motion descriptor for the spatial-temporal gate.

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "devit/ops.hpp"
#include "devit/patch.hpp"

namespace devit {

struct AffineParams {
  Tensor theta;  // [P, 2, 3], row p = pair (query q, key k) at p = q * keys + k
  std::size_t queries = 0;
  std::size_t keys = 0;

  std::size_t pairs() const { return queries * keys; }
  std::size_t query_of(std::size_t p) const { return p / keys; }
  std::size_t key_of(std::size_t p) const { return p % keys; }
};

inline const std::array<double, 6>& identity_affine() {
  static const std::array<double, 6> id{1, 0, 0, 0, 1, 0};
  return id;
}

enum class EstimatorInput { concat, correlation };

/// Two stride-2 3x3 convolutions, global average pooling and a linear head
/// producing the six affine parameters. The head starts at zero weight with
/// identity bias, so a fresh estimator outputs the identity for every pair.
struct EstimatorWeights {
  EstimatorInput input = EstimatorInput::concat;
  Tensor conv1_w, conv1_b, conv2_w, conv2_b, fc_w, fc_b;

  std::vector<Tensor*> parameters() { return {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &fc_w, &fc_b}; }

  template <class Rng>
  static EstimatorWeights init(std::size_t channels, std::size_t patch_h, std::size_t patch_w, Rng& rng,
                               EstimatorInput input = EstimatorInput::concat) {
    const std::size_t in = input == EstimatorInput::concat ? 2 * channels : patch_h * patch_w;
    const std::size_t mid = channels, out = std::max<std::size_t>(channels / 2, 1);
    auto kaiming = [&](Shape s, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      return Tensor::uniform(std::move(s), rng, -bound, bound);
    };
    EstimatorWeights w;
    w.input = input;
    w.conv1_w = kaiming({mid, in, 3, 3}, in * 9);
    w.conv1_b = Tensor::zeros({mid});
    w.conv2_w = kaiming({out, mid, 3, 3}, mid * 9);
    w.conv2_b = Tensor::zeros({out});
    w.fc_w = Tensor::zeros({6, out});
    w.fc_b = Tensor({6}, std::vector<double>(identity_affine().begin(), identity_affine().end()));
    return w;
  }
};

namespace detail {

/// Per-pair correlation volume: out[p, j, y, x] = <q[qi[p], :, y, x], k[ki[p], :, j]> / C
/// where j runs over key pixels.
inline Tensor pair_correlation(const Tensor& q, const Tensor& k, std::shared_ptr<const std::vector<std::size_t>> qi,
                               std::shared_ptr<const std::vector<std::size_t>> ki) {
  const std::size_t P = qi->size(), C = q.dim(1), S = q.dim(2) * q.dim(3);
  const double inv = 1.0 / static_cast<double>(C);
  std::vector<double> out(P * S * S);
  for (std::size_t p = 0; p < P; ++p) {
    const double* qp = q.data().data() + (*qi)[p] * C * S;
    const double* kp = k.data().data() + (*ki)[p] * C * S;
    for (std::size_t j = 0; j < S; ++j)
      for (std::size_t s = 0; s < S; ++s) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) acc += qp[c * S + s] * kp[c * S + j];
        out[(p * S + j) * S + s] = acc * inv;
      }
  }
  const bool rec = needs_grad({&q, &k});
  return make_result(Shape{P, S, q.dim(2), q.dim(3)}, std::move(out), rec, {q, k},
                     [q, k, qi, ki, P, C, S, inv](Node& self) {
    auto gq = grad_of(q);
    auto gk = grad_of(k);
    for (std::size_t p = 0; p < P; ++p) {
      const double* qp = q.data().data() + (*qi)[p] * C * S;
      const double* kp = k.data().data() + (*ki)[p] * C * S;
      for (std::size_t j = 0; j < S; ++j)
        for (std::size_t s = 0; s < S; ++s) {
          const double g = self.grad[(p * S + j) * S + s] * inv;
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < C; ++c) {
            if (!gq.empty()) gq[(*qi)[p] * C * S + c * S + s] += g * kp[c * S + j];
            if (!gk.empty()) gk[(*ki)[p] * C * S + c * S + j] += g * qp[c * S + s];
          }
        }
    }
  });
}

}  // namespace detail

/// One affine matrix for every (query, key) token pair of two patch sets.
inline AffineParams estimate_theta(const PatchSet& fq, const PatchSet& fk, const EstimatorWeights& w) {
  if (!(fq.geom == fk.geom))
    throw ShapeError("estimate_theta: query and key patch geometries differ");
  const std::size_t N = fq.geom.count();
  auto qi = std::make_shared<std::vector<std::size_t>>(N * N);
  auto ki = std::make_shared<std::vector<std::size_t>>(N * N);
  for (std::size_t p = 0; p < N * N; ++p) {
    (*qi)[p] = p / N;
    (*ki)[p] = p % N;
  }
  Tensor in = w.input == EstimatorInput::concat
                  ? concat({gather_rows(fq.tokens, *qi), gather_rows(fk.tokens, *ki)}, 1)
                  : detail::pair_correlation(fq.tokens, fk.tokens, qi, ki);
  if (in.dim(1) != w.conv1_w.dim(1))
    throw ShapeError("estimate_theta: estimator expects " + std::to_string(w.conv1_w.dim(1)) +
                     " input channels, pair input has " + std::to_string(in.dim(1)));
  Tensor h = leaky_relu(conv2d(in, w.conv1_w, w.conv1_b, 2, 1), 0.2);
  h = leaky_relu(conv2d(h, w.conv2_w, w.conv2_b, 2, 1), 0.2);
  Tensor params = linear(mean_spatial(h), w.fc_w, w.fc_b);
  return {reshape(params, {N * N, 2, 3}), N, N};
}

/// Key/value tokens warped onto every query: tokens [Nq, Nk, c, h, w],
/// valid [Nq, Nk, 1, h, w] (soft, zero where the warp leaves the patch).
struct AlignedPatchSet {
  Tensor tokens;
  Tensor valid;
  PatchGeometry geom;  // geometry of the key set
  Role role = Role::key;

  /// Single-pixel patches are never moved by a warp; such sets keep one
  /// [Nk, c, h, w] copy shared by every query instead of [Nq, Nk, c, h, w].
  bool shared() const { return tokens.rank() == 4; }
};

struct AlignedKV {
  AlignedPatchSet key;
  AlignedPatchSet value;
};

namespace detail {

/// Index of the coarse patch whose area contains the center of fine patch
/// (py, px) of an n_fine grid.
inline std::size_t parent_patch(std::size_t token, std::size_t n_fine, std::size_t n_coarse) {
  const std::size_t per = n_fine * n_fine;
  const std::size_t t = token / per, py = (token % per) / n_fine, px = token % n_fine;
  const std::size_t cy = (2 * py + 1) * n_coarse / (2 * n_fine);
  const std::size_t cx = (2 * px + 1) * n_coarse / (2 * n_fine);
  return t * n_coarse * n_coarse + cy * n_coarse + cx;
}

/// Re-expresses affine matrices estimated on patches of size (hc, wc) for
/// patches of size (hf, wf): the linear part is scale free in normalized
/// coordinates, the translation is rescaled by the ratio of pixel spans.
inline Tensor rescale_theta(const Tensor& theta, std::size_t hc, std::size_t wc, std::size_t hf, std::size_t wf) {
  const double rx = wf > 1 ? static_cast<double>(wc - 1) / static_cast<double>(wf - 1) : 0.0;
  const double ry = hf > 1 ? static_cast<double>(hc - 1) / static_cast<double>(hf - 1) : 0.0;
  if (rx == 1.0 && ry == 1.0) return theta;
  Tensor factors(theta.shape(), 1.0);
  for (std::size_t p = 0; p < theta.dim(0); ++p) {
    factors[p * 6 + 2] = rx;
    factors[p * 6 + 5] = ry;
  }
  return mul(theta, factors);
}

}  // namespace detail

/// Warps key and value patch sets onto each query patch. `theta` may have been
/// estimated on a coarser patch grid (`theta_geom`); each fine pair then uses
/// the matrix of its parent pair with rescaled translation.
inline AlignedKV warp_tokens(const PatchSet& fk, const PatchSet& fv, const AffineParams& theta,
                             const PatchGeometry& theta_geom) {
  if (!(fk.geom == fv.geom)) throw ShapeError("warp_tokens: key and value geometries differ");
  const PatchGeometry& g = fk.geom;
  if (g.frames != theta_geom.frames) throw ShapeError("warp_tokens: frame count differs from the alignment grid");
  const std::size_t N = g.count();
  if (theta.queries != theta_geom.count() || theta.keys != theta_geom.count())
    throw ShapeError("warp_tokens: affine pairing does not cover the alignment grid");

  if (g.patch_h == 1 && g.patch_w == 1) {
    AlignedKV out;
    out.key = {fk.tokens, fk.valid, g, Role::key};
    out.value = {fv.tokens, fv.valid, g, Role::value};
    return out;
  }

  auto src = std::make_shared<std::vector<std::size_t>>(N * N);
  auto tix = std::make_shared<std::vector<std::size_t>>(N * N);
  for (std::size_t q = 0; q < N; ++q) {
    const std::size_t pq = detail::parent_patch(q, g.grid, theta_geom.grid);
    for (std::size_t k = 0; k < N; ++k) {
      (*src)[q * N + k] = k;
      (*tix)[q * N + k] = pq * theta.keys + detail::parent_patch(k, g.grid, theta_geom.grid);
    }
  }
  Tensor th = detail::rescale_theta(theta.theta, theta_geom.patch_h, theta_geom.patch_w, g.patch_h, g.patch_w);

  auto warp = [&](const Tensor& t) { return affine_warp(t, th, src, tix, {N, N, t.dim(1), g.patch_h, g.patch_w}); };
  AlignedKV out;
  out.key = {warp(fk.tokens), warp(fk.valid), g, Role::key};
  // keys and values come from the same frames, so they share one valid map
  Tensor vvalid = fv.valid.same_node(fk.valid) || fv.valid.vec() == fk.valid.vec() ? out.key.valid : warp(fv.valid);
  out.value = {warp(fv.tokens), vvalid, g, Role::value};
  return out;
}

inline AlignedKV warp_tokens(const PatchSet& fk, const PatchSet& fv, const AffineParams& theta) {
  return warp_tokens(fk, fv, theta, fk.geom);
}

/// Pooled motion descriptor. `raw` is [1, 12]: the mean of (theta - I) over
/// all pairs followed by the mean of |theta - I|; `theta_prime` is its
/// learned linear projection [1, d_m] (no bias, so identity motion maps to 0).
struct DeformationFactor {
  Tensor raw;
  Tensor theta_prime;
};

inline Tensor pooled_deviation(const AffineParams& theta) {
  const std::size_t P = theta.theta.dim(0);
  if (P == 0) throw std::invalid_argument("deformation_factor: no affine pairs");
  Tensor id({P, 6});
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t j = 0; j < 6; ++j) id[p * 6 + j] = identity_affine()[j];
  Tensor dev = sub(reshape(theta.theta, {P, 6}), id);
  Tensor avg = Tensor::full({1, P}, 1.0 / static_cast<double>(P));
  return concat({matmul(avg, dev), matmul(avg, abs(dev))}, 1);
}

inline DeformationFactor deformation_factor(const AffineParams& theta, const Tensor& projection) {
  if (projection.rank() != 2 || projection.dim(1) != 12)
    throw ShapeError("deformation_factor: projection must be [d_m, 12], got " + shape_str(projection.shape()));
  Tensor raw = pooled_deviation(theta);
  return {raw, linear(raw, projection)};
}

}  // namespace devit
