#pragma once

// Mask-pruned patch attention.
//
//   C(q,k)    = sum_{c,x,y} Vq * fq * Vk->q * fk->q        (masked inner product)
//   S(q,k)    = sum_{x,y} Vk->q * Vq / normalizer          (saliency)
//   Attn(q,k) = C(q,k) * S(q,k)
//   alpha     = softmax over the keys visible to q
//   out_q     = sum_k alpha(q,k) * fv->q

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "devit/depth.hpp"
#include "devit/ops.hpp"
#include "devit/patch.hpp"

namespace devit {

enum class SaliencyNormalizer { area, query_valid, key_valid };

struct MppaOptions {
  SaliencyNormalizer normalizer = SaliencyNormalizer::area;
  bool scaled = false;  // divide Attn by sqrt(c * h_p * w_p)
};

/// Which key columns a query row may attend to.
using KeyMask = std::shared_ptr<const std::vector<std::uint8_t>>;

inline KeyMask all_keys(std::size_t queries, std::size_t keys) {
  return std::make_shared<const std::vector<std::uint8_t>>(queries * keys, 1);
}

struct AttentionMap {
  Tensor scores;  // [Nq, Nk] post-softmax, zero outside the key mask
  Tensor raw;     // [Nq, Nk] pre-softmax Attn
  KeyMask mask;
};

namespace detail {

inline void check_aligned(const PatchSet& q, const AlignedPatchSet& a, const char* op) {
  const auto& g = q.geom;
  const std::size_t N = g.count();
  if (a.shared()) {
    if (a.tokens.dim(1) != g.channels || a.tokens.dim(2) != g.patch_h || a.tokens.dim(3) != g.patch_w ||
        a.valid.rank() != 4 || a.valid.dim(0) != a.tokens.dim(0))
      throw ShapeError(std::string(op) + ": shared tokens " + shape_str(a.tokens.shape()) +
                       " do not match query geometry");
    return;
  }
  if (a.tokens.rank() != 5 || a.tokens.dim(0) != N || a.tokens.dim(2) != g.channels || a.tokens.dim(3) != g.patch_h ||
      a.tokens.dim(4) != g.patch_w)
    throw ShapeError(std::string(op) + ": aligned tokens " + shape_str(a.tokens.shape()) +
                     " do not match query geometry");
  if (a.valid.rank() != 5 || a.valid.dim(0) != N || a.valid.dim(1) != a.tokens.dim(1) || a.valid.dim(2) != 1)
    throw ShapeError(std::string(op) + ": aligned valid map " + shape_str(a.valid.shape()) + " is malformed");
}

}  // namespace detail

/// fq [Nq, C, h, w], vq [Nq, 1, h, w], fk [Nq, Nk, C, h, w], vk [Nq, Nk, 1, h, w] -> [Nq, Nk].
inline Tensor pruned_correlation(const Tensor& fq, const Tensor& vq, const Tensor& fk, const Tensor& vk) {
  const std::size_t Nq = fk.dim(0), Nk = fk.dim(1), C = fk.dim(2), S = fk.dim(3) * fk.dim(4);
  if (fq.numel() != Nq * C * S || vq.numel() != Nq * S || vk.numel() != Nq * Nk * S)
    throw ShapeError("pruned_correlation: operand shapes disagree");
  if (auto* c = detail::active_counter()) c->attention += Nq * Nk * C * S;
  std::vector<double> out(Nq * Nk);
  std::vector<double> m(S);
  for (std::size_t q = 0; q < Nq; ++q) {
    const double* a = fq.data().data() + q * C * S;
    const double* va = vq.data().data() + q * S;
    for (std::size_t k = 0; k < Nk; ++k) {
      const std::size_t pk = q * Nk + k;
      const double* b = fk.data().data() + pk * C * S;
      const double* vb = vk.data().data() + pk * S;
      for (std::size_t s = 0; s < S; ++s) m[s] = va[s] * vb[s];
      double acc = 0.0;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) acc += m[s] * a[c * S + s] * b[c * S + s];
      out[pk] = acc;
    }
  }
  const bool rec = detail::needs_grad({&fq, &vq, &fk, &vk});
  return detail::make_result(Shape{Nq, Nk}, std::move(out), rec, {fq, vq, fk, vk},
                             [fq, vq, fk, vk, Nq, Nk, C, S](detail::Node& self) {
    auto gfq = detail::grad_of(fq);
    auto gvq = detail::grad_of(vq);
    auto gfk = detail::grad_of(fk);
    auto gvk = detail::grad_of(vk);
    for (std::size_t q = 0; q < Nq; ++q) {
      const double* a = fq.data().data() + q * C * S;
      const double* va = vq.data().data() + q * S;
      for (std::size_t k = 0; k < Nk; ++k) {
        const std::size_t pk = q * Nk + k;
        const double g = self.grad[pk];
        if (g == 0.0) continue;
        const double* b = fk.data().data() + pk * C * S;
        const double* vb = vk.data().data() + pk * S;
        for (std::size_t s = 0; s < S; ++s) {
          const double mm = g * va[s] * vb[s];
          double ab = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            ab += a[c * S + s] * b[c * S + s];
            if (!gfq.empty()) gfq[q * C * S + c * S + s] += mm * b[c * S + s];
            if (!gfk.empty()) gfk[pk * C * S + c * S + s] += mm * a[c * S + s];
          }
          if (!gvq.empty()) gvq[q * S + s] += g * vb[s] * ab;
          if (!gvk.empty()) gvk[pk * S + s] += g * va[s] * ab;
        }
      }
    }
  });
}

/// Shared-key form: fk [Nk, C, h, w] and vk [Nk, 1, h, w] are the same for
/// every query, so C = (Vq fq)(Vk fk)^T is one matrix product.
inline Tensor pruned_correlation_shared(const Tensor& fq, const Tensor& vq, const Tensor& fk, const Tensor& vk) {
  const std::size_t Nq = fq.dim(0), Nk = fk.dim(0), C = fk.dim(1), S = fk.dim(2) * fk.dim(3);
  if (fq.numel() != Nq * C * S || vq.numel() != Nq * S || vk.numel() != Nk * S)
    throw ShapeError("pruned_correlation: operand shapes disagree");
  if (auto* c = detail::active_counter()) c->attention += Nq * Nk * C * S;
  auto masked = [C, S](const Tensor& f, const Tensor& v, std::size_t n) {
    std::vector<double> m(n * C * S);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t s = 0; s < S; ++s) m[(i * C + c) * S + s] = f[(i * C + c) * S + s] * v[i * S + s];
    return m;
  };
  std::vector<double> a = masked(fq, vq, Nq), b = masked(fk, vk, Nk);
  std::vector<double> out(Nq * Nk, 0.0);
  detail::gemm_nt(Nq, Nk, C * S, a.data(), b.data(), out.data());
  const bool rec = detail::needs_grad({&fq, &vq, &fk, &vk});
  return detail::make_result(Shape{Nq, Nk}, std::move(out), rec, {fq, vq, fk, vk},
                             [fq, vq, fk, vk, Nq, Nk, C, S, a = std::move(a), b = std::move(b)](detail::Node& self) {
    std::vector<double> da(Nq * C * S, 0.0), db(Nk * C * S, 0.0);
    detail::gemm_nn(Nq, C * S, Nk, self.grad.data(), b.data(), da.data());
    detail::gemm_tn(Nk, C * S, Nq, self.grad.data(), a.data(), db.data());
    auto spread = [C, S](const std::vector<double>& d, const Tensor& f, const Tensor& v, std::size_t n) {
      auto gf = detail::grad_of(f);
      auto gv = detail::grad_of(v);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t s = 0; s < S; ++s) {
            const std::size_t j = (i * C + c) * S + s;
            if (!gf.empty()) gf[j] += d[j] * v[i * S + s];
            if (!gv.empty()) gv[i * S + s] += d[j] * f[j];
          }
    };
    spread(da, fq, vq, Nq);
    spread(db, fk, vk, Nk);
  });
}

inline Tensor pruned_correlation(const PatchSet& q, const AlignedPatchSet& k) {
  detail::check_aligned(q, k, "pruned_correlation");
  if (k.shared()) return pruned_correlation_shared(q.tokens, q.valid, k.tokens, k.valid);
  return pruned_correlation(q.tokens, q.valid, k.tokens, k.valid);
}

/// vq [Nq, 1, h, w], vk [Nq, Nk, 1, h, w] -> S [Nq, Nk]. A zero normalizer
/// (no valid pixel to normalize by) yields S = 0.
/// vk may also be the shared form [Nk, 1, h, w] (same keys for every query).
inline Tensor saliency(const Tensor& vq, const Tensor& vk, SaliencyNormalizer norm = SaliencyNormalizer::area) {
  const bool shared = vk.rank() == 4;
  if (shared) {
    if (vq.rank() != 4 || vq.dim(2) != vk.dim(2) || vq.dim(3) != vk.dim(3))
      throw ShapeError("saliency: valid maps " + shape_str(vq.shape()) + " and " + shape_str(vk.shape()) + " disagree");
  } else if (vk.rank() != 5 || vq.numel() != vk.dim(0) * vk.dim(3) * vk.dim(4)) {
    throw ShapeError("saliency: valid maps " + shape_str(vq.shape()) + " and " + shape_str(vk.shape()) + " disagree");
  }
  const std::size_t Nq = shared ? vq.dim(0) : vk.dim(0), Nk = shared ? vk.dim(0) : vk.dim(1);
  const std::size_t S = vk.dim(vk.rank() - 2) * vk.dim(vk.rank() - 1);
  auto key_row = [shared, Nk, S](const Tensor& v, std::size_t q, std::size_t k) {
    return v.data().data() + (shared ? k : q * Nk + k) * S;
  };
  std::vector<double> out(Nq * Nk), denom(Nq * Nk);
  for (std::size_t q = 0; q < Nq; ++q) {
    const double* a = vq.data().data() + q * S;
    double sq = 0.0;
    for (std::size_t s = 0; s < S; ++s) sq += a[s];
    for (std::size_t k = 0; k < Nk; ++k) {
      const double* b = key_row(vk, q, k);
      double overlap = 0.0, sk = 0.0;
      for (std::size_t s = 0; s < S; ++s) {
        overlap += a[s] * b[s];
        sk += b[s];
      }
      double d = static_cast<double>(S);
      if (norm == SaliencyNormalizer::query_valid) d = sq;
      if (norm == SaliencyNormalizer::key_valid) d = sk;
      denom[q * Nk + k] = d;
      out[q * Nk + k] = d > 0.0 ? overlap / d : 0.0;
    }
  }
  const bool rec = detail::needs_grad({&vq, &vk});
  return detail::make_result(Shape{Nq, Nk}, std::move(out), rec, {vq, vk},
                             [vq, vk, Nq, Nk, S, norm, key_row, shared, denom = std::move(denom)](detail::Node& self) {
    auto gq = detail::grad_of(vq);
    auto gk = detail::grad_of(vk);
    for (std::size_t q = 0; q < Nq; ++q) {
      const double* a = vq.data().data() + q * S;
      for (std::size_t k = 0; k < Nk; ++k) {
        const std::size_t pk = q * Nk + k;
        const double d = denom[pk];
        if (!(d > 0.0)) continue;
        const double g = self.grad[pk], sval = self.data[pk];
        const double* b = key_row(vk, q, k);
        const std::size_t kk = shared ? k : pk;
        for (std::size_t s = 0; s < S; ++s) {
          // S = overlap / d, with d possibly a sum over one of the maps
          double dq = b[s] / d, dk = a[s] / d;
          if (norm == SaliencyNormalizer::query_valid) dq -= sval / d;
          if (norm == SaliencyNormalizer::key_valid) dk -= sval / d;
          if (!gq.empty()) gq[q * S + s] += g * dq;
          if (!gk.empty()) gk[kk * S + s] += g * dk;
        }
      }
    }
  });
}

/// alpha [Nq, Nk], fv [Nq, Nk, C, h, w] -> [Nq, C, h, w]. A shared value set
/// fv [Nk, C, h, w] reduces to a matrix product.
inline Tensor aggregate_values(const Tensor& alpha, const Tensor& fv) {
  if (fv.rank() == 4) {
    if (alpha.rank() != 2 || fv.dim(0) != alpha.dim(1))
      throw ShapeError("aggregate_values: weights " + shape_str(alpha.shape()) + " vs values " + shape_str(fv.shape()));
    const std::size_t Nk = fv.dim(0), D = fv.dim(1) * fv.dim(2) * fv.dim(3);
    if (auto* c = detail::active_counter()) c->attention += alpha.dim(0) * Nk * D;
    return reshape(matmul(alpha, reshape(fv, {Nk, D})), {alpha.dim(0), fv.dim(1), fv.dim(2), fv.dim(3)});
  }
  if (alpha.rank() != 2 || fv.rank() != 5 || fv.dim(0) != alpha.dim(0) || fv.dim(1) != alpha.dim(1))
    throw ShapeError("aggregate_values: weights " + shape_str(alpha.shape()) + " vs values " + shape_str(fv.shape()));
  const std::size_t Nq = fv.dim(0), Nk = fv.dim(1), D = fv.dim(2) * fv.dim(3) * fv.dim(4);
  if (auto* c = detail::active_counter()) c->attention += Nq * Nk * D;
  std::vector<double> out(Nq * D, 0.0);
  for (std::size_t q = 0; q < Nq; ++q)
    for (std::size_t k = 0; k < Nk; ++k) {
      const double a = alpha[q * Nk + k];
      if (a == 0.0) continue;
      const double* v = fv.data().data() + (q * Nk + k) * D;
      double* o = out.data() + q * D;
      for (std::size_t j = 0; j < D; ++j) o[j] += a * v[j];
    }
  const bool rec = detail::needs_grad({&alpha, &fv});
  return detail::make_result(Shape{Nq, fv.dim(2), fv.dim(3), fv.dim(4)}, std::move(out), rec, {alpha, fv},
                             [alpha, fv, Nq, Nk, D](detail::Node& self) {
    auto ga = detail::grad_of(alpha);
    auto gv = detail::grad_of(fv);
    for (std::size_t q = 0; q < Nq; ++q) {
      const double* go = self.grad.data() + q * D;
      for (std::size_t k = 0; k < Nk; ++k) {
        const std::size_t pk = q * Nk + k;
        if (!ga.empty()) ga[pk] += detail::dot(go, fv.data().data() + pk * D, D);
        if (!gv.empty()) {
          const double a = alpha[pk];
          double* g = gv.data() + pk * D;
          for (std::size_t j = 0; j < D; ++j) g[j] += a * go[j];
        }
      }
    }
  });
}

/// Attn = C * S (optionally scaled), shared by every key subset of a head.
inline Tensor attention_logits(const PatchSet& q, const AlignedPatchSet& k, const MppaOptions& opt = {}) {
  Tensor attn = mul(pruned_correlation(q, k), saliency(q.valid, k.valid, opt.normalizer));
  if (opt.scaled)
    attn = scale(attn, 1.0 / std::sqrt(static_cast<double>(q.geom.channels * q.geom.area())));
  return attn;
}

struct MppaResult {
  Tensor output;  // [Nq, c, h_p, w_p]
  AttentionMap map;
};

/// Full MPPA over the keys allowed by `mask` (all keys when null).
inline MppaResult mppa(const PatchSet& q, const AlignedPatchSet& k, const AlignedPatchSet& v,
                       const MppaOptions& opt = {}, KeyMask mask = nullptr) {
  detail::check_aligned(q, k, "mppa");
  detail::check_aligned(q, v, "mppa");
  const std::size_t nk = k.shared() ? k.tokens.dim(0) : k.tokens.dim(1);
  if (nk == 0) throw std::invalid_argument("mppa: empty key set");
  if (!mask) mask = all_keys(q.geom.count(), nk);
  Tensor attn = attention_logits(q, k, opt);
  Tensor alpha = masked_softmax_rows(attn, mask);
  return {aggregate_values(alpha, v.tokens), {alpha, attn, mask}};
}

}  // namespace devit
