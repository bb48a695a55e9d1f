#pragma once

// Named finite-difference checks over the differentiable primitives and the
// composed alignment/attention/loss pipeline. Shared by the acceptance run
// and `devit gradcheck`.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "devit/depth.hpp"
#include "devit/gradcheck.hpp"
#include "devit/model.hpp"
#include "devit/mppa.hpp"
#include "devit/sta.hpp"

namespace devit {

struct GradCase {
  std::string name;
  std::function<GradReport(std::uint64_t seed)> run;
};

namespace detail {

using Rng = std::mt19937_64;

// entries with magnitude in [0.05, 1] and random sign, clear of abs/relu kinks
inline Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = Tensor::uniform(std::move(s), rng, 0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data()) v = sign(rng) ? v : -v;
  return t;
}

// normalized coordinates whose pixel positions stay off integers (bilinear kinks)
inline Tensor safe_grid(Shape s, std::size_t H, std::size_t W, Rng& rng, double span = 1.3) {
  Tensor g = Tensor::uniform(std::move(s), rng, -span, span);
  for (std::size_t i = 0; i < g.numel(); ++i) {
    const std::size_t n = i % 2 == 0 ? W : H;
    const double px = (g[i] + 1.0) * 0.5 * static_cast<double>(n - 1);
    const double frac = px - std::floor(px);
    if (frac < 0.05 || frac > 0.95) g[i] += 0.2 / static_cast<double>(n - 1);
  }
  return g;
}

inline Tensor probe_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

inline Tensor random_mask(std::size_t T, std::size_t H, std::size_t W, Rng& rng, double p) {
  Tensor m({T, 1, H, W});
  std::bernoulli_distribution coin(p);
  for (double& v : m.data()) v = coin(rng);
  return m;
}

// single-input check of y = op(x) contracted with a random probe
template <class Op>
GradReport unary(Tensor x, Op op, Rng& rng) {
  Tensor w = Tensor::uniform(op(x).shape(), rng);
  return grad_check([&](const std::vector<Tensor>& in) { return probe_sum(op(in[0]), w); }, {x});
}

// estimate_theta -> warp_tokens -> deformation factor -> mppa -> sta_forward -> total_loss
inline GradReport pipeline_case(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t T = 2, C = 2, H = 4, W = 4, n = 2;
  Tensor mask = random_mask(T, H, W, rng, 0.2);
  PatchSet q = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n);
  PatchSet k = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n, Role::key);
  PatchSet v = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n, Role::value);
  EstimatorWeights est = EstimatorWeights::init(C, 2, 2, rng);
  est.fc_w = Tensor::uniform(est.fc_w.shape(), rng, -0.1, 0.1);
  // off the identity so that samples avoid pixel centers and |theta - I| avoids zero
  est.fc_b = Tensor({6}, std::vector<double>{1.1, 0.15, 0.23, -0.12, 0.93, -0.17});
  const std::size_t md = 6;
  Tensor proj = Tensor::uniform({md, 12}, rng, -0.5, 0.5);
  StaWeights sta = StaWeights::init(C, md, rng, 4);
  sta.gate.w2 = Tensor::uniform({2, 4}, rng, -1.0, 1.0);
  Tensor target = Tensor::uniform({T, C, H, W}, rng);
  Tensor critic = Tensor::uniform({T, C, H, W}, rng, -1.0, 1.0);
  auto f = [&](const std::vector<Tensor>& in) {
    PatchSet qq = q, kk = k, vv = v;
    qq.tokens = in[0];
    kk.tokens = in[1];
    vv.tokens = in[2];
    EstimatorWeights e = est;
    e.fc_w = in[3];
    e.fc_b = in[4];
    StaWeights s = sta;
    s.motion_proj = in[6];
    s.gate.w1 = in[7];
    s.gate.w2 = in[8];
    AffineParams theta = estimate_theta(qq, kk, e);
    AlignedKV a = warp_tokens(kk, vv, theta);
    DeformationFactor df = deformation_factor(theta, in[5]);
    StaOutput o = sta_forward({{qq, a}}, df.theta_prime, s);
    ReconstructionLoss rl = loss_reconstruction(o.fused, target, mask);
    GanLoss gl = loss_gan(Tensor::ones({1}), mean_spatial(mul(o.fused, critic)));
    return total_loss({rl.hole, rl.valid, gl.adversarial}, {1.0, 1.0, 0.5});
  };
  return grad_check(f, {q.tokens, k.tokens, v.tokens, est.fc_w, est.fc_b, proj, sta.motion_proj, sta.gate.w1,
                        sta.gate.w2});
}

}  // namespace detail

inline const std::vector<GradCase>& grad_cases() {
  using detail::Rng;
  using detail::unary;
  static const std::vector<GradCase> cases = {
      {"add", [](std::uint64_t s) {
         Rng r(s);
         Tensor b = Tensor::uniform({3, 4}, r);
         return unary(Tensor::uniform({3, 4}, r), [&](const Tensor& x) { return add(x, mul(x, b)); }, r);
       }},
      {"mul", [](std::uint64_t s) {
         Rng r(s);
         Tensor a = Tensor::uniform({3, 4}, r), b = Tensor::uniform({3, 4}, r), w = Tensor::uniform({3, 4}, r);
         return grad_check([&](const std::vector<Tensor>& x) { return detail::probe_sum(mul(x[0], x[1]), w); }, {a, b});
       }},
      {"tanh", [](std::uint64_t s) {
         Rng r(s);
         return unary(Tensor::uniform({3, 4}, r, -2, 2), [](const Tensor& x) { return tanh(x); }, r);
       }},
      {"leaky_relu", [](std::uint64_t s) {
         Rng r(s);
         return unary(detail::away_from_zero({3, 4}, r), [](const Tensor& x) { return leaky_relu(x, 0.2); }, r);
       }},
      {"abs", [](std::uint64_t s) {
         Rng r(s);
         return unary(detail::away_from_zero({3, 4}, r), [](const Tensor& x) { return abs(x); }, r);
       }},
      {"matmul", [](std::uint64_t s) {
         Rng r(s);
         Tensor a = Tensor::uniform({3, 4}, r), b = Tensor::uniform({4, 2}, r), w = Tensor::uniform({3, 2}, r);
         return grad_check([&](const std::vector<Tensor>& x) { return detail::probe_sum(matmul(x[0], x[1]), w); },
                           {a, b});
       }},
      {"linear", [](std::uint64_t s) {
         Rng r(s);
         Tensor a = Tensor::uniform({3, 4}, r), lw = Tensor::uniform({2, 4}, r), lb = Tensor::uniform({2}, r);
         Tensor w = Tensor::uniform({3, 2}, r);
         return grad_check(
             [&](const std::vector<Tensor>& x) { return detail::probe_sum(linear(x[0], x[1], x[2]), w); }, {a, lw, lb});
       }},
      {"softmax", [](std::uint64_t s) {
         Rng r(s);
         return unary(Tensor::uniform({3, 4}, r, -2, 2), [](const Tensor& x) { return softmax(x, 1); }, r);
       }},
      {"masked_softmax_rows", [](std::uint64_t s) {
         Rng r(s);
         auto m = std::make_shared<std::vector<std::uint8_t>>(12, 1);
         (*m)[1] = (*m)[6] = (*m)[11] = 0;
         return unary(Tensor::uniform({3, 4}, r, -2, 2), [m](const Tensor& x) { return masked_softmax_rows(x, m); }, r);
       }},
      {"mean_spatial", [](std::uint64_t s) {
         Rng r(s);
         return unary(Tensor::uniform({2, 3, 2, 2}, r), [](const Tensor& x) { return mean_spatial(x); }, r);
       }},
      {"conv2d", [](std::uint64_t s) {
         Rng r(s);
         const std::size_t stride = 1 + s % 2;
         Tensor x = Tensor::uniform({2, 2, 5, 5}, r), w = Tensor::uniform({3, 2, 3, 3}, r), b = Tensor::uniform({3}, r);
         Tensor p = Tensor::uniform(conv2d(x, w, b, stride, 1).shape(), r);
         return grad_check(
             [&](const std::vector<Tensor>& in) { return detail::probe_sum(conv2d(in[0], in[1], in[2], stride, 1), p); },
             {x, w, b});
       }},
      {"conv3d", [](std::uint64_t s) {
         Rng r(s);
         Tensor x = Tensor::uniform({2, 3, 4, 4}, r), w = Tensor::uniform({2, 2, 3, 5, 5}, r), b = Tensor::uniform({2}, r);
         Tensor p = Tensor::uniform(conv3d(x, w, b, {1, 2, 2}, {1, 2, 2}).shape(), r);
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               return detail::probe_sum(conv3d(in[0], in[1], in[2], {1, 2, 2}, {1, 2, 2}), p);
             },
             {x, w, b});
       }},
      {"upsample2x", [](std::uint64_t s) {
         Rng r(s);
         return unary(Tensor::uniform({1, 2, 3, 3}, r), [](const Tensor& x) { return upsample2x(x); }, r);
       }},
      {"affine_grid", [](std::uint64_t s) {
         Rng r(s);
         Tensor th = Tensor::uniform({2, 2, 3}, r, -0.6, 0.6);
         th[0] += 1.0;
         th[4] += 1.0;
         th[6] += 1.0;
         th[10] += 1.0;
         return unary(th, [](const Tensor& x) { return affine_grid(x, 3, 3); }, r);
       }},
      {"grid_sample", [](std::uint64_t s) {
         Rng r(s);
         Tensor x = Tensor::uniform({2, 2, 4, 4}, r), g = detail::safe_grid({2, 3, 3, 2}, 4, 4, r);
         Tensor w = Tensor::uniform({2, 2, 3, 3}, r);
         return grad_check([&](const std::vector<Tensor>& in) { return detail::probe_sum(grid_sample(in[0], in[1]), w); },
                           {x, g});
       }},
      {"bilinear_sample", [](std::uint64_t s) {
         Rng r(s);
         Tensor x = Tensor::uniform({1, 5, 5}, r), g = detail::safe_grid({4, 4, 2}, 5, 5, r);
         Tensor w = Tensor::uniform({1, 4, 4}, r);
         return grad_check(
             [&](const std::vector<Tensor>& in) { return detail::probe_sum(bilinear_sample(in[0], in[1]), w); }, {x, g});
       }},
      {"spectral_norm", [](std::uint64_t s) {
         Rng r(s);
         return unary(Tensor::uniform({3, 2, 2, 2}, r), [](const Tensor& x) {
           SpectralNorm sn(3, 11);
           return sn.apply(x, 200);
         }, r);
       }},
      {"pruned_correlation_saliency", [](std::uint64_t s) {
         Rng r(s);
         Tensor fq = Tensor::uniform({3, 2, 2, 2}, r), vq = Tensor::uniform({3, 1, 2, 2}, r, 0.1, 1.0);
         Tensor fk = Tensor::uniform({3, 3, 2, 2, 2}, r), vk = Tensor::uniform({3, 3, 1, 2, 2}, r, 0.1, 1.0);
         Tensor w = Tensor::uniform({3, 3}, r);
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               return detail::probe_sum(mul(pruned_correlation(in[0], in[1], in[2], in[3]), saliency(in[1], in[3])), w);
             },
             {fq, vq, fk, vk});
       }},
      {"mppa", [](std::uint64_t s) {
         Rng r(s);
         const PatchGeometry g{1, 2, 2, 2, 2};
         PatchSet q{Tensor::uniform({4, 2, 2, 2}, r), Tensor::uniform({4, 1, 2, 2}, r, 0.1, 1.0), g, Role::query};
         AlignedPatchSet k{Tensor::uniform({4, 4, 2, 2, 2}, r), Tensor::uniform({4, 4, 1, 2, 2}, r, 0.1, 1.0), g,
                           Role::key};
         AlignedPatchSet v{Tensor::uniform({4, 4, 2, 2, 2}, r), k.valid, g, Role::value};
         Tensor w = Tensor::uniform({4, 2, 2, 2}, r);
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               PatchSet qq = q;
               AlignedPatchSet kk = k, vv = v;
               qq.tokens = in[0];
               kk.tokens = in[1];
               vv.tokens = in[2];
               return detail::probe_sum(mppa(qq, kk, vv).output, w);
             },
             {q.tokens, k.tokens, v.tokens});
       }},
      {"estimate_warp", [](std::uint64_t s) {
         Rng r(s);
         Tensor mask = detail::random_mask(1, 6, 6, r, 0.2);
         PatchSet q = extract_patches(Tensor::uniform({1, 2, 6, 6}, r), mask, 2);
         PatchSet k = extract_patches(Tensor::uniform({1, 2, 6, 6}, r), mask, 2, Role::key);
         EstimatorWeights e = EstimatorWeights::init(2, 3, 3, r);
         e.fc_w = Tensor::uniform(e.fc_w.shape(), r, -0.4, 0.4);
         e.fc_b = Tensor({6}, std::vector<double>{1.1, 0.05, 0.23, -0.04, 0.93, -0.17});
         Tensor w = Tensor::uniform({4, 4, 2, 3, 3}, r);
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               PatchSet qq = q, kk = k;
               qq.tokens = in[0];
               kk.tokens = in[1];
               EstimatorWeights ee = e;
               ee.conv1_w = in[2];
               ee.fc_w = in[3];
               ee.fc_b = in[4];
               return detail::probe_sum(warp_tokens(kk, kk, estimate_theta(qq, kk, ee)).key.tokens, w);
             },
             {q.tokens, k.tokens, e.conv1_w, e.fc_w, e.fc_b});
       }},
      {"sta_forward", [](std::uint64_t s) {
         Rng r(s);
         Tensor mask = detail::random_mask(2, 4, 4, r, 0.2);
         PatchSet q = extract_patches(Tensor::uniform({2, 2, 4, 4}, r), mask, 2);
         PatchSet kv = extract_patches(Tensor::uniform({2, 2, 4, 4}, r), mask, 2, Role::key);
         Tensor id({64, 2, 3});
         for (std::size_t p = 0; p < 64; ++p) id[p * 6] = id[p * 6 + 4] = 1.0;
         AlignedKV a = warp_tokens(kv, kv, {id, 8, 8});
         StaWeights sw = StaWeights::init(2, 6, r, 8);
         sw.gate.w2 = Tensor::uniform({2, 8}, r, -1, 1);
         Tensor tp = Tensor::uniform({1, 6}, r, -0.5, 0.5), w = Tensor::uniform({2, 2, 4, 4}, r);
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               HeadInputs h{q, a};
               h.query.tokens = in[0];
               h.aligned.key.tokens = in[1];
               StaWeights ww = sw;
               ww.motion_proj = in[2];
               ww.gate.w2 = in[4];
               return detail::probe_sum(sta_forward({h}, in[3], ww).fused, w);
             },
             {q.tokens, a.key.tokens, sw.motion_proj, tp, sw.gate.w2});
       }},
      {"losses", [](std::uint64_t s) {
         Rng r(s);
         Tensor pred = Tensor::uniform({2, 3, 4, 4}, r), target = Tensor::uniform({2, 3, 4, 4}, r);
         Tensor mask = detail::random_mask(2, 4, 4, r, 0.4);
         Tensor dr = detail::away_from_zero({6}, r), df = detail::away_from_zero({6}, r);
         for (double& v : dr.data()) v += v > 0 ? 1.0 : 0.0;  // hinge kinks sit at +1 and -1
         for (double& v : df.data()) v -= v < 0 ? 1.0 : 0.0;
         return grad_check(
             [&](const std::vector<Tensor>& in) {
               ReconstructionLoss rl = loss_reconstruction(in[0], target, mask);
               GanLoss g = loss_gan(in[1], in[2]);
               return add(total_loss({rl.hole, rl.valid, g.adversarial}, {1.0, 0.7, 0.3}), g.discriminator);
             },
             {pred, dr, df});
       }},
      {"pipeline", detail::pipeline_case},
  };
  return cases;
}

inline const GradCase& find_grad_case(const std::string& name) {
  for (const GradCase& c : grad_cases())
    if (c.name == name) return c;
  std::string known;
  for (const GradCase& c : grad_cases()) known += (known.empty() ? "" : ", ") + c.name;
  throw std::invalid_argument("unknown gradient check '" + name + "' (known: " + known + ")");
}

}  // namespace devit
