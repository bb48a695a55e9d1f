#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "devit/gradcheck.hpp"
#include "devit/mppa.hpp"
#include "oracles.hpp"

using namespace devit;

namespace {

// 3x3 valid map with the first `count` pixels (raster order) set
Tensor first_pixels(std::size_t count, Shape shape) {
  Tensor v(std::move(shape));
  for (std::size_t i = 0; i < count; ++i) v[i] = 1.0;
  return v;
}

AffineParams identity_theta(std::size_t N) {
  Tensor th({N * N, 2, 3});
  for (std::size_t p = 0; p < N * N; ++p) {
    th[p * 6] = 1.0;
    th[p * 6 + 4] = 1.0;
  }
  return {th, N, N};
}

// broadcasts a shared [Nk, ...] set to the per-query [Nq, Nk, ...] form
Tensor per_query(const Tensor& t, std::size_t Nq) {
  std::vector<Tensor> rows(Nq, reshape(t, {1, t.numel()}));
  Shape s{Nq, t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
  return reshape(concat(rows, 0), s);
}

}  // namespace

TEST(PrunedCorrelation, OnesOnTwoByTwo) {
  Tensor f = Tensor::ones({1, 1, 2, 2}), v = Tensor::ones({1, 1, 2, 2});
  Tensor c = pruned_correlation(f, v, reshape(f, {1, 1, 1, 2, 2}), reshape(v, {1, 1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(c.item(), 4.0);
}

TEST(PrunedCorrelation, EmptyQueryValidGivesZero) {
  std::mt19937_64 rng(1);
  Tensor fq = Tensor::uniform({2, 3, 2, 2}, rng), fk = Tensor::uniform({2, 4, 3, 2, 2}, rng);
  Tensor c = pruned_correlation(fq, Tensor::zeros({2, 1, 2, 2}), fk, Tensor::ones({2, 4, 1, 2, 2}));
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(PrunedCorrelation, SingleOverlappingPixel) {
  Tensor fq = Tensor::full({1, 1, 3, 3}, 2.0), fk = Tensor::full({1, 1, 1, 3, 3}, 3.0);
  Tensor vq = first_pixels(4, {1, 1, 3, 3});
  Tensor vk({1, 1, 1, 3, 3});
  vk[3] = 1.0;  // only pixel 3 is valid on both sides
  vk[8] = 1.0;  // valid on the key side only
  EXPECT_DOUBLE_EQ(pruned_correlation(fq, vq, fk, vk).item(), 6.0);
}

TEST(PrunedCorrelation, MatchesDirectSummation) {
  std::mt19937_64 rng(2);
  const std::size_t Nq = 3, Nk = 4, C = 2, S = 6;
  Tensor fq = Tensor::uniform({Nq, C, 2, 3}, rng), vq = Tensor::uniform({Nq, 1, 2, 3}, rng);
  Tensor fk = Tensor::uniform({Nq, Nk, C, 2, 3}, rng), vk = Tensor::uniform({Nq, Nk, 1, 2, 3}, rng);
  Tensor c = pruned_correlation(fq, vq, fk, vk);
  for (std::size_t q = 0; q < Nq; ++q)
    for (std::size_t k = 0; k < Nk; ++k) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t p = 0; p < S; ++p)
          s += vq[q * S + p] * fq[(q * C + ch) * S + p] * vk[(q * Nk + k) * S + p] * fk[((q * Nk + k) * C + ch) * S + p];
      EXPECT_NEAR(c[q * Nk + k], s, 1e-12);
    }
}

TEST(Saliency, AppendixWorkedCases) {
  Tensor full = Tensor::ones({1, 1, 3, 3});
  EXPECT_DOUBLE_EQ(saliency(full, Tensor::ones({1, 1, 1, 3, 3})).item(), 1.0);
  EXPECT_DOUBLE_EQ(saliency(full, first_pixels(2, {1, 1, 1, 3, 3})).item(), 2.0 / 9.0);
  EXPECT_DOUBLE_EQ(saliency(full, first_pixels(5, {1, 1, 1, 3, 3})).item(), 5.0 / 9.0);
}

TEST(Saliency, AlternativeNormalizers) {
  Tensor vq = first_pixels(6, {1, 1, 3, 3}), vk = first_pixels(4, {1, 1, 1, 3, 3});
  EXPECT_DOUBLE_EQ(saliency(vq, vk, SaliencyNormalizer::area).item(), 4.0 / 9.0);
  EXPECT_DOUBLE_EQ(saliency(vq, vk, SaliencyNormalizer::query_valid).item(), 4.0 / 6.0);
  EXPECT_DOUBLE_EQ(saliency(vq, vk, SaliencyNormalizer::key_valid).item(), 1.0);
  EXPECT_EQ(saliency(Tensor::zeros({1, 1, 3, 3}), vk, SaliencyNormalizer::query_valid).item(), 0.0);
}

TEST(Saliency, MonotoneInOverlap) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> order(9);
    for (std::size_t i = 0; i < 9; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    Tensor vq = Tensor::ones({1, 1, 3, 3}), vk({1, 1, 1, 3, 3});
    double prev = saliency(vq, vk).item();
    EXPECT_EQ(prev, 0.0);
    for (std::size_t i : order) {
      vk[i] = 1.0;
      const double s = saliency(vq, vk).item();
      EXPECT_GE(s, prev);
      EXPECT_LE(s, 1.0);
      prev = s;
    }
  }
}

TEST(Saliency, SharedFormMatchesPerQueryForm) {
  std::mt19937_64 rng(4);
  Tensor vq = Tensor::uniform({3, 1, 2, 2}, rng), vk = Tensor::uniform({5, 1, 2, 2}, rng);
  for (auto n : {SaliencyNormalizer::area, SaliencyNormalizer::query_valid, SaliencyNormalizer::key_valid})
    EXPECT_LE(max_abs_diff(saliency(vq, vk, n), saliency(vq, per_query(vk, 3), n)), 1e-15);
}

TEST(Mppa, SingleKeyReturnsItsValue) {
  std::mt19937_64 rng(5);
  PatchSet q = extract_patches(Tensor::uniform({1, 2, 4, 4}, rng), Tensor::zeros({1, 1, 4, 4}), 1);
  PatchSet v = extract_patches(Tensor::uniform({1, 2, 4, 4}, rng), Tensor::zeros({1, 1, 4, 4}), 1);
  AlignedKV a = warp_tokens(q, v, identity_theta(1));
  MppaResult r = mppa(q, a.key, a.value);
  EXPECT_DOUBLE_EQ(r.map.scores.item(), 1.0);
  EXPECT_EQ(r.output.vec(), v.tokens.vec());
}

TEST(Mppa, DegeneratesToVanillaAttention) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t T = 2, C = 2, H = 6, W = 6, n = 2;
    Tensor mask({T, 1, H, W});
    PatchSet q = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n);
    PatchSet k = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n);
    PatchSet v = extract_patches(Tensor::uniform({T, C, H, W}, rng), mask, n);
    const std::size_t N = q.geom.count(), D = C * 9;
    AlignedKV a = warp_tokens(k, v, identity_theta(N));
    MppaResult r = mppa(q, a.key, a.value);
    std::vector<double> scores;
    auto ref = oracle::vanilla_attention(q.tokens.vec(), k.tokens.vec(), v.tokens.vec(), N, N, D, D, &scores);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(r.output[i], ref[i], 1e-6);
    for (std::size_t i = 0; i < scores.size(); ++i) EXPECT_NEAR(r.map.scores[i], scores[i], 1e-6);
  }
}

TEST(Mppa, ZeroOverlapKeyKeepsPositiveWeight) {
  Tensor fq = Tensor::full({1, 1, 2, 2}, 0.5), vq = Tensor::ones({1, 1, 2, 2});
  PatchSet q{fq, vq, {1, 1, 1, 2, 2}, Role::query};
  Tensor fk = Tensor::full({1, 2, 1, 2, 2}, 0.5);
  Tensor vk({1, 2, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) vk[i] = 1.0;  // key 1 fully valid, key 2 empty
  AlignedPatchSet k{fk, vk, {1, 1, 1, 2, 2}, Role::key};
  Tensor fv({1, 2, 1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) fv[i] = 1.0;
  AlignedPatchSet v{fv, vk, {1, 1, 1, 2, 2}, Role::value};
  // one query, two keys
  MppaResult r = mppa(q, k, v, {}, std::make_shared<const std::vector<std::uint8_t>>(2, 1));
  const double attn1 = 4 * 0.25 * 1.0;  // C = 1, S = 1
  EXPECT_DOUBLE_EQ(r.map.raw[0], attn1);
  EXPECT_EQ(r.map.raw[1], 0.0);
  const double a2 = 1.0 / (1.0 + std::exp(attn1));
  EXPECT_NEAR(r.map.scores[1], a2, 1e-15);
  EXPECT_GT(r.map.scores[1], 0.0);
  EXPECT_NEAR(r.output[0], 1.0 - a2, 1e-15);
}

TEST(Mppa, RowsSumToOneAndShiftInvariant) {
  std::mt19937_64 rng(6);
  const std::size_t T = 2;
  Tensor mask({T, 1, 6, 6});
  std::bernoulli_distribution coin(0.3);
  for (double& m : mask.data()) m = coin(rng);
  PatchSet q = extract_patches(Tensor::uniform({T, 2, 6, 6}, rng), mask, 3);
  const std::size_t N = q.geom.count();
  AlignedKV a = warp_tokens(q, q, identity_theta(N));
  MppaResult r = mppa(q, a.key, a.value);
  for (std::size_t i = 0; i < N; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      EXPECT_GE(r.map.scores[i * N + j], 0.0);
      z += r.map.scores[i * N + j];
    }
    EXPECT_NEAR(z, 1.0, 1e-9);
  }
  Tensor shifted = masked_softmax_rows(add_scalar(r.map.raw, 7.25), r.map.mask);
  EXPECT_LE(max_abs_diff(shifted, r.map.scores), 1e-12);
}

TEST(Mppa, EmptyKeyRowThrows) {
  Tensor fq = Tensor::ones({1, 1, 2, 2});
  PatchSet q{fq, fq, {1, 1, 1, 2, 2}, Role::query};
  AlignedPatchSet k{reshape(fq, {1, 1, 1, 2, 2}), reshape(fq, {1, 1, 1, 2, 2}), q.geom, Role::key};
  EXPECT_THROW(mppa(q, k, k, {}, std::make_shared<const std::vector<std::uint8_t>>(1, 0)), std::invalid_argument);
}

TEST(Mppa, ScaledOptionDividesLogits) {
  std::mt19937_64 rng(7);
  PatchSet q = extract_patches(Tensor::uniform({1, 2, 4, 4}, rng), Tensor::zeros({1, 1, 4, 4}), 2);
  AlignedKV a = warp_tokens(q, q, identity_theta(4));
  MppaOptions opt;
  Tensor plain = attention_logits(q, a.key, opt);
  opt.scaled = true;
  Tensor scaled = attention_logits(q, a.key, opt);
  for (std::size_t i = 0; i < plain.numel(); ++i) EXPECT_NEAR(scaled[i], plain[i] / std::sqrt(8.0), 1e-12);
}

TEST(Mppa, SharedFormMatchesPerQueryForm) {
  std::mt19937_64 rng(8);
  Tensor mask({2, 1, 4, 4});
  std::bernoulli_distribution coin(0.3);
  for (double& m : mask.data()) m = coin(rng);
  PatchSet q = extract_patches(Tensor::uniform({2, 3, 4, 4}, rng), mask, 4);
  PatchSet kv = extract_patches(Tensor::uniform({2, 3, 4, 4}, rng), mask, 4);
  const std::size_t N = q.geom.count();
  AlignedKV a = warp_tokens(kv, kv, identity_theta(N));
  ASSERT_TRUE(a.key.shared());
  AlignedPatchSet k5{per_query(a.key.tokens, N), per_query(a.key.valid, N), a.key.geom, Role::key};
  AlignedPatchSet v5{per_query(a.value.tokens, N), per_query(a.value.valid, N), a.value.geom, Role::value};
  MppaResult shared = mppa(q, a.key, a.value), full = mppa(q, k5, v5);
  EXPECT_LE(max_abs_diff(shared.map.raw, full.map.raw), 1e-12);
  EXPECT_LE(max_abs_diff(shared.output, full.output), 1e-12);
}

TEST(Mppa, CountsAttentionMacs) {
  std::mt19937_64 rng(9);
  PatchSet q = extract_patches(Tensor::uniform({1, 2, 4, 4}, rng), Tensor::zeros({1, 1, 4, 4}), 2);
  AlignedKV a = warp_tokens(q, q, identity_theta(4));
  MacCounter mc;
  {
    CountScope scope(mc);
    mppa(q, a.key, a.value);
  }
  EXPECT_EQ(mc.attention, 2u * 4 * 4 * 2 * 4);  // correlation and aggregation, Nq Nk C S each
}

TEST(Mppa, GradientThroughCorrelationSaliencySoftmaxAggregation) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t Nq = 3, Nk = 3;
    Tensor fq = Tensor::uniform({Nq, 2, 2, 2}, rng), vq = Tensor::uniform({Nq, 1, 2, 2}, rng, 0.1, 1.0);
    Tensor fk = Tensor::uniform({Nq, Nk, 2, 2, 2}, rng), vk = Tensor::uniform({Nq, Nk, 1, 2, 2}, rng, 0.1, 1.0);
    Tensor fv = Tensor::uniform({Nq, Nk, 2, 2, 2}, rng);
    Tensor probe = Tensor::uniform({Nq, 2, 2, 2}, rng);
    const auto norm = static_cast<SaliencyNormalizer>(seed % 3);
    auto mask = std::make_shared<std::vector<std::uint8_t>>(Nq * Nk, 1);
    (*mask)[1] = 0;
    auto f = [&](const std::vector<Tensor>& in) {
      Tensor attn = mul(pruned_correlation(in[0], in[1], in[2], in[3]), saliency(in[1], in[3], norm));
      return sum(mul(aggregate_values(masked_softmax_rows(attn, mask), in[4]), probe));
    };
    GradReport r = grad_check(f, {fq, vq, fk, vk, fv});
    EXPECT_TRUE(r.passed) << "seed " << seed << " worst " << r.worst();

    Tensor sk = Tensor::uniform({Nk, 2, 2, 2}, rng), svk = Tensor::uniform({Nk, 1, 2, 2}, rng, 0.1, 1.0);
    Tensor sv = Tensor::uniform({Nk, 2, 2, 2}, rng);
    auto g = [&](const std::vector<Tensor>& in) {
      Tensor attn = mul(pruned_correlation_shared(in[0], in[1], in[2], in[3]), saliency(in[1], in[3], norm));
      return sum(mul(aggregate_values(masked_softmax_rows(attn, mask), in[4]), probe));
    };
    GradReport rs = grad_check(g, {fq, vq, sk, svk, sv});
    EXPECT_TRUE(rs.passed) << "shared seed " << seed << " worst " << rs.worst();
  }
}
