#pragma once

// Independent reference computations used as test oracles. Written with
// plain loops and std::vector only, sharing no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

/// softmax(Q K^T) V for row-major Q [N, D], K [M, D], V [M, Dv]; no scaling.
inline Vec vanilla_attention(const Vec& q, const Vec& k, const Vec& v, std::size_t N, std::size_t M, std::size_t D,
                             std::size_t Dv, Vec* scores = nullptr) {
  Vec out(N * Dv, 0.0);
  if (scores) scores->assign(N * M, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    Vec logit(M);
    for (std::size_t j = 0; j < M; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) s += q[i * D + d] * k[j * D + d];
      logit[j] = s;
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double z = 0.0;
    for (double& l : logit) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < M; ++j) {
      const double a = logit[j] / z;
      if (scores) (*scores)[i * M + j] = a;
      for (std::size_t d = 0; d < Dv; ++d) out[i * Dv + d] += a * v[j * Dv + d];
    }
  }
  return out;
}

/// Direct-summation cross-correlation, x [B, Ci, H, W], w [Co, Ci, k, k].
inline Vec conv2d(const Vec& x, const Vec& w, const Vec& b, std::size_t B, std::size_t Ci, std::size_t H,
                  std::size_t W, std::size_t Co, std::size_t k, std::size_t stride, std::size_t pad, std::size_t& Ho,
                  std::size_t& Wo) {
  Ho = (H + 2 * pad - k) / stride + 1;
  Wo = (W + 2 * pad - k) / stride + 1;
  Vec out(B * Co * Ho * Wo, 0.0);
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t y = 0; y < Ho; ++y)
        for (std::size_t xx = 0; xx < Wo; ++xx) {
          double s = b.empty() ? 0.0 : b[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (std::size_t i = 0; i < k; ++i)
              for (std::size_t j = 0; j < k; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += w[((o * Ci + c) * k + i) * k + j] * x[((n * Ci + c) * H + iy) * W + ix];
              }
          out[((n * Co + o) * Ho + y) * Wo + xx] = s;
        }
  return out;
}

/// Bilinear interpolation with zero padding at a pixel-space point.
inline double bilinear(const Vec& img, std::size_t H, std::size_t W, double px, double py) {
  const double x0 = std::floor(px), y0 = std::floor(py);
  double s = 0.0;
  for (int dy = 0; dy <= 1; ++dy)
    for (int dx = 0; dx <= 1; ++dx) {
      const double xi = x0 + dx, yi = y0 + dy;
      const double wgt = (1.0 - std::abs(px - xi)) * (1.0 - std::abs(py - yi));
      if (xi < 0 || yi < 0 || xi >= static_cast<double>(W) || yi >= static_cast<double>(H)) continue;
      s += wgt * img[static_cast<std::size_t>(yi) * W + static_cast<std::size_t>(xi)];
    }
  return s;
}

inline double mse(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

inline double psnr(const Vec& a, const Vec& b) {
  const double m = mse(a, b);
  return m == 0.0 ? 99.0 : std::min(99.0, -10.0 * std::log10(m));
}

/// SSIM of single-channel H x W images: every 11x11 window evaluated with a
/// 2-D Gaussian kernel built directly, averaged over valid positions.
inline double ssim_gray(const Vec& a, const Vec& b, std::size_t H, std::size_t W) {
  const int n = 11;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Vec g(n * n);
  double z = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double di = i - 5, dj = j - 5;
      z += g[i * n + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
    }
  for (double& v : g) v /= z;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y = 0; y + n <= H; ++y)
    for (std::size_t x = 0; x + n <= W; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          ma += g[i * n + j] * a[(y + i) * W + x + j];
          mb += g[i * n + j] * b[(y + i) * W + x + j];
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          const double da = a[(y + i) * W + x + j] - ma, db = b[(y + i) * W + x + j] - mb;
          va += g[i * n + j] * da * da;
          vb += g[i * n + j] * db * db;
          cov += g[i * n + j] * da * db;
        }
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / static_cast<double>(count);
}

/// Luminance of an RGB image stored planar [3, H, W].
inline Vec luma(const Vec& rgb, std::size_t H, std::size_t W) {
  Vec y(H * W);
  for (std::size_t i = 0; i < H * W; ++i) y[i] = 0.299 * rgb[i] + 0.587 * rgb[H * W + i] + 0.114 * rgb[2 * H * W + i];
  return y;
}

}  // namespace oracle
