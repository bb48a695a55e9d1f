#pragma once

// Synthetic clips and masks, frame-window scheduling, PSNR/SSIM and
// PPM/PGM frame directories.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "devit/tensor.hpp"

namespace devit {

// ---------------------------------------------------------------- synthesis

enum class MotionType { A, B, C };

inline MotionType parse_motion(const std::string& s) {
  if (s == "A" || s == "a") return MotionType::A;
  if (s == "B" || s == "b") return MotionType::B;
  if (s == "C" || s == "c") return MotionType::C;
  throw std::invalid_argument("unknown motion type '" + s + "' (expected A, B or C)");
}

/// A: static. B: constant velocity (vx, vy) px/frame for background and
/// object. C: background velocity oscillates around (vx, vy) with amplitude
/// `wobble`, the object follows a circular path.
struct MotionSpec {
  MotionType type = MotionType::B;
  double vx = 2.0;
  double vy = 0.0;
  double wobble = 3.0;
  double period = 5.0;  // frames per oscillation (type C)
  std::uint64_t texture_seed = 0;
  bool disk = false;  // foreground shape, square otherwise

  static MotionSpec preset(MotionType t) {
    MotionSpec s;
    s.type = t;
    if (t == MotionType::A) s.vx = s.vy = 0.0;
    if (t == MotionType::C) {
      s.vx = 3.0;
      s.vy = 1.0;
    }
    return s;
  }
};

struct VideoClip {
  Tensor frames;  // [T, 3, H, W] in [0, 1]
  Tensor masks;   // [T, 1, H, W], 1 = hole
  Tensor truth;   // optional ground truth, same shape as frames

  std::size_t length() const { return frames.defined() ? frames.dim(0) : 0; }
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline double lattice(std::uint64_t seed, long ix, long iy, std::uint64_t ch) {
  std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(ix) * 0x632be59bd9b4e019ull +
                                             static_cast<std::uint64_t>(iy) * 0x85157af5ull + ch * 0x9e3779b1ull));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Smoothly interpolated lattice noise in [0, 1] with the given cell size.
inline double value_noise(std::uint64_t seed, double x, double y, double cell, std::uint64_t ch) {
  const double fx = x / cell, fy = y / cell;
  const long ix = static_cast<long>(std::floor(fx)), iy = static_cast<long>(std::floor(fy));
  double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
  tx = tx * tx * (3.0 - 2.0 * tx);
  ty = ty * ty * (3.0 - 2.0 * ty);
  const double a = lattice(seed, ix, iy, ch), b = lattice(seed, ix + 1, iy, ch);
  const double c = lattice(seed, ix, iy + 1, ch), d = lattice(seed, ix + 1, iy + 1, ch);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

inline double texture(std::uint64_t seed, double x, double y, std::uint64_t ch) {
  return 0.15 + 0.7 * (0.65 * value_noise(seed, x, y, 12.0, ch) + 0.35 * value_noise(seed, x, y, 5.0, ch + 7));
}

}  // namespace detail

/// Textured background plus a moving foreground object; ground truth = frames.
inline VideoClip synth_clip(const MotionSpec& spec, std::size_t T, std::size_t H, std::size_t W, std::uint64_t seed) {
  if (H < 16 || W < 16) throw std::invalid_argument("synth_clip: frames must be at least 16x16");
  if (T == 0) throw std::invalid_argument("synth_clip: need at least one frame");
  const std::uint64_t tex = detail::splitmix(seed ^ detail::splitmix(spec.texture_seed + 1));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double side = std::max(4.0, static_cast<double>(std::min(H, W)) / 4.0);
  const double ox = u(rng) * (static_cast<double>(W) - side), oy = u(rng) * (static_cast<double>(H) - side);
  std::array<double, 3> color{0.1 + 0.8 * u(rng), 0.1 + 0.8 * u(rng), 0.1 + 0.8 * u(rng)};

  VideoClip clip;
  clip.frames = Tensor({T, 3, H, W});
  clip.masks = Tensor({T, 1, H, W});
  double bx = 0.0, by = 0.0;  // accumulated background shift
  for (std::size_t t = 0; t < T; ++t) {
    const double ft = static_cast<double>(t);
    double px = ox, py = oy;  // object top-left
    if (spec.type == MotionType::B) {
      bx = spec.vx * ft;
      by = spec.vy * ft;
      px += bx;
      py += by;
    } else if (spec.type == MotionType::C) {
      if (t > 0) {
        const double phase = 2.0 * M_PI * (ft - 1.0) / spec.period;
        bx += spec.vx + spec.wobble * std::sin(phase);
        by += spec.vy + spec.wobble * std::cos(phase);
      }
      const double r = side / 2.0, ang = 2.0 * M_PI * ft / spec.period;
      px += r * std::cos(ang) + 1.5 * ft;
      py += r * std::sin(ang);
    }
    // keep the object on screen by reflecting its position
    auto reflect = [](double p, double span) {
      if (span <= 0) return 0.0;
      double m = std::fmod(p, 2.0 * span);
      if (m < 0) m += 2.0 * span;
      return m <= span ? m : 2.0 * span - m;
    };
    px = reflect(px, static_cast<double>(W) - side);
    py = reflect(py, static_cast<double>(H) - side);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double fx = static_cast<double>(x), fy = static_cast<double>(y);
        bool inside;
        if (spec.disk) {
          const double dx = fx + 0.5 - (px + side / 2), dy = fy + 0.5 - (py + side / 2);
          inside = dx * dx + dy * dy <= side * side / 4;
        } else {
          inside = fx >= px && fx < px + side && fy >= py && fy < py + side;
        }
        for (std::size_t c = 0; c < 3; ++c) {
          double v = inside ? color[c] * (0.85 + 0.3 * detail::value_noise(tex + 99, fx - px, fy - py, 4.0, c))
                            : detail::texture(tex, fx - bx, fy - by, c);
          clip.frames[((t * 3 + c) * H + y) * W + x] = std::clamp(v, 0.0, 1.0);
        }
      }
  }
  clip.truth = clip.frames.clone();
  return clip;
}

enum class MaskKind { stationary, moving };

inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "stationary") return MaskKind::stationary;
  if (s == "moving") return MaskKind::moving;
  throw std::invalid_argument("unknown mask kind '" + s + "' (expected stationary or moving)");
}

/// Free-form blob masks. Each frame marks exactly round(coverage * H * W)
/// pixels: the highest values of a noisy radial field around the blob center.
inline Tensor gen_masks(MaskKind kind, std::size_t T, std::size_t H, std::size_t W, std::uint64_t seed,
                        double coverage) {
  if (!(coverage > 0.0 && coverage <= 0.9)) throw std::invalid_argument("gen_masks: coverage must be in (0, 0.9]");
  if (T == 0 || H == 0 || W == 0) throw std::invalid_argument("gen_masks: empty mask volume");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double fw = static_cast<double>(W), fh = static_cast<double>(H);
  double cx = fw * (0.3 + 0.4 * u(rng)), cy = fh * (0.3 + 0.4 * u(rng));
  const double speed = 1.0 + 2.0 * u(rng), dir = 2.0 * M_PI * u(rng);
  double vx = speed * std::cos(dir), vy = speed * std::sin(dir);
  const std::uint64_t shape_seed = rng();
  const double radius = std::sqrt(coverage * fw * fh / M_PI);
  const std::size_t HW = H * W;
  const std::size_t k = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(coverage * fw * fh)), 1, HW);

  Tensor m({T, 1, H, W});
  std::vector<double> field(HW);
  std::vector<std::size_t> order(HW);
  for (std::size_t t = 0; t < T; ++t) {
    if (t > 0 && kind == MaskKind::moving) {
      cx += vx;
      cy += vy;
      if (cx < 0.25 * fw || cx > 0.75 * fw) {
        vx = -vx;
        cx = std::clamp(cx, 0.25 * fw, 0.75 * fw);
      }
      if (cy < 0.25 * fh || cy > 0.75 * fh) {
        vy = -vy;
        cy = std::clamp(cy, 0.25 * fh, 0.75 * fh);
      }
    }
    if (t > 0 && kind == MaskKind::stationary) {
      std::copy(m.data().begin(), m.data().begin() + static_cast<std::ptrdiff_t>(HW),
                m.data().begin() + static_cast<std::ptrdiff_t>(t * HW));
      continue;
    }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        const double d = std::sqrt(dx * dx + dy * dy) / std::max(radius, 1.0);
        field[y * W + x] = -d + 0.8 * detail::value_noise(shape_seed, dx, dy, std::max(radius / 2, 2.0), 0);
      }
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return field[a] > field[b] || (field[a] == field[b] && a < b); });
    for (std::size_t i = 0; i < k; ++i) m[t * HW + order[i]] = 1.0;
  }
  return m;
}

// ---------------------------------------------------------------- windows

struct FrameWindow {
  std::size_t target = 1;  // 1-based
  std::size_t neighbors = 2;
  std::size_t stride = 5;
  std::vector<std::size_t> indices;  // sorted, unique, 1-based

  /// Position of the target inside `indices`.
  std::size_t target_slot() const {
    return static_cast<std::size_t>(std::find(indices.begin(), indices.end(), target) - indices.begin());
  }
};

inline FrameWindow sliding_window_schedule(std::size_t t, std::size_t T, std::size_t n_w, std::size_t s) {
  if (T == 0 || t < 1 || t > T)
    throw std::invalid_argument("sliding_window_schedule: target " + std::to_string(t) + " outside [1, " +
                                std::to_string(T) + "]");
  if (s < 1) throw std::invalid_argument("sliding_window_schedule: stride must be >= 1");
  FrameWindow w{t, n_w, s, {}};
  const std::size_t lo = t > n_w ? t - n_w : 1, hi = std::min(T, t + n_w);
  for (std::size_t i = lo; i <= hi; ++i) w.indices.push_back(i);
  for (std::size_t i = 1; i <= T; i += s) w.indices.push_back(i);
  std::sort(w.indices.begin(), w.indices.end());
  w.indices.erase(std::unique(w.indices.begin(), w.indices.end()), w.indices.end());
  return w;
}

/// Frames [T, C, H, W] restricted to the 1-based indices of a window.
inline Tensor select_frames(const Tensor& x, const std::vector<std::size_t>& indices) {
  const std::size_t per = x.numel() / x.dim(0);
  Shape s = x.shape();
  s[0] = indices.size();
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 1 || indices[i] > x.dim(0)) throw std::out_of_range("select_frames: index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((indices[i] - 1) * per), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

// ---------------------------------------------------------------- metrics

inline constexpr double kPsnrSentinel = 99.0;

inline double psnr(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("psnr: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  if (pred.numel() == 0) throw std::invalid_argument("psnr: empty input");
  double se = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - gt[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.numel());
  if (mse == 0.0) return kPsnrSentinel;
  return std::min(kPsnrSentinel, 10.0 * std::log10(1.0 / mse));
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> g(n);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

/// [..., C, H, W] with C in {1, 3} -> list of [H*W] luminance planes.
inline std::vector<std::vector<double>> luminance_planes(const Tensor& x, std::size_t& H, std::size_t& W) {
  if (x.rank() < 3) throw ShapeError("ssim: expected [..., C, H, W], got " + shape_str(x.shape()));
  const std::size_t r = x.rank(), C = x.dim(r - 3);
  H = x.dim(r - 2);
  W = x.dim(r - 1);
  if (C != 1 && C != 3) throw ShapeError("ssim: channel count must be 1 or 3, got " + std::to_string(C));
  const std::size_t planes = x.numel() / (C * H * W), HW = H * W;
  std::vector<std::vector<double>> out(planes, std::vector<double>(HW));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < HW; ++i) {
      const std::size_t base = p * C * HW + i;
      out[p][i] = C == 1 ? x[base] : 0.299 * x[base] + 0.587 * x[base + HW] + 0.114 * x[base + 2 * HW];
    }
  return out;
}

/// Mean local SSIM over fully contained Gaussian windows of the luminance.
inline double ssim(const Tensor& pred, const Tensor& gt, const SsimParams& prm = {}) {
  if (pred.shape() != gt.shape())
    throw ShapeError("ssim: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  std::size_t H = 0, W = 0;
  auto a = luminance_planes(pred, H, W);
  auto b = luminance_planes(gt, H, W);
  const std::size_t n = prm.window;
  if (H < n || W < n)
    throw std::invalid_argument("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                                " is smaller than the " + std::to_string(n) + "x" + std::to_string(n) + " window");
  const auto g = gaussian_window(n, prm.sigma);
  const double c1 = (prm.k1 * prm.range) * (prm.k1 * prm.range), c2 = (prm.k2 * prm.range) * (prm.k2 * prm.range);
  const std::size_t oh = H - n + 1, ow = W - n + 1;

  // separable valid filtering: rows then columns
  auto filter = [&](const std::vector<double>& img) {
    std::vector<double> tmp(H * ow), out(oh * ow);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * img[y * W + x + i];
        tmp[y * ow + x] = s;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += g[i] * tmp[(y + i) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };

  double total = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    std::vector<double> aa(H * W), bb(H * W), ab(H * W);
    for (std::size_t i = 0; i < H * W; ++i) {
      aa[i] = a[p][i] * a[p][i];
      bb[i] = b[p][i] * b[p][i];
      ab[i] = a[p][i] * b[p][i];
    }
    const auto mu_a = filter(a[p]), mu_b = filter(b[p]), s_aa = filter(aa), s_bb = filter(bb), s_ab = filter(ab);
    double acc = 0.0;
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double va = s_aa[i] - mu_a[i] * mu_a[i], vb = s_bb[i] - mu_b[i] * mu_b[i];
      const double cov = s_ab[i] - mu_a[i] * mu_b[i];
      acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(a.size());
}

// ---------------------------------------------------------------- image I/O

namespace io {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Image {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

inline Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (in.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(c);
    }
    return t;
  };
  const std::string magic = token();
  Image img;
  if (magic == "P6") img.channels = 3;
  else if (magic == "P5") img.channels = 1;
  else throw ImageError(path.string() + ": malformed header (magic '" + magic + "')");
  long w = 0, h = 0, maxval = 0;
  try {
    w = std::stol(token());
    h = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw ImageError(path.string() + ": malformed header");
  }
  if (w <= 0 || h <= 0) throw ImageError(path.string() + ": malformed header (non-positive size)");
  if (maxval != 255) throw ImageError(path.string() + ": unsupported maxval " + std::to_string(maxval));
  img.width = static_cast<std::size_t>(w);
  img.height = static_cast<std::size_t>(h);
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw ImageError(path.string() + ": truncated pixel data");
  return img;
}

inline void write_pnm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Sorted regular files of a directory with the given extension.
inline std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir, const std::string& ext) {
  if (!std::filesystem::is_directory(dir)) throw ImageError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// channels 3: PPM frames in [0,1]; channels 1: PGM masks, > 127 -> 1 (hole).
inline Tensor read_sequence(const std::filesystem::path& dir, std::size_t channels) {
  const auto files = list_files(dir, channels == 3 ? ".ppm" : ".pgm");
  if (files.empty()) throw ImageError("no " + std::string(channels == 3 ? ".ppm" : ".pgm") + " files in " + dir.string());
  std::size_t H = 0, W = 0;
  std::vector<Image> imgs;
  for (const auto& f : files) {
    Image img = read_pnm(f);
    if (img.channels != channels)
      throw ImageError(f.string() + ": expected " + std::to_string(channels) + " channel(s), found " +
                       std::to_string(img.channels));
    if (imgs.empty()) {
      H = img.height;
      W = img.width;
    } else if (img.height != H || img.width != W) {
      throw ImageError("dimension mismatch in " + f.string() + ": " + std::to_string(img.width) + "x" +
                       std::to_string(img.height) + " but sequence is " + std::to_string(W) + "x" + std::to_string(H));
    }
    imgs.push_back(std::move(img));
  }
  const std::size_t T = imgs.size(), HW = H * W;
  Tensor out({T, channels, H, W});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < HW; ++i)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::uint8_t v = imgs[t].pixels[i * channels + c];
        out[(t * channels + c) * HW + i] = channels == 1 ? (v > 127 ? 1.0 : 0.0) : v / 255.0;
      }
  return out;
}

inline void write_sequence(const std::filesystem::path& dir, const Tensor& x, const std::string& prefix) {
  if (x.rank() != 4 || (x.dim(1) != 1 && x.dim(1) != 3))
    throw ShapeError("write_sequence: expected [T,1|3,H,W], got " + shape_str(x.shape()));
  std::filesystem::create_directories(dir);
  const std::size_t T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), HW = H * W;
  for (std::size_t t = 0; t < T; ++t) {
    Image img{W, H, C, std::vector<std::uint8_t>(HW * C)};
    for (std::size_t i = 0; i < HW; ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double v = x[(t * C + c) * HW + i];
        img.pixels[i * C + c] = C == 1 ? (v >= 0.5 ? 255 : 0) : quantize(v);
      }
    char name[64];
    std::snprintf(name, sizeof name, "%s_%05zu.%s", prefix.c_str(), t, C == 3 ? "ppm" : "pgm");
    write_pnm(dir / name, img);
  }
}

inline Tensor read_frames(const std::filesystem::path& dir) { return read_sequence(dir, 3); }
inline Tensor read_masks(const std::filesystem::path& dir) { return read_sequence(dir, 1); }
inline void write_frames(const std::filesystem::path& dir, const Tensor& x) { write_sequence(dir, x, "frame"); }
inline void write_masks(const std::filesystem::path& dir, const Tensor& m) { write_sequence(dir, m, "mask"); }

/// Frames from `frames_dir` and masks from `masks_dir`; counts and sizes must agree.
inline VideoClip read_clip(const std::filesystem::path& frames_dir, const std::filesystem::path& masks_dir) {
  VideoClip c;
  c.frames = read_frames(frames_dir);
  c.masks = read_masks(masks_dir);
  if (c.masks.dim(0) != c.frames.dim(0) || c.masks.dim(2) != c.frames.dim(2) || c.masks.dim(3) != c.frames.dim(3))
    throw ImageError("mask sequence " + shape_str(c.masks.shape()) + " does not match frame sequence " +
                     shape_str(c.frames.shape()));
  return c;
}

}  // namespace io
}  // namespace devit
