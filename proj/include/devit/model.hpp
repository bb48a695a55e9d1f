#pragma once

// Encoder -> transformer blocks (alignment + pruned attention + spatial/temporal
// gate) -> decoder, the temporal patch discriminator, training losses and a
// small deterministic trainer for overfitting experiments.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "devit/depth.hpp"
#include "devit/mppa.hpp"
#include "devit/ops.hpp"
#include "devit/patch.hpp"
#include "devit/sta.hpp"

namespace devit {

struct GeneratorConfig {
  std::size_t height = 240;
  std::size_t width = 432;
  std::vector<std::size_t> encoder_channels{64, 64, 128, 256};  // strides 2, 1, 2, 1
  std::vector<std::size_t> decoder_channels{128, 64, 64};       // then 3 output channels
  std::size_t blocks = 8;
  HeadConfig heads{};
  std::size_t motion_dim = 6;
  std::size_t gate_hidden = 16;
  EstimatorInput estimator_input = EstimatorInput::concat;
  MppaOptions attention{};
  bool spectral_norm = false;

  std::size_t feature_channels() const { return encoder_channels.back(); }
  std::size_t feature_h() const { return height / 4; }
  std::size_t feature_w() const { return width / 4; }

  void validate() const {
    if (encoder_channels.size() != 4) throw std::invalid_argument("generator: encoder needs 4 conv layers");
    if (decoder_channels.size() != 3) throw std::invalid_argument("generator: decoder needs 3 hidden conv layers");
    check_input(height, width);
  }

  void check_input(std::size_t h, std::size_t w) const {
    if (h % 4 || w % 4)
      throw ShapeError("input size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 4");
    heads.validate(feature_channels(), h / 4, w / 4);
  }

  /// Uniform-width configuration used by the toy trainer and tests.
  static GeneratorConfig toy(std::size_t channels, std::size_t blocks, std::size_t h, std::size_t w) {
    GeneratorConfig c;
    c.height = h;
    c.width = w;
    c.encoder_channels = {channels, channels, channels, channels};
    c.decoder_channels = {channels, channels, channels};
    c.blocks = blocks;
    return c;
  }
};

struct DiscriminatorConfig {
  std::vector<std::size_t> channels{64, 128, 256, 256, 256, 256};
  double slope = 0.2;
  int power_iterations = 1;
};

struct LossWeights {
  double hole = 1.0;
  double valid = 1.0;
  double adv = 0.01;
};

// ---------------------------------------------------------------- parameters

struct ConvParam {
  Tensor w, b;
};

template <class Rng>
ConvParam make_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng, double gain = std::sqrt(2.0 / 1.04)) {
  const std::size_t fan_in = in * k * k;
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  return {Tensor::uniform({out, in, k, k}, rng, -bound, bound), Tensor::zeros({out})};
}

struct BlockWeights {
  EmbedWeights embed;
  EstimatorWeights estimator;
  Tensor deform_proj;  // [d_m, 12]
  StaWeights sta;
  ConvParam out;       // 1x1 projection after fusion
  ConvParam ffn;       // 3x3 feed-forward
};

struct GeneratorWeights {
  std::vector<ConvParam> encoder;
  std::vector<BlockWeights> blocks;
  std::vector<ConvParam> decoder;

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    auto conv = [&](const std::string& p, ConvParam& c) {
      out.emplace_back(p + ".w", &c.w);
      out.emplace_back(p + ".b", &c.b);
    };
    for (std::size_t i = 0; i < encoder.size(); ++i) conv("encoder." + std::to_string(i), encoder[i]);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      BlockWeights& b = blocks[i];
      const std::string p = "block." + std::to_string(i);
      out.emplace_back(p + ".embed.wq", &b.embed.wq);
      out.emplace_back(p + ".embed.bq", &b.embed.bq);
      out.emplace_back(p + ".embed.wk", &b.embed.wk);
      out.emplace_back(p + ".embed.bk", &b.embed.bk);
      out.emplace_back(p + ".embed.wv", &b.embed.wv);
      out.emplace_back(p + ".embed.bv", &b.embed.bv);
      out.emplace_back(p + ".estimator.conv1_w", &b.estimator.conv1_w);
      out.emplace_back(p + ".estimator.conv1_b", &b.estimator.conv1_b);
      out.emplace_back(p + ".estimator.conv2_w", &b.estimator.conv2_w);
      out.emplace_back(p + ".estimator.conv2_b", &b.estimator.conv2_b);
      out.emplace_back(p + ".estimator.fc_w", &b.estimator.fc_w);
      out.emplace_back(p + ".estimator.fc_b", &b.estimator.fc_b);
      out.emplace_back(p + ".deform_proj", &b.deform_proj);
      out.emplace_back(p + ".sta.motion_proj", &b.sta.motion_proj);
      out.emplace_back(p + ".sta.gate.w1", &b.sta.gate.w1);
      out.emplace_back(p + ".sta.gate.b1", &b.sta.gate.b1);
      out.emplace_back(p + ".sta.gate.w2", &b.sta.gate.w2);
      out.emplace_back(p + ".sta.gate.b2", &b.sta.gate.b2);
      conv(p + ".out", b.out);
      conv(p + ".ffn", b.ffn);
    }
    for (std::size_t i = 0; i < decoder.size(); ++i) conv("decoder." + std::to_string(i), decoder[i]);
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::uint64_t parameter_count() {
    std::uint64_t n = 0;
    for (Tensor* t : parameters()) n += t->numel();
    return n;
  }

  template <class Rng>
  static GeneratorWeights init(const GeneratorConfig& cfg, Rng& rng) {
    cfg.validate();
    GeneratorWeights g;
    std::size_t in = 4;
    for (std::size_t c : cfg.encoder_channels) {
      g.encoder.push_back(make_conv(c, in, 3, rng));
      in = c;
    }
    const std::size_t c = cfg.feature_channels();
    const std::size_t ch = cfg.heads.head_channels(c);
    const std::size_t coarse = cfg.heads.grids[cfg.heads.coarsest()];
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      BlockWeights bw;
      ConvParam q = make_conv(c, c, 1, rng, 1.0), k = make_conv(c, c, 1, rng, 1.0), v = make_conv(c, c, 1, rng, 1.0);
      bw.embed = {q.w, q.b, k.w, k.b, v.w, v.b};
      bw.estimator = EstimatorWeights::init(ch, cfg.feature_h() / coarse, cfg.feature_w() / coarse, rng,
                                            cfg.estimator_input);
      bw.deform_proj = Tensor::uniform({cfg.motion_dim, 12}, rng, -1.0 / std::sqrt(12.0), 1.0 / std::sqrt(12.0));
      bw.sta = StaWeights::init(c, cfg.motion_dim, rng, cfg.gate_hidden);
      bw.out = make_conv(c, c, 1, rng, 1.0);
      bw.ffn = make_conv(c, c, 3, rng);
      g.blocks.push_back(std::move(bw));
    }
    in = c;
    for (std::size_t d : cfg.decoder_channels) {
      g.decoder.push_back(make_conv(d, in, 3, rng));
      in = d;
    }
    g.decoder.push_back(make_conv(3, in, 3, rng, 1.0));
    for (Tensor* t : g.parameters()) t->set_requires_grad(true);
    return g;
  }
};

// ---------------------------------------------------------------- generator

struct BlockTrace {
  AffineParams theta;
  DeformationFactor deformation;
  std::vector<PatchSet> queries;  // per head
  std::vector<PatchSet> keys;     // per head, unwarped
  std::vector<PatchSet> values;   // per head, unwarped
  StaOutput sta;
};

class Generator {
 public:
  Generator(GeneratorConfig cfg, GeneratorWeights w) : cfg_(std::move(cfg)), w_(std::move(w)) {
    cfg_.validate();
    if (cfg_.spectral_norm) {
      std::uint64_t seed = 1;
      for (Tensor* t : w_.parameters())
        if (t->rank() == 4) sn_.emplace(t->node().get(), SpectralNorm(t->dim(0), seed++));
    }
  }

  const GeneratorConfig& config() const { return cfg_; }
  GeneratorWeights& weights() { return w_; }

  /// frames [T, 3, H, W] in [0, 1], masks [T, 1, H, W] (1 = hole) -> [T, c, H/4, W/4].
  Tensor encode(const Tensor& frames, const Tensor& masks) {
    check_clip(frames, masks);
    const std::size_t T = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
    Tensor x({T, 3, H, W});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < H * W; ++i) {
          const double m = masks[t * H * W + i];
          x[(t * 3 + c) * H * W + i] = (2.0 * frames[(t * 3 + c) * H * W + i] - 1.0) * (1.0 - m);
        }
    Tensor h = concat({x, masks.detach()}, 1);
    const std::size_t strides[4] = {2, 1, 2, 1};
    for (std::size_t i = 0; i < w_.encoder.size(); ++i)
      h = leaky_relu(conv2d(h, weight(w_.encoder[i].w), w_.encoder[i].b, strides[i], 1), 0.2);
    return h;
  }

  /// One transformer block. `feat_mask` is the hole mask at feature resolution.
  Tensor block(std::size_t index, const Tensor& x, const Tensor& feat_mask, BlockTrace* trace = nullptr) {
    BlockWeights& bw = w_.blocks.at(index);
    EmbedWeights ew = bw.embed;
    ew.wq = weight(ew.wq);
    ew.wk = weight(ew.wk);
    ew.wv = weight(ew.wv);
    QKV qkv = embed_qkv(x, ew);
    const std::size_t ch = cfg_.heads.head_channels(x.dim(1));
    std::vector<PatchSet> qs, ks, vs;
    for (std::size_t h = 0; h < cfg_.heads.heads(); ++h) {
      const std::size_t n = cfg_.heads.grids[h];
      qs.push_back(extract_patches(slice(qkv.q, 1, h * ch, ch), feat_mask, n, Role::query));
      ks.push_back(extract_patches(slice(qkv.k, 1, h * ch, ch), feat_mask, n, Role::key));
      vs.push_back(extract_patches(slice(qkv.v, 1, h * ch, ch), feat_mask, n, Role::value));
    }
    const std::size_t coarse = cfg_.heads.coarsest();
    AffineParams theta = estimate_theta(qs[coarse], ks[coarse], bw.estimator);
    DeformationFactor df = deformation_factor(theta, bw.deform_proj);
    std::vector<HeadInputs> heads;
    for (std::size_t h = 0; h < qs.size(); ++h)
      heads.push_back({qs[h], warp_tokens(ks[h], vs[h], theta, qs[coarse].geom)});
    StaOutput sta = sta_forward(heads, df.theta_prime, bw.sta, cfg_.attention);
    Tensor y = add(x, conv2d(sta.fused, weight(bw.out.w), bw.out.b));
    y = add(y, leaky_relu(conv2d(y, weight(bw.ffn.w), bw.ffn.b, 1, 1), 0.2));
    if (trace) {
      trace->theta = theta;
      trace->deformation = df;
      trace->queries = std::move(qs);
      trace->keys = std::move(ks);
      trace->values = std::move(vs);
      trace->sta = std::move(sta);
    }
    return y;
  }

  /// [T, c, h, w] -> [T, 3, 4h, 4w] in [-1, 1].
  Tensor decode(const Tensor& feat) {
    Tensor h = upsample2x(feat);
    h = leaky_relu(conv2d(h, weight(w_.decoder[0].w), w_.decoder[0].b, 1, 1), 0.2);
    h = leaky_relu(conv2d(h, weight(w_.decoder[1].w), w_.decoder[1].b, 1, 1), 0.2);
    h = upsample2x(h);
    h = leaky_relu(conv2d(h, weight(w_.decoder[2].w), w_.decoder[2].b, 1, 1), 0.2);
    return tanh(conv2d(h, weight(w_.decoder[3].w), w_.decoder[3].b, 1, 1));
  }

  struct Output {
    Tensor raw;        // [T, 3, H, W] generator prediction in [0, 1]
    Tensor composite;  // masks * raw + (1 - masks) * frames
    std::vector<BlockTrace> traces;
  };

  Output forward(const Tensor& frames, const Tensor& masks, bool keep_traces = false) {
    Tensor feat = encode(frames, masks);
    Tensor fmask = downsample_mask(masks, 4);
    Output out;
    for (std::size_t b = 0; b < w_.blocks.size(); ++b) {
      BlockTrace tr;
      feat = block(b, feat, fmask, keep_traces ? &tr : nullptr);
      if (keep_traces) out.traces.push_back(std::move(tr));
    }
    out.raw = add_scalar(scale(decode(feat), 0.5), 0.5);
    out.composite = paste_back(out.raw, frames, masks);
    return out;
  }

  /// Keeps input pixels outside the hole bit-exactly.
  static Tensor paste_back(const Tensor& pred, const Tensor& frames, const Tensor& masks) {
    const std::size_t T = frames.dim(0), HW = frames.dim(2) * frames.dim(3);
    Tensor keep(frames.shape()), take(frames.shape());
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < HW; ++i) {
          const double m = masks[t * HW + i];
          keep[(t * 3 + c) * HW + i] = m != 0.0 ? 0.0 : frames[(t * 3 + c) * HW + i];
          take[(t * 3 + c) * HW + i] = m;
        }
    Tensor composite = add(mul(pred, take), keep);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < HW; ++i)
          if (masks[t * HW + i] == 0.0) composite[(t * 3 + c) * HW + i] = frames[(t * 3 + c) * HW + i];
    return composite;
  }

 private:
  void check_clip(const Tensor& frames, const Tensor& masks) const {
    if (frames.rank() != 4 || frames.dim(1) != 3)
      throw ShapeError("generator: frames must be [T,3,H,W], got " + shape_str(frames.shape()));
    if (masks.rank() != 4 || masks.dim(1) != 1 || masks.dim(0) != frames.dim(0) || masks.dim(2) != frames.dim(2) ||
        masks.dim(3) != frames.dim(3))
      throw ShapeError("generator: masks " + shape_str(masks.shape()) + " do not match frames " +
                       shape_str(frames.shape()));
    cfg_.check_input(frames.dim(2), frames.dim(3));
  }

  Tensor weight(const Tensor& w) {
    if (!cfg_.spectral_norm) return w;
    auto it = sn_.find(w.node().get());
    return it == sn_.end() ? w : it->second.apply(w);
  }

  GeneratorConfig cfg_;
  GeneratorWeights w_;
  std::map<const void*, SpectralNorm> sn_;
};

// ---------------------------------------------------------------- discriminator

class Discriminator {
 public:
  template <class Rng>
  Discriminator(DiscriminatorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.channels.size() != 6) throw std::invalid_argument("discriminator: exactly six layers are required");
    std::size_t in = 3;
    std::uint64_t seed = 101;
    for (std::size_t c : cfg_.channels) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in * 75));
      layers_.push_back({Tensor::uniform({c, in, 3, 5, 5}, rng, -bound, bound).set_requires_grad(true),
                         Tensor::zeros({c}).set_requires_grad(true)});
      sn_.emplace_back(c, seed++);
      in = c;
    }
  }

  const DiscriminatorConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      out.emplace_back("disc." + std::to_string(i) + ".w", &layers_[i].w);
      out.emplace_back("disc." + std::to_string(i) + ".b", &layers_[i].b);
    }
    return out;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  /// Spectrally normalized weight of layer i as used in the forward pass.
  Tensor normalized_weight(std::size_t i) { return sn_.at(i).apply(layers_.at(i).w, cfg_.power_iterations); }

  /// video [T, 3, H, W] in [0, 1] -> score map [C, T, h, w] (no final nonlinearity).
  Tensor operator()(const Tensor& video) {
    if (video.rank() != 4 || video.dim(1) != 3)
      throw ShapeError("discriminator: video must be [T,3,H,W], got " + shape_str(video.shape()));
    if (video.dim(0) < 3)
      throw std::invalid_argument("discriminator: needs at least 3 frames for the temporal kernel, got " +
                                  std::to_string(video.dim(0)));
    const std::size_t T = video.dim(0), HW = video.dim(2) * video.dim(3);
    auto map = std::make_shared<std::vector<std::size_t>>(video.numel());
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < HW; ++i) (*map)[(c * T + t) * HW + i] = (t * 3 + c) * HW + i;
    Tensor h = add_scalar(scale(remap(video, {3, T, video.dim(2), video.dim(3)}, map), 2.0), -1.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = conv3d(h, normalized_weight(i), layers_[i].b, {1, 2, 2}, {1, 2, 2});
      if (i + 1 < layers_.size()) h = leaky_relu(h, cfg_.slope);
    }
    return h;
  }

  void set_weights_zero() {
    for (auto& l : layers_) {
      std::fill(l.w.data().begin(), l.w.data().end(), 0.0);
      std::fill(l.b.data().begin(), l.b.data().end(), 0.0);
    }
  }

 private:
  struct Layer {
    Tensor w, b;
  };
  DiscriminatorConfig cfg_;
  std::vector<Layer> layers_;
  std::vector<SpectralNorm> sn_;
};

inline Tensor discriminate(Discriminator& d, const Tensor& video) { return d(video); }

// ---------------------------------------------------------------- losses

struct ReconstructionLoss {
  Tensor hole;
  Tensor valid;
  bool hole_empty = false;
  bool valid_empty = false;
};

/// Per-element mean absolute error inside and outside the hole.
inline ReconstructionLoss loss_reconstruction(const Tensor& pred, const Tensor& target, const Tensor& masks) {
  detail::require_same_shape(pred, target, "loss_reconstruction");
  if (masks.rank() != 4 || masks.dim(0) != pred.dim(0) || masks.dim(2) != pred.dim(2) || masks.dim(3) != pred.dim(3))
    throw ShapeError("loss_reconstruction: masks " + shape_str(masks.shape()) + " do not match " +
                     shape_str(pred.shape()));
  const std::size_t T = pred.dim(0), C = pred.dim(1), HW = pred.dim(2) * pred.dim(3);
  Tensor hole(pred.shape()), valid(pred.shape());
  double nh = 0.0, nv = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const double m = masks[t * HW + i];
        hole[(t * C + c) * HW + i] = m;
        valid[(t * C + c) * HW + i] = 1.0 - m;
        nh += m;
        nv += 1.0 - m;
      }
  Tensor err = abs(sub(pred, target));
  ReconstructionLoss out;
  out.hole_empty = nh == 0.0;
  out.valid_empty = nv == 0.0;
  out.hole = out.hole_empty ? Tensor::scalar(0.0) : scale(sum(mul(err, hole)), 1.0 / nh);
  out.valid = out.valid_empty ? Tensor::scalar(0.0) : scale(sum(mul(err, valid)), 1.0 / nv);
  return out;
}

struct GanLoss {
  Tensor discriminator;  // hinge loss L_D
  Tensor adversarial;    // L_adv
};

inline GanLoss loss_gan(const Tensor& d_real, const Tensor& d_fake) {
  Tensor ld = add(mean(relu(scale(add_scalar(d_real, -1.0), -1.0))), mean(relu(add_scalar(d_fake, 1.0))));
  return {ld, scale(mean(d_fake), -1.0)};
}

struct LossParts {
  Tensor hole, valid, adv;
};

inline Tensor total_loss(const LossParts& p, const LossWeights& w) {
  Tensor t = add(scale(p.hole, w.hole), scale(p.valid, w.valid));
  return p.adv.defined() ? add(t, scale(p.adv, w.adv)) : t;
}

// ---------------------------------------------------------------- complexity

/// Inputs of the complexity expression for a generator: every block
/// contributes its 1x1 output projection and its 3x3 feed-forward layer.
inline FlopsConfig flops_config(const GeneratorConfig& g, std::size_t frames) {
  g.validate();
  FlopsConfig f;
  f.frames = frames;
  f.height = g.feature_h();
  f.width = g.feature_w();
  f.patches.clear();
  for (std::size_t n : g.heads.grids) f.patches.push_back(n * n);
  const std::size_t c = g.feature_channels();
  for (std::size_t b = 0; b < g.blocks; ++b) {
    f.layers.push_back({1, c, c});
    f.layers.push_back({3, c, c});
  }
  return f;
}

inline FlopsReport generator_flops(const GeneratorConfig& g, std::size_t frames) {
  FlopsReport r = flops_estimate(flops_config(g, frames));
  std::mt19937_64 rng(0);
  r.parameters = GeneratorWeights::init(g, rng).parameter_count();
  return r;
}

// ---------------------------------------------------------------- optimizer

class Adam {
 public:
  Adam(std::vector<Tensor*> params, double lr = 1e-4, double beta1 = 0.99, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (Tensor* p : params_) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void zero_grad() {
    for (Tensor* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = *params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto x = p.data();
      for (std::size_t j = 0; j < x.size(); ++j) {
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g[j];
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g[j] * g[j];
        x[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, b1_, b2_, eps_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------- trainer

struct TrainConfig {
  std::size_t iters = 500;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  double beta1 = 0.99;
  double beta2 = 0.999;
  LossWeights loss{};
};

struct LossRow {
  std::size_t iter = 0;
  double hole = 0, valid = 0, adv = 0, disc = 0, total = 0;
};

struct TrainResult {
  std::vector<LossRow> trace;
  GeneratorWeights weights;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check_toy_limits(const GeneratorConfig& g, std::size_t frames) {
  for (std::size_t c : g.encoder_channels)
    if (c > 32) throw std::invalid_argument("toy trainer: channel widths must be <= 32");
  for (std::size_t c : g.decoder_channels)
    if (c > 32) throw std::invalid_argument("toy trainer: channel widths must be <= 32");
  if (g.blocks != 1) throw std::invalid_argument("toy trainer: exactly one transformer block is supported");
  if (g.height > 64 || g.width > 64) throw std::invalid_argument("toy trainer: frames must be at most 64x64");
  if (frames == 0 || frames > 8) throw std::invalid_argument("toy trainer: clip must have 1..8 frames");
}

/// Overfits the generator (and, when the adversarial weight is positive, the
/// discriminator) to one clip. Row i of the trace holds the losses evaluated
/// before update i; the final row is evaluated after the last update.
inline TrainResult train_toy(const Tensor& frames, const Tensor& masks, const Tensor& target,
                             const GeneratorConfig& gcfg, const DiscriminatorConfig& dcfg, const TrainConfig& tcfg,
                             const std::function<void(const LossRow&)>& on_row = {}) {
  check_toy_limits(gcfg, frames.dim(0));
  std::mt19937_64 rng(tcfg.seed);
  Generator gen(gcfg, GeneratorWeights::init(gcfg, rng));
  const bool adversarial = tcfg.loss.adv > 0.0;
  std::optional<Discriminator> disc;
  std::optional<Adam> dopt;
  if (adversarial) {
    disc.emplace(dcfg, rng);
    dopt.emplace(disc->parameters(), tcfg.lr, tcfg.beta1, tcfg.beta2);
  }
  Adam gopt(gen.weights().parameters(), tcfg.lr, tcfg.beta1, tcfg.beta2);

  TrainResult res;
  for (std::size_t it = 0; it <= tcfg.iters; ++it) {
    const bool update = it < tcfg.iters;
    LossRow row;
    row.iter = it;
    if (adversarial && update) {
      Tensor fake;
      {
        NoGradGuard ng;
        fake = gen.forward(frames, masks).composite;
      }
      dopt->zero_grad();
      GanLoss dl = loss_gan((*disc)(target), (*disc)(fake.detach()));
      backward(dl.discriminator);
      dopt->step();
      row.disc = dl.discriminator.item();
    }
    gopt.zero_grad();
    Generator::Output out = gen.forward(frames, masks);
    ReconstructionLoss rl = loss_reconstruction(out.raw, target, masks);
    LossParts parts{rl.hole, rl.valid, Tensor()};
    if (adversarial) parts.adv = loss_gan((*disc)(target), (*disc)(out.composite)).adversarial;
    Tensor total = total_loss(parts, tcfg.loss);
    row.hole = rl.hole.item();
    row.valid = rl.valid.item();
    row.adv = parts.adv.defined() ? parts.adv.item() : 0.0;
    row.total = total.item();
    if (!std::isfinite(row.total))
      throw DivergenceError("training diverged at iteration " + std::to_string(it) + " (non-finite loss)");
    res.trace.push_back(row);
    if (on_row) on_row(row);
    if (!update) break;
    backward(total);
    if (adversarial)
      for (Tensor* p : disc->parameters()) p->zero_grad();
    gopt.step();
  }
  res.weights = std::move(gen.weights());
  return res;
}

}  // namespace devit
