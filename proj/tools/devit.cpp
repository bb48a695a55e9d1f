// devit: synthetic clips, masks, toy training, inpainting and diagnostics.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <string>

#include "devit/config.hpp"
#include "devit/gradsuite.hpp"
#include "devit/harness.hpp"
#include "devit/io.hpp"
#include "devit/model.hpp"

using namespace devit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::pair<std::size_t, std::size_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw std::invalid_argument("size must look like HxW, got '" + s + "'");
  try {
    return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw std::invalid_argument("size must look like HxW, got '" + s + "'");
  }
}

// Reads the run configuration; a generator without explicit height/width takes the clip size.
RunConfig load_run_config(const std::string& path, std::size_t H, std::size_t W) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    try {
      in >> j;
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
    }
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  json& g = j["generator"];
  if (g.is_null()) g = json::object();
  if (g.is_object()) {
    if (!g.contains("height")) g["height"] = H;
    if (!g.contains("width")) g["width"] = W;
  }
  RunConfig c = parse_config(j);
  if (c.generator.height != H || c.generator.width != W)
    throw ConfigError("config: generator expects " + std::to_string(c.generator.height) + "x" +
                      std::to_string(c.generator.width) + " frames but the clip is " + std::to_string(H) + "x" +
                      std::to_string(W));
  return c;
}

int cmd_synth(const std::string& motion, std::size_t frames, const std::string& size, std::uint64_t seed,
              const std::string& out) {
  auto [H, W] = parse_size(size);
  VideoClip c = synth_clip(MotionSpec::preset(parse_motion(motion)), frames, H, W, seed);
  io::write_frames(out, c.frames);
  std::cerr << "wrote " << frames << " frames to " << out << "\n";
  return 0;
}

int cmd_mask(const std::string& kind, double coverage, std::uint64_t seed, std::size_t frames,
             const std::string& size, const std::string& out) {
  auto [H, W] = parse_size(size);
  io::write_masks(out, gen_masks(parse_mask_kind(kind), frames, H, W, seed, coverage));
  std::cerr << "wrote " << frames << " masks to " << out << "\n";
  return 0;
}

int cmd_train(const std::string& frames_dir, const std::string& masks_dir, std::size_t iters, std::uint64_t seed,
              const std::string& config, const std::string& out) {
  VideoClip clip = io::read_clip(frames_dir, masks_dir);
  RunConfig rc = load_run_config(config, clip.frames.dim(2), clip.frames.dim(3));
  rc.train.iters = iters;
  rc.train.seed = seed;
  fs::create_directories(out);
  std::ofstream csv(fs::path(out) / "loss.csv");
  csv << "iter,L_hole,L_valid,L_adv,L_D,total\n";
  csv.precision(10);
  TrainResult r = train_toy(clip.frames, clip.masks, clip.frames, rc.generator, rc.discriminator, rc.train,
                            [&](const LossRow& row) {
    csv << row.iter << ',' << row.hole << ',' << row.valid << ',' << row.adv << ',' << row.disc << ',' << row.total
        << '\n';
  });
  save_checkpoint((fs::path(out) / "checkpoint.dvt").string(), r.weights, rc.generator);
  std::ofstream(fs::path(out) / "config.json") << to_json(rc).dump(2) << '\n';
  std::cerr << "L_hole " << r.trace.front().hole << " -> " << r.trace.back().hole << " after " << iters
            << " iterations; checkpoint in " << out << "\n";
  return 0;
}

json dump_attention(const fs::path& dir, std::size_t target, const FrameWindow& win, const BlockTrace& tr) {
  fs::create_directories(dir);
  json heads = json::array();
  char stem[64];
  for (std::size_t h = 0; h < tr.sta.heads.size(); ++h) {
    const HeadBranches& hb = tr.sta.heads[h];
    std::snprintf(stem, sizeof stem, "t%05zu_h%zu", target, h);
    json entry{{"head", h},
               {"grid", hb.geom.grid},
               {"frames", hb.geom.frames},
               {"patches_per_frame", hb.geom.per_frame()},
               {"tokens", hb.geom.count()},
               {"token_order", "frame-major, row-major patches within a frame"},
               {"spatial_layout", "[query frame, query patch, key patch]"},
               {"temporal_layout", "[query frame, query patch, key frame (query frame skipped) x key patch]"}};
    // compact blocks: spatial [T, Np, Np]; temporal [T, Np, (T-1) Np] with the target frame's keys left out
    io::save_dvt((dir / (std::string(stem) + "_spatial.dvt")).string(),
                 branch_blocks(hb.spatial_map, hb.geom, Branch::spatial));
    entry["spatial"] = std::string(stem) + "_spatial.dvt";
    if (hb.temporal.defined()) {
      io::save_dvt((dir / (std::string(stem) + "_temporal.dvt")).string(),
                   branch_blocks(hb.temporal_map, hb.geom, Branch::temporal));
      entry["temporal"] = std::string(stem) + "_temporal.dvt";
    }
    heads.push_back(entry);
  }
  json side{{"target", target},
            {"window", win.indices},
            {"target_slot", win.target_slot()},
            {"w_spatial", tr.sta.w_spatial.item()},
            {"w_temporal", tr.sta.w_temporal.item()},
            {"heads", heads}};
  std::snprintf(stem, sizeof stem, "t%05zu.json", target);
  std::ofstream(dir / stem) << side.dump(2) << '\n';
  return side;
}

int cmd_inpaint(const std::string& frames_dir, const std::string& masks_dir, const std::string& ckpt,
                const std::string& config, std::size_t window, std::size_t stride, const std::string& out,
                const std::string& dump_dir) {
  VideoClip clip = io::read_clip(frames_dir, masks_dir);
  const std::size_t T = clip.frames.dim(0), H = clip.frames.dim(2), W = clip.frames.dim(3);
  RunConfig rc = load_run_config(config, H, W);
  Generator gen(rc.generator, load_checkpoint(ckpt, rc.generator));
  Tensor result({T, 3, H, W});
  const std::size_t per = 3 * H * W;
  NoGradGuard ng;
  for (std::size_t t = 1; t <= T; ++t) {
    FrameWindow win = sliding_window_schedule(t, T, window, stride);
    Generator::Output o = gen.forward(select_frames(clip.frames, win.indices), select_frames(clip.masks, win.indices),
                                      !dump_dir.empty());
    std::copy_n(o.composite.data().begin() + static_cast<std::ptrdiff_t>(win.target_slot() * per), per,
                result.data().begin() + static_cast<std::ptrdiff_t>((t - 1) * per));
    if (!dump_dir.empty()) dump_attention(dump_dir, t, win, o.traces.at(0));
  }
  io::write_frames(out, result);
  std::cerr << "inpainted " << T << " frames into " << out << "\n";
  return 0;
}

int cmd_metrics(const std::string& pred_dir, const std::string& gt_dir, const std::string& out) {
  Tensor pred = io::read_frames(pred_dir), gt = io::read_frames(gt_dir);
  if (pred.shape() != gt.shape())
    throw ShapeError("metrics: prediction " + shape_str(pred.shape()) + " vs ground truth " + shape_str(gt.shape()));
  const std::size_t T = pred.dim(0);
  std::vector<std::future<std::pair<double, double>>> jobs;
  for (std::size_t t = 0; t < T; ++t)
    jobs.push_back(std::async(std::launch::async, [&, t] {
      std::vector<std::size_t> idx{t + 1};
      Tensor p = select_frames(pred, idx), g = select_frames(gt, idx);
      return std::pair{psnr(p, g), ssim(p, g)};
    }));
  json frames = json::array();
  double sp = 0.0, ss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    auto [p, s] = jobs[t].get();
    frames.push_back({{"frame", t + 1}, {"psnr", p}, {"ssim", s}});
    sp += p;
    ss += s;
  }
  json j{{"psnr", psnr(pred, gt)}, {"ssim", ssim(pred, gt)}, {"mean_frame_psnr", sp / T},
         {"mean_frame_ssim", ss / T}, {"psnr_sentinel", kPsnrSentinel}, {"frames", frames}};
  std::ofstream(out) << j.dump(2) << '\n';
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_flops(const std::string& config, std::size_t frames) {
  RunConfig rc = config.empty() ? RunConfig{} : load_config(config);
  FlopsReport r = generator_flops(rc.generator, frames);
  json j{{"frames", frames},
         {"attention_spatial", r.attention_spatial},
         {"attention_temporal", r.attention_temporal},
         {"conv_per_layer", r.conv_per_layer},
         {"conv", r.conv},
         {"total", r.total},
         {"spatial_entries", r.spatial_entries},
         {"temporal_entries", r.temporal_entries},
         {"parameters", r.parameters},
         {"reference", {{"parameters", 28.8e6}, {"flops", 266e9}}},
         {"deviation_percent",
          {{"parameters", 100.0 * (static_cast<double>(r.parameters) / 28.8e6 - 1.0)},
           {"flops", 100.0 * (r.total / 266e9 - 1.0)}}}};
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& op, std::uint64_t seed) {
  std::vector<const GradCase*> cases;
  if (op.empty())
    for (const GradCase& c : grad_cases()) cases.push_back(&c);
  else
    cases.push_back(&find_grad_case(op));
  int failed = 0;
  for (const GradCase* c : cases) {
    GradReport r = c->run(seed);
    failed += !r.passed;
    std::printf("%-28s %s  max rel err %.3e (tol %.0e, step %.0e)\n", c->name.c_str(), r.passed ? "ok  " : "FAIL",
                r.worst(), r.tolerance, r.step);
  }
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video inpainting with deformed patch alignment and spatial-temporal attention"};
  app.require_subcommand(1);

  std::string motion = "B", size = "64x64", out, kind = "moving", frames_dir, masks_dir, config, ckpt, dump_dir;
  std::string pred_dir, gt_dir, op;
  std::size_t frames = 8, iters = 500, window = 2, stride = 5, flops_frames = 5;
  std::uint64_t seed = 0;
  double coverage = 0.2;

  auto* synth = app.add_subcommand("synth", "generate a synthetic clip (motion type A, B or C)");
  synth->add_option("--motion", motion, "A static, B panning, C agile")->check(CLI::IsMember({"A", "B", "C", "a", "b", "c"}));
  synth->add_option("--frames", frames, "number of frames")->check(CLI::PositiveNumber);
  synth->add_option("--size", size, "HxW");
  synth->add_option("--seed", seed);
  synth->add_option("--out", out, "output directory")->required();

  auto* mask = app.add_subcommand("mask", "generate free-form hole masks");
  mask->add_option("--kind", kind)->check(CLI::IsMember({"stationary", "moving"}));
  mask->add_option("--coverage", coverage, "fraction of each frame in the hole");
  mask->add_option("--seed", seed);
  mask->add_option("--frames", frames)->check(CLI::PositiveNumber);
  mask->add_option("--size", size, "HxW");
  mask->add_option("--out", out, "output directory")->required();

  auto* inpaint = app.add_subcommand("inpaint", "fill the holes of a clip with a trained generator");
  inpaint->add_option("--frames", frames_dir, "directory of PPM frames")->required();
  inpaint->add_option("--masks", masks_dir, "directory of PGM masks (255 = hole)")->required();
  inpaint->add_option("--ckpt", ckpt, "generator checkpoint")->required();
  inpaint->add_option("--config", config, "JSON configuration");
  inpaint->add_option("--window", window, "neighbors on each side of the target frame");
  inpaint->add_option("--stride", stride, "interval of the distant frames")->check(CLI::PositiveNumber);
  inpaint->add_option("--out", out, "output directory")->required();
  inpaint->add_option("--dump-attn", dump_dir, "write attention maps (DVT1 + JSON) here");

  auto* train = app.add_subcommand("train-toy", "overfit a small generator to one clip");
  train->add_option("--frames", frames_dir)->required();
  train->add_option("--masks", masks_dir)->required();
  train->add_option("--iters", iters);
  train->add_option("--seed", seed);
  train->add_option("--config", config, "JSON configuration");
  train->add_option("--out", out, "output directory for loss.csv and the checkpoint")->required();

  auto* metrics = app.add_subcommand("metrics", "PSNR and SSIM of a prediction against ground truth");
  metrics->add_option("--pred", pred_dir)->required();
  metrics->add_option("--gt", gt_dir)->required();
  metrics->add_option("--out", out, "JSON report")->required();

  auto* flops = app.add_subcommand("flops", "complexity estimate and parameter count");
  flops->add_option("--config", config, "JSON configuration (defaults to the full model)");
  flops->add_option("--frames", flops_frames, "input frames n")->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--op", op, "single check to run (default: all)");
  grad->add_option("--seed", seed);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return cmd_synth(motion, frames, size, seed, out);
    if (*mask) return cmd_mask(kind, coverage, seed, frames, size, out);
    if (*train) return cmd_train(frames_dir, masks_dir, iters, seed, config, out);
    if (*inpaint) return cmd_inpaint(frames_dir, masks_dir, ckpt, config, window, stride, out, dump_dir);
    if (*metrics) return cmd_metrics(pred_dir, gt_dir, out);
    if (*flops) return cmd_flops(config, flops_frames);
    if (*grad) return cmd_gradcheck(op, seed);
  } catch (const std::exception& e) {
    std::cerr << "devit: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
