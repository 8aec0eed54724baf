/*
 * Copyright 2026 The elan-sr Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// elan: super-resolve, profile, evaluate, train a toy model, self-check.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "elan/io.hpp"
#include "elan/testing/criteria.hpp"
#include "elan/train.hpp"

namespace fs = std::filesystem;

namespace {

int run_sr(const std::string& model, const std::string& in, const std::string& out, bool fold) {
  const auto ck = elan::load_checkpoint(model);
  const elan::Image lr = elan::read_image(in);
  const auto weights = fold ? elan::fold_batch_norm(ck.weights) : ck.weights;
  const auto hr = elan::forward(weights, ck.config, lr.to_tensor<float>());
  elan::write_image(elan::quantize(elan::Image::from_tensor(hr)), out);
  std::printf("%zux%zu -> %zux%zu (x%zu%s)\n", lr.width, lr.height, hr.w(), hr.h(), ck.config.scale,
              fold ? ", folded batch norm" : "");
  return 0;
}

std::pair<std::size_t, std::size_t> parse_resolution(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw elan::Error("resolution must look like 1280x720, got " + s);
  return {std::stoul(s.substr(0, x)), std::stoul(s.substr(x + 1))};
}

int run_profile(const std::string& preset, std::size_t scale, const std::string& res) {
  elan::ElanConfig cfg;
  if (preset == "elan-light") cfg = elan::ElanConfig::light(scale);
  else if (preset == "elan") cfg = elan::ElanConfig::normal(scale);
  else throw elan::ConfigError("unknown preset " + preset + " (elan-light, elan)");
  const auto [out_w, out_h] = parse_resolution(res);
  if (out_w % scale != 0 || out_h % scale != 0) throw elan::ConfigError("output resolution is not divisible by the scale");
  const auto r = elan::count_flops(cfg, out_h / scale, out_w / scale);
  std::printf("preset %s x%zu, output %zux%zu, LR input %zux%zu (attention on %zux%zu after window padding)\n",
              preset.c_str(), scale, out_w, out_h, r.lr_width, r.lr_height, r.padded_width, r.padded_height);
  std::printf("%-24s %16s %12s\n", "module", "MACs", "params");
  for (const auto& e : r.entries) {
    std::printf("%-24s %16llu %12llu\n", e.name.c_str(), static_cast<unsigned long long>(e.macs),
                static_cast<unsigned long long>(e.params));
  }
  std::printf("%-24s %16llu %12llu\n", "total", static_cast<unsigned long long>(r.total_macs),
              static_cast<unsigned long long>(r.total_params));
  std::printf("params: %.1fK trainable, %.1fK stored (with batch-norm running statistics)\n", r.total_params / 1e3,
              r.stored_scalars / 1e3);
  std::printf("FLOPs: %.2fG as MACs, %.2fG as 2 x MACs\n", r.total_macs / 1e9, r.total_flops() / 1e9);
  std::printf("attention core (q.k^T + scores.v): %.2fG MACs; score path (theta + q.k^T): %.2fG MACs\n",
              r.attention_core_macs / 1e9, r.score_path_macs / 1e9);
  return 0;
}

int run_eval(const std::string& hr_dir, const std::string& sr_dir, std::size_t scale) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(hr_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw elan::Error("no .ppm images in " + hr_dir);
  double psnr_sum = 0, ssim_sum = 0;
  std::size_t finite = 0;
  std::printf("%-32s %10s %8s\n", "image", "PSNR(Y)", "SSIM(Y)");
  for (const auto& f : files) {
    const auto hr = elan::read_image(f.string());
    const auto sr = elan::read_image((fs::path(sr_dir) / f.filename()).string());
    const double p = elan::psnr(hr, sr, scale), s = elan::ssim(hr, sr, scale);
    std::printf("%-32s %10.4f %8.4f\n", f.filename().string().c_str(), p, s);
    if (std::isfinite(p)) {
      psnr_sum += p;
      ++finite;
    }
    ssim_sum += s;
  }
  std::printf("%-32s %10.4f %8.4f\n", "mean", finite ? psnr_sum / double(finite) : elan::kPsnrIdentical,
              ssim_sum / double(files.size()));
  if (finite != files.size()) std::printf("(%zu identical pairs excluded from the PSNR mean)\n", files.size() - finite);
  return 0;
}

struct ToyFlags {
  std::string image;
  std::size_t steps = 500;
  std::uint64_t seed = 1;
  double lr = 2e-4;
  std::size_t scale = 4, patch = 32, blocks = 2, channels = 16;
  std::string save;
};

int run_train_toy(const ToyFlags& f) {
  const elan::Image hr = elan::read_image(f.image);
  const std::size_t lh = hr.height / f.scale, lw = hr.width / f.scale;
  if (lh == 0 || lw == 0) throw elan::ShapeError("image smaller than the scale factor");
  const elan::Image lr = elan::quantize(elan::bicubic_resize(hr, lh, lw));
  const std::size_t patch = std::min({f.patch, lh, lw});
  const auto pairs = elan::sample_patch_pairs<float>(hr, lr, f.scale, patch, 1, f.seed);
  const auto cfg = elan::ElanConfig::make(f.blocks, f.channels, f.scale);
  std::printf("# %zux%zu -> %zux%zu patch, %zu blocks, C=%zu, lr %g, seed %llu\n", patch, patch, patch * f.scale,
              patch * f.scale, f.blocks, f.channels, f.lr, static_cast<unsigned long long>(f.seed));
  std::printf("# step loss\n");
  auto r = elan::train_toy<float>(cfg, pairs, f.steps, f.seed, elan::TrainOptions{f.lr, 1, false},
                                  [](std::size_t step, double loss) { std::printf("%zu %.8f\n", step, loss); });
  if (!r.losses.empty()) {
    std::printf("# final/initial L1 = %.4f\n", r.losses.back() / r.losses.front());
  }
  if (!f.save.empty()) {
    elan::save_checkpoint(r.weights, cfg, f.save);
    std::printf("# saved %s\n", f.save.c_str());
  }
  return 0;
}

int run_check() {
  const char* env = std::getenv("ELAN_PRECISION");
  const std::string precision = env ? env : "f32";
  if (precision != "f32" && precision != "f64") {
    throw elan::ConfigError("ELAN_PRECISION must be f32 or f64, got " + precision);
  }
  std::printf("precision %s (gradient checks always run in f64)\n", precision.c_str());
  int failures = 0;
  auto report = [&](const elan::testing::CriterionResult& r) {
    std::printf("%s\n", elan::testing::format_result(r).c_str());
    std::fflush(stdout);
    if (!r.pass) ++failures;
  };
  if (precision == "f64") elan::testing::run_criteria<double>(report);
  else elan::testing::run_criteria<float>(report);
  std::printf("%d of 11 properties failed\n", failures);
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ELAN single-image super-resolution"};
  app.require_subcommand(1);

  std::string model, in, out;
  bool fold = false;
  auto* sr = app.add_subcommand("sr", "super-resolve a PPM image with a checkpoint");
  sr->add_option("--model", model, "checkpoint file")->required();
  sr->add_option("--in", in, "input PPM")->required();
  sr->add_option("--out", out, "output PPM")->required();
  sr->add_flag("--fold-bn", fold, "fold batch norm into the projections first");

  std::string preset = "elan-light", res = "1280x720";
  std::size_t scale = 4;
  auto* profile = app.add_subcommand("profile", "print MACs and parameter counts");
  profile->add_option("--preset", preset, "elan-light or elan")->capture_default_str();
  profile->add_option("--scale", scale, "2, 3 or 4")->capture_default_str();
  profile->add_option("--out-res", res, "output WIDTHxHEIGHT")->capture_default_str();

  std::string hr_dir, sr_dir;
  std::size_t eval_scale = 4;
  auto* eval = app.add_subcommand("eval", "Y-channel PSNR / SSIM of matching PPM files");
  eval->add_option("--hr", hr_dir, "ground-truth directory")->required();
  eval->add_option("--sr", sr_dir, "super-resolved directory")->required();
  eval->add_option("--scale", eval_scale, "border crop in pixels")->capture_default_str();

  ToyFlags toy;
  auto* train = app.add_subcommand("train-toy", "overfit one image; prints 'step loss' lines");
  train->add_option("--image", toy.image, "HR PPM image")->required();
  train->add_option("--steps", toy.steps)->capture_default_str();
  train->add_option("--seed", toy.seed)->capture_default_str();
  train->add_option("--lr", toy.lr)->capture_default_str();
  train->add_option("--scale", toy.scale)->capture_default_str();
  train->add_option("--patch", toy.patch, "LR patch size")->capture_default_str();
  train->add_option("--blocks", toy.blocks)->capture_default_str();
  train->add_option("--channels", toy.channels)->capture_default_str();
  train->add_option("--save", toy.save, "write the trained checkpoint here");

  auto* check = app.add_subcommand("check", "run the invariant, oracle and gradient suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*sr) return run_sr(model, in, out, fold);
    if (*profile) return run_profile(preset, scale, res);
    if (*eval) return run_eval(hr_dir, sr_dir, eval_scale);
    if (*train) return run_train_toy(toy);
    if (*check) return run_check();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
