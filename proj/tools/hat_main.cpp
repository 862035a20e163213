// Command-line front end: training, inference, evaluation, attribution and
// inspection subcommands over the core library.  Exit codes: 0 success,
// 1 usage/config problems, 2 runtime failures.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "hat/analysis.hpp"
#include "hat/complexity.hpp"
#include "hat/io.hpp"
#include "hat/train.hpp"

namespace fs = std::filesystem;

namespace {

bool has_image_suffix(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm";
}

// Image files of a directory, sorted by filename for stable pairing.
std::vector<fs::path> list_images(const std::string& dir) {
  if (!fs::is_directory(dir)) {
    throw hat::UsageError("not a directory: " + dir);
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && has_image_suffix(entry.path())) {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) {
              return a.filename().string() < b.filename().string();
            });
  if (files.empty()) {
    throw hat::UsageError("no .png or .ppm files in " + dir);
  }
  return files;
}

hat::RunConfig load_run_config(const std::string& config_path) {
  if (config_path.empty()) return hat::RunConfig{};
  return hat::parse_config(config_path);
}

// "64x64" -> {64, 64}
std::pair<std::int64_t, std::int64_t> parse_size(const std::string& text) {
  const std::size_t cut = text.find('x');
  if (cut == std::string::npos || cut == 0 || cut + 1 == text.size()) {
    throw hat::UsageError("expected HxW (e.g. 64x64), got '" + text + "'");
  }
  try {
    const std::int64_t h = std::stoll(text.substr(0, cut));
    const std::int64_t w = std::stoll(text.substr(cut + 1));
    if (h < 1 || w < 1) throw hat::UsageError("size must be positive: " + text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw hat::UsageError("expected HxW (e.g. 64x64), got '" + text + "'");
  }
}

// Model from config + optional checkpoint; without a checkpoint the weights
// stay at their seeded random init (announced on stderr so nobody mistakes
// the output for a trained model's).
hat::HatModel build_model(const hat::RunConfig& cfg, const std::string& ckpt,
                          bool strict) {
  hat::Rng rng(cfg.train.seed);
  hat::HatModel model = hat::HatModel::create(cfg.model, rng);
  if (!ckpt.empty()) {
    hat::ParamTree params = model.params();
    const hat::ParamTree loaded = hat::load_checkpoint(ckpt);
    const hat::ApplyReport report =
        hat::apply_checkpoint(params, loaded, strict);
    if (!report.skipped_source.empty() || !report.missing_target.empty()) {
      std::cerr << "note: loaded " << report.loaded.size() << " tensors from "
                << ckpt << ", skipped " << report.skipped_source.size()
                << " checkpoint entries, left " << report.missing_target.size()
                << " model tensors at their init\n";
    }
  } else {
    std::cerr << "note: no checkpoint given, using seed " << cfg.train.seed
              << " random weights\n";
  }
  return model;
}

std::string format_psnr(double db) {
  if (std::isinf(db)) return "inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", db);
  return buf;
}

std::string format_ssim(double s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", s);
  return buf;
}

// Min-max normalized grayscale rendering of a nonnegative plane.
hat::Tensor normalize_plane(const hat::Tensor& plane) {
  hat::Tensor out(plane.shape());
  double lo = plane.data()[0], hi = plane.data()[0];
  for (std::int64_t i = 1; i < plane.numel(); ++i) {
    lo = std::min(lo, static_cast<double>(plane.data()[i]));
    hi = std::max(hi, static_cast<double>(plane.data()[i]));
  }
  for (std::int64_t i = 0; i < plane.numel(); ++i) {
    out.data()[i] = static_cast<hat::real>(
        hi > lo ? (plane.data()[i] - lo) / (hi - lo) : 0.5);
  }
  return out;
}

// ---- subcommand handlers ----

struct TrainArgs {
  std::string config, out_dir, init_ckpt;
  std::int64_t iters = -1;
  std::int64_t seed = -1;
  bool init_strict = false;
  bool finetune = false;
};

int run_train(const TrainArgs& args) {
  hat::RunConfig cfg = load_run_config(args.config);
  if (args.finetune) {
    if (cfg.train == hat::TrainConfig{}) {
      cfg.train = hat::TrainConfig::defaults_for(hat::Phase::finetune);
    }
    cfg.train.phase = hat::Phase::finetune;
  }
  if (!args.init_ckpt.empty()) cfg.train.init_checkpoint = args.init_ckpt;
  if (args.seed >= 0) cfg.train.seed = args.seed;
  if (args.iters > 0) {
    cfg.train.total_iters = args.iters;
    // Keep the schedule consistent with a shortened run.
    std::vector<std::int64_t> kept;
    for (std::int64_t m : cfg.train.milestones) {
      if (m < args.iters) kept.push_back(m);
    }
    cfg.train.milestones = kept;
  }
  if (!args.out_dir.empty()) cfg.paths.output_dir = args.out_dir;
  if (cfg.paths.train_hr.empty()) {
    throw hat::UsageError("no training directory; set paths.train_hr in the "
                          "config");
  }
  cfg.train.validate();
  cfg.model.validate();

  const std::vector<fs::path> files = list_images(cfg.paths.train_hr);
  std::vector<hat::Tensor> dataset;
  dataset.reserve(files.size());
  for (const fs::path& f : files) dataset.push_back(hat::load_image(f.string()));
  std::cout << "loaded " << dataset.size() << " images from "
            << cfg.paths.train_hr << "\n";

  fs::create_directories(cfg.paths.output_dir);
  {
    std::ofstream cfg_out(fs::path(cfg.paths.output_dir) / "config.json",
                          std::ios::trunc);
    cfg_out << hat::serialize_config(cfg);
  }

  hat::Rng init_rng(cfg.train.seed);
  hat::HatModel model = hat::HatModel::create(cfg.model, init_rng);
  if (!cfg.train.init_checkpoint.empty()) {
    hat::ParamTree params = model.params();
    const hat::ParamTree loaded =
        hat::load_checkpoint(cfg.train.init_checkpoint);
    const hat::ApplyReport report =
        hat::apply_checkpoint(params, loaded, args.init_strict);
    std::cout << "initialized " << report.loaded.size() << " tensors from "
              << cfg.train.init_checkpoint << ", skipped "
              << report.skipped_source.size() << ", reinitialized "
              << report.missing_target.size() << "\n";
  }

  std::ofstream log(fs::path(cfg.paths.output_dir) / "train_log.tsv",
                    std::ios::trunc);
  log << "iter\tlr\tloss\n";
  hat::TrainHooks hooks;
  hooks.log = &log;
  hooks.save = [&model, &cfg](std::int64_t iters_done, const std::string& tag) {
    const std::string name = tag == "final"
                                 ? std::string("final.ckpt")
                                 : "iter" + std::to_string(iters_done) + ".ckpt";
    hat::save_checkpoint((fs::path(cfg.paths.output_dir) / name).string(),
                         model.params());
  };

  const hat::TrainResult result = hat::train_loop(model, dataset, cfg.train, hooks);
  std::cout << "trained " << result.iters_run << " iterations, final loss "
            << (result.losses.empty() ? 0.0 : result.losses.back()) << "\n";
  std::cout << "checkpoints and log in " << cfg.paths.output_dir << "\n";
  return 0;
}

int run_sr(const std::string& config, const std::string& ckpt,
           const std::string& in_path, const std::string& out_path,
           bool strict) {
  const hat::RunConfig cfg = load_run_config(config);
  const hat::HatModel model = build_model(cfg, ckpt, strict);
  const hat::Tensor img = hat::load_image(in_path);
  hat::Tensor input({1, 3, img.dim(1), img.dim(2)});
  std::copy(img.data(), img.data() + img.numel(), input.data());
  const hat::Tensor out = model.forward(input);
  hat::Tensor chw({3, out.dim(2), out.dim(3)});
  std::copy(out.data(), out.data() + out.numel(), chw.data());
  hat::save_image(chw, out_path);
  std::cout << "wrote " << out_path << " (" << out.dim(3) << "x" << out.dim(2)
            << ")\n";
  return 0;
}

int run_eval(const std::string& sr_dir, const std::string& hr_dir,
             std::int64_t crop) {
  const std::vector<fs::path> sr_files = list_images(sr_dir);
  const std::vector<fs::path> hr_files = list_images(hr_dir);
  if (sr_files.size() != hr_files.size()) {
    throw hat::UsageError("directory sizes differ: " +
                          std::to_string(sr_files.size()) + " files in " +
                          sr_dir + ", " + std::to_string(hr_files.size()) +
                          " in " + hr_dir);
  }

  const std::size_t n = sr_files.size();
  std::vector<hat::MetricResult> results(n);
  std::vector<std::exception_ptr> errors(n);
  const auto eval_one = [&](std::size_t i) {
    try {
      hat::Tensor sr = hat::load_image(sr_files[i].string());
      hat::Tensor hr = hat::load_image(hr_files[i].string());
      // Differently padded pairs are compared on their common top-left crop.
      const std::int64_t h = std::min(sr.dim(1), hr.dim(1));
      const std::int64_t w = std::min(sr.dim(2), hr.dim(2));
      if (h != sr.dim(1) || w != sr.dim(2)) {
        sr = hat::slice(sr, {0, 0, 0}, {3, h, w});
      }
      if (h != hr.dim(1) || w != hr.dim(2)) {
        hr = hat::slice(hr, {0, 0, 0}, {3, h, w});
      }
      results[i] = hat::evaluate_pair(sr, hr, crop);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  const int workers =
      std::max(1, std::min(hat::worker_threads(), static_cast<int>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) eval_one(i);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t]() {
        for (std::size_t i = t; i < n; i += workers) eval_one(i);
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
  }

  std::cout << "file\tpsnr\tssim\n";
  double psnr_sum = 0.0, ssim_sum = 0.0;
  bool any_inf = false;
  for (std::size_t i = 0; i < n; ++i) {
    std::cout << sr_files[i].filename().string() << "\t"
              << format_psnr(results[i].psnr_db) << "\t"
              << format_ssim(results[i].ssim) << "\n";
    if (std::isinf(results[i].psnr_db)) {
      any_inf = true;
    } else {
      psnr_sum += results[i].psnr_db;
    }
    ssim_sum += results[i].ssim;
  }
  const double mean_psnr =
      any_inf ? std::numeric_limits<double>::infinity()
              : psnr_sum / static_cast<double>(n);
  std::cout << "mean\t" << format_psnr(mean_psnr) << "\t"
            << format_ssim(ssim_sum / static_cast<double>(n)) << "\n";
  return 0;
}

int run_lam(const std::string& config, const std::string& ckpt,
            const std::string& in_path, std::int64_t x, std::int64_t y,
            std::int64_t w, std::int64_t h, int steps, double sigma,
            const std::string& out_prefix, bool strict) {
  const hat::RunConfig cfg = load_run_config(config);
  const hat::HatModel model = build_model(cfg, ckpt, strict);
  const hat::Tensor img = hat::load_image(in_path);
  const std::int64_t sh = img.dim(1) * cfg.model.scale;
  const std::int64_t sw = img.dim(2) * cfg.model.scale;

  hat::LamOptions opts;
  opts.w = w > 0 ? w : std::min<std::int64_t>(16, sw);
  opts.h = h > 0 ? h : std::min<std::int64_t>(16, sh);
  opts.x = x >= 0 ? x : (sw - opts.w) / 2;
  opts.y = y >= 0 ? y : (sh - opts.h) / 2;
  opts.steps = steps;
  opts.sigma = sigma;

  const hat::AttributionMap map = hat::lam_attribute(model, img, opts);
  hat::save_gray_png(normalize_plane(map.saliency), out_prefix + ".png");
  hat::write_lam_plane(out_prefix + ".lam", map.saliency);

  char line[160];
  std::snprintf(line, sizeof(line), "di\t%.4f\n", map.di);
  std::cout << line;
  std::snprintf(line, sizeof(line),
                "patch\t%lld\t%lld\t%lld\t%lld\n",
                static_cast<long long>(map.patch_x),
                static_cast<long long>(map.patch_y),
                static_cast<long long>(map.patch_w),
                static_cast<long long>(map.patch_h));
  std::cout << line;
  std::snprintf(line, sizeof(line), "completeness_gap\t%.6g\n",
                std::abs(map.attribution_total -
                         (map.target_input - map.target_baseline)));
  std::cout << line;
  std::cout << "wrote " << out_prefix << ".png and " << out_prefix << ".lam\n";
  return 0;
}

int run_features(const std::string& config, const std::string& ckpt,
                 const std::string& in_path, int group,
                 const std::string& out_dir, const std::string& prefix,
                 bool strict) {
  const hat::RunConfig cfg = load_run_config(config);
  const hat::HatModel model = build_model(cfg, ckpt, strict);
  const hat::Tensor img = hat::load_image(in_path);
  const std::vector<std::string> written =
      hat::dump_features(model, img, group, out_dir, prefix);
  std::cout << "wrote " << written.size() << " images to " << out_dir << "\n";
  return 0;
}

int run_complexity(const std::string& config, const std::string& input,
                   bool pretty) {
  const hat::RunConfig cfg = load_run_config(config);
  const auto [h, w] = parse_size(input);
  const hat::ComplexityReport report = hat::complexity_report(cfg.model, h, w);
  std::cout << (pretty ? report.to_table() : report.to_records());
  return 0;
}

int run_selftest() {
  int failures = 0;
  const auto check = [&failures](const char* name, bool ok) {
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << name << "\n";
    if (!ok) ++failures;
  };

  {
    hat::ModelConfig cfg;
    cfg.embed_dim = 8;
    cfg.num_rhag = 1;
    cfg.habs_per_rhag = 2;
    cfg.window_size = 4;
    cfg.num_heads = 2;
    cfg.cab_beta = 2;
    cfg.scale = 2;
    cfg.recon_feat = 8;
    hat::Rng rng(1);
    const hat::HatModel model = hat::HatModel::create(cfg, rng);
    hat::Tensor img({1, 3, 10, 7});
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      img.data()[i] = static_cast<hat::real>(rng.uniform(0.0, 1.0));
    }
    const hat::Tensor out = model.forward(img);
    check("toy forward doubles the spatial size",
          out.shape() == std::vector<std::int64_t>{1, 3, 20, 14});

    const fs::path tmp =
        fs::temp_directory_path() / "hat_selftest_roundtrip.ckpt";
    hat::ParamTree params = model.params();
    hat::save_checkpoint(tmp.string(), params);
    const hat::ParamTree loaded = hat::load_checkpoint(tmp.string());
    bool same = loaded.size() == params.size();
    if (same) {
      for (const auto& [name, t] : params) {
        const hat::Tensor* other = loaded.find(name);
        if (other == nullptr || other->shape() != t.shape()) {
          same = false;
          break;
        }
      }
    }
    fs::remove(tmp);
    check("checkpoint round-trips every tensor", same);
  }
  {
    hat::Tensor a = hat::Tensor::zeros({16, 16});
    hat::Tensor b = hat::Tensor::full({16, 16}, hat::real(255));
    check("psnr hits its closed-form endpoints",
          std::isinf(hat::psnr(a, a)) && hat::psnr(a, b) == 0.0);
    check("ssim of identical planes is one", hat::ssim(a, a) == 1.0);
  }
  {
    hat::Rng rng(2);
    hat::Tensor img({3, 9, 11});
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      img.data()[i] = static_cast<hat::real>(rng.uniform(0.0, 1.0));
    }
    const hat::Tensor same = hat::bicubic_resize(img, 1.0);
    bool equal = true;
    for (std::int64_t i = 0; i < img.numel(); ++i) {
      if (std::abs(same.data()[i] - img.data()[i]) > 1e-6) equal = false;
    }
    check("bicubic resize at scale 1 is the identity", equal);

    const hat::RunConfig round =
        hat::parse_config_text(hat::serialize_config(hat::RunConfig{}));
    check("config serialization round-trips", round == hat::RunConfig{});
  }
  if (failures != 0) {
    std::cerr << failures << " selftest checks failed\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid-attention super-resolution toolkit"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  train->add_option("--config", train_args.config, "JSON config file");
  train->add_option("--out", train_args.out_dir, "output directory override");
  train->add_option("--iters", train_args.iters, "iteration count override");
  train->add_option("--seed", train_args.seed, "RNG seed override");
  train->add_option("--init", train_args.init_ckpt,
                    "checkpoint to initialize from");
  train->add_flag("--init-strict", train_args.init_strict,
                  "require the init checkpoint to match exactly");

  TrainArgs ft_args;
  ft_args.finetune = true;
  CLI::App* finetune =
      app.add_subcommand("finetune", "fine-tune from a checkpoint");
  finetune->add_option("--config", ft_args.config, "JSON config file");
  finetune->add_option("--out", ft_args.out_dir, "output directory override");
  finetune->add_option("--iters", ft_args.iters, "iteration count override");
  finetune->add_option("--seed", ft_args.seed, "RNG seed override");
  finetune->add_option("--init", ft_args.init_ckpt,
                       "checkpoint to initialize from");
  finetune->add_flag("--init-strict", ft_args.init_strict,
                     "require the init checkpoint to match exactly");

  std::string sr_config, sr_ckpt, sr_in, sr_out;
  bool sr_strict = true;
  CLI::App* sr = app.add_subcommand("sr", "super-resolve one image");
  sr->add_option("--config", sr_config, "JSON config file");
  sr->add_option("--ckpt", sr_ckpt, "model checkpoint");
  sr->add_option("--in", sr_in, "input image (.png or .ppm)")->required();
  sr->add_option("--out", sr_out, "output image path")->required();
  sr->add_flag("!--no-strict", sr_strict,
               "allow a partially matching checkpoint");

  std::string eval_sr, eval_hr;
  std::int64_t eval_crop = 4;
  CLI::App* eval = app.add_subcommand("eval", "PSNR/SSIM over paired folders");
  eval->add_option("--sr", eval_sr, "directory of model outputs")->required();
  eval->add_option("--hr", eval_hr, "directory of references")->required();
  eval->add_option("--crop", eval_crop, "border pixels to ignore (default 4)");

  std::string lam_config, lam_ckpt, lam_in, lam_out = "lam_out";
  std::int64_t lam_x = -1, lam_y = -1, lam_w = 0, lam_h = 0;
  int lam_steps = 32;
  double lam_sigma = 4.0;
  bool lam_strict = true;
  CLI::App* lam =
      app.add_subcommand("lam", "attribution map for an output patch");
  lam->add_option("--config", lam_config, "JSON config file");
  lam->add_option("--ckpt", lam_ckpt, "model checkpoint");
  lam->add_option("--in", lam_in, "input image")->required();
  lam->add_option("--px", lam_x, "patch left, SR pixels (default centered)");
  lam->add_option("--py", lam_y, "patch top, SR pixels (default centered)");
  lam->add_option("--pw", lam_w, "patch width, SR pixels (default 16)");
  lam->add_option("--ph", lam_h, "patch height, SR pixels (default 16)");
  lam->add_option("--steps", lam_steps, "path interpolation points");
  lam->add_option("--sigma", lam_sigma, "baseline blur strength");
  lam->add_option("--out", lam_out, "output prefix");
  lam->add_flag("!--no-strict", lam_strict,
                "allow a partially matching checkpoint");

  std::string feat_config, feat_ckpt, feat_in, feat_dir = "features",
                                               feat_prefix = "feat";
  int feat_group = 1;
  bool feat_strict = true;
  CLI::App* features =
      app.add_subcommand("features", "dump intermediate feature maps");
  features->add_option("--config", feat_config, "JSON config file");
  features->add_option("--ckpt", feat_ckpt, "model checkpoint");
  features->add_option("--in", feat_in, "input image")->required();
  features->add_option("--group", feat_group, "capture after this group (1-based)")
      ->required();
  features->add_option("--out", feat_dir, "output directory");
  features->add_option("--prefix", feat_prefix, "output filename prefix");
  features->add_flag("!--no-strict", feat_strict,
                     "allow a partially matching checkpoint");

  std::string cx_config, cx_input = "64x64";
  bool cx_pretty = false;
  CLI::App* complexity =
      app.add_subcommand("complexity", "parameter and multiply-add counts");
  complexity->add_option("--config", cx_config, "JSON config file");
  complexity->add_option("--input", cx_input, "input size as HxW");
  complexity->add_flag("--pretty", cx_pretty, "aligned table instead of TSV");

  app.add_subcommand("selftest", "quick internal smoke checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) return run_train(train_args);
    if (finetune->parsed()) return run_train(ft_args);
    if (sr->parsed()) return run_sr(sr_config, sr_ckpt, sr_in, sr_out, sr_strict);
    if (eval->parsed()) return run_eval(eval_sr, eval_hr, eval_crop);
    if (lam->parsed()) {
      return run_lam(lam_config, lam_ckpt, lam_in, lam_x, lam_y, lam_w, lam_h,
                     lam_steps, lam_sigma, lam_out, lam_strict);
    }
    if (features->parsed()) {
      return run_features(feat_config, feat_ckpt, feat_in, feat_group, feat_dir,
                          feat_prefix, feat_strict);
    }
    if (complexity->parsed()) return run_complexity(cx_config, cx_input, cx_pretty);
    return run_selftest();
  } catch (const hat::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const hat::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
