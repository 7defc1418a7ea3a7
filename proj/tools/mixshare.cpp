// Command-line driver: train, eval, analyze, gradcheck, gen-data.
//
// Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixshare/checkpoint.hpp"
#include "mixshare/data.hpp"
#include "mixshare/diagnostics.hpp"
#include "mixshare/experiment.hpp"
#include "mixshare/masks.hpp"

namespace fs = std::filesystem;
using namespace mixshare;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string backend;
  bool variance = false;
  bool dump_masks = false;
  double mask_lambda = 0.5;
  int samples = 64;
  double epsilon = 1e-6;
  // gen-data
  int classes = 4;
  int per_class = 100;
  double noise = 0.3;
  double contrast = 0.25;
  double frequency = 4.0;
  double contrast_jitter = 0.0;
  bool random_phase = false;
  std::uint64_t seed = 12345;
  bool quiet = false;
};

ExperimentConfig resolve_config(const Options& opt) {
  ExperimentConfig config = load_config(opt.config);
  if (!opt.backend.empty()) {
    json j = config.to_json();
    j["backend"] = opt.backend;
    config = ExperimentConfig::from_json(j);
  }
  if (!opt.out.empty()) config.output_dir = opt.out;
  return config;
}

MimoModel load_trained(const ExperimentConfig& config, const Options& opt) {
  MimoModel model = build_model(config);
  const fs::path ckpt =
      opt.checkpoint.empty() ? fs::path(config.output_dir) / "checkpoint.mxsh" : fs::path(opt.checkpoint);
  model.load_state(read_checkpoint(ckpt));
  return model;
}

void write_mask_csv(const fs::path& path, const MaskPair& mask) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (std::int64_t y = 0; y < mask.height; ++y) {
    for (std::int64_t x = 0; x < mask.width; ++x) {
      if (x) f << ',';
      f << mask.mask[static_cast<std::size_t>(y * mask.width + x)];
    }
    f << '\n';
  }
}

int cmd_train(const Options& opt) {
  const ExperimentConfig config = resolve_config(opt);
  auto on_epoch = [&](const EpochMetrics& m) {
    if (opt.quiet) return;
    std::fprintf(stderr, "%s\n", metrics_csv_row(m).c_str());
  };
  if (!opt.quiet) std::fprintf(stderr, "%s\n", metrics_csv_header().c_str());
  TrainedRun run = train_experiment(config, on_epoch);
  write_run_artifacts(config, run, config.output_dir);
  std::cout << "wrote " << config.output_dir << '\n';
  return kExitOk;
}

int cmd_eval(const Options& opt) {
  const ExperimentConfig config = resolve_config(opt);
  kernels::BackendScope scope(config.backend);
  MimoModel model = load_trained(config, opt);
  auto [train, val] = load_datasets(config);
  json doc = eval_to_json(evaluate(model, val));
  doc["config"] = config.to_json();
  std::cout << doc.dump(2) << '\n';
  return kExitOk;
}

int cmd_analyze(const Options& opt) {
  const ExperimentConfig config = resolve_config(opt);
  kernels::BackendScope scope(config.backend);
  MimoModel model = load_trained(config, opt);
  SharingReport report = build_report(model);
  report.config = config.to_json();

  const fs::path dir = config.output_dir;
  fs::create_directories(dir);
  Rng rng = Rng(config.train.seed).fork(99);
  if (opt.variance || opt.dump_masks) {
    const MaskPair mask = sample_cutmix_mask(kImageSide, kImageSide, opt.mask_lambda, rng);
    if (opt.variance) {
      auto [train, val] = load_datasets(config);
      const auto fixed = val.image(0);
      std::vector<std::pair<int, Histograms>> sweep;
      for (int block = 1; block <= 3; ++block) {
        sweep.emplace_back(block, variance_importance(model, val, fixed, block, mask));
      }
      report.variance_importance = std::move(sweep);
    }
    if (opt.dump_masks) {
      write_mask_csv(dir / "mask_variance.csv", mask);
      for (int i = 0; i < 4; ++i) {
        const MaskPair sample = sample_cutmix_mask(
            kImageSide, kImageSide, sample_mixing_ratio(rng, config.train.mix_alpha), rng);
        write_mask_csv(dir / ("mask_sample_" + std::to_string(i) + ".csv"), sample);
      }
    }
  }
  const fs::path out = dir / "report.json";
  write_report(report, out);
  std::cout << "share_rate_classifier " << report.share_rate_classifier << '\n'
            << "share_rate_encoder " << report.share_rate_encoder << '\n'
            << "wrote " << out.string() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& opt) {
  const ExperimentConfig config = resolve_config(opt);
  const double err = model_gradcheck(config, opt.samples, opt.epsilon);
  std::cout << "max_relative_error " << err << '\n';
  return err < 1e-4 ? kExitOk : kExitRuntime;
}

int cmd_gen_data(const Options& opt) {
  SyntheticSpec spec;
  spec.class_count = opt.classes;
  spec.per_class = opt.per_class;
  spec.noise = opt.noise;
  spec.contrast = opt.contrast;
  spec.frequency = opt.frequency;
  spec.contrast_jitter = opt.contrast_jitter;
  spec.random_phase = opt.random_phase;
  if (spec.class_count < 2 || spec.class_count > 10) {
    throw ConfigError({"classes must lie in [2, 10] for the CIFAR-10 record layout"});
  }
  if (spec.per_class < 1) throw ConfigError({"per-class must be >= 1"});
  Rng rng = Rng(opt.seed).fork(0);
  const Dataset data = gen_synthetic(spec, rng);
  write_cifar10(opt.out, data);
  std::cout << "wrote " << data.size() << " records to " << opt.out << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Multi-input multi-output training with feature-sharing diagnostics"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", opt.config, "Experiment config (flat JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--out", opt.out, "Output directory (overrides output_dir)");
    sub->add_option("--backend", opt.backend, "Kernel backend")
        ->check(CLI::IsMember({"reference", "parallel"}));
  };

  auto* train = app.add_subcommand("train", "Train and write metrics.csv, checkpoint, report");
  add_common(train);
  train->add_flag("-q,--quiet", opt.quiet, "Suppress per-epoch progress");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation set");
  add_common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint (default: <out>/checkpoint.mxsh)");

  auto* analyze = app.add_subcommand("analyze", "Write the sharing report for a checkpoint");
  add_common(analyze);
  analyze->add_option("--checkpoint", opt.checkpoint, "Checkpoint (default: <out>/checkpoint.mxsh)");
  analyze->add_flag("--variance", opt.variance, "Run the variance-importance sweep");
  analyze->add_flag("--dump-masks", opt.dump_masks, "Write mixing masks as CSV grids");
  analyze->add_option("--mask-lambda", opt.mask_lambda, "Mask ratio for the variance sweep")
      ->check(CLI::Range(0.0, 1.0));

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the model gradient");
  add_common(gradcheck);
  gradcheck->add_option("--samples", opt.samples, "Sampled parameters")->check(CLI::PositiveNumber);
  gradcheck->add_option("--eps", opt.epsilon, "Central-difference step")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset in CIFAR-10 layout");
  gen->add_option("-o,--out", opt.out, "Output file")->required();
  gen->add_option("--classes", opt.classes, "Number of classes (2-10)");
  gen->add_option("--per-class", opt.per_class, "Images per class");
  gen->add_option("--noise", opt.noise, "Pixel noise std");
  gen->add_option("--contrast", opt.contrast, "Grating amplitude");
  gen->add_option("--frequency", opt.frequency, "Grating cycles per image");
  gen->add_option("--contrast-jitter", opt.contrast_jitter, "Per-image contrast factor spread j: U[1-j, 1+j]")
      ->check(CLI::Range(0.0, 0.999));
  gen->add_flag("--random-phase", opt.random_phase, "Random grating phase per image");
  gen->add_option("--seed", opt.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(opt);
    if (*eval) return cmd_eval(opt);
    if (*analyze) return cmd_analyze(opt);
    if (*gradcheck) return cmd_gradcheck(opt);
    if (*gen) return cmd_gen_data(opt);
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
