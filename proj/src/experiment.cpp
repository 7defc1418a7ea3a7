#include "mixshare/experiment.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>

#include "mixshare/checkpoint.hpp"
#include "mixshare/gradcheck.hpp"

namespace mixshare {

namespace {

using nlohmann::json;

std::string join_problems(const std::vector<std::string>& problems) {
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  - " + p;
  return msg;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

json ExperimentConfig::to_json() const {
  json j;
  j["m"] = model.m;
  j["depth"] = model.depth;
  j["width"] = model.width;
  j["num_classes"] = model.num_classes;
  j["unmix"] = model.unmix.name();
  j["unmix_partial_fraction"] = model.unmix.partial_fraction;
  j["fadeout_end_epoch"] = model.unmix.fadeout_end_epoch;
  j["init"] = init_mode_name(model.init);
  j["zero_init_heads"] = model.zero_init_heads;
  j["batch_size"] = train.batch_size;
  j["batch_repetition"] = train.batch_repetition;
  j["input_repetition"] = train.input_repetition;
  j["epochs"] = train.epochs;
  j["base_lr_numerator"] = train.base_lr_numerator;
  j["decay_epochs"] = train.decay_epochs;
  j["decay_factor"] = train.decay_factor;
  j["weight_decay"] = train.weight_decay;
  j["momentum"] = train.momentum;
  j["warmup_epochs"] = train.warmup_epochs;
  j["rebalance_loss"] = train.rebalance_loss;
  j["mix_alpha"] = train.mix_alpha;
  j["augment"] = train.augment;
  j["seed"] = train.seed;
  j["dataset"] = dataset_kind_name(data.kind);
  j["data_path"] = data.path;
  j["val_path"] = data.val_path;
  j["val_fraction"] = data.val_fraction;
  j["data_seed"] = data.seed;
  j["synthetic_per_class"] = data.synthetic.per_class;
  j["synthetic_noise"] = data.synthetic.noise;
  j["synthetic_contrast"] = data.synthetic.contrast;
  j["synthetic_frequency"] = data.synthetic.frequency;
  j["synthetic_contrast_jitter"] = data.synthetic.contrast_jitter;
  j["synthetic_random_phase"] = data.synthetic.random_phase;
  j["output_dir"] = output_dir;
  j["backend"] = kernels::backend_name(backend);
  const auto norm = Normalization::for_kind(data.kind);
  j["normalization_mean"] = norm.mean;
  j["normalization_std"] = norm.std;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError({"configuration must be a JSON object"});
  ExperimentConfig c;
  std::vector<std::string> problems;

  std::map<std::string, std::function<void(const json&)>> setters = {
      {"m", [&](const json& v) { c.model.m = v.get<int>(); }},
      {"depth", [&](const json& v) { c.model.depth = v.get<int>(); }},
      {"width", [&](const json& v) { c.model.width = v.get<int>(); }},
      {"num_classes", [&](const json& v) { c.model.num_classes = v.get<int>(); }},
      {"unmix", [&](const json& v) { c.model.unmix.kind = UnmixMode::parse_kind(v.get<std::string>()); }},
      {"unmix_partial_fraction", [&](const json& v) { c.model.unmix.partial_fraction = v.get<double>(); }},
      {"fadeout_end_epoch", [&](const json& v) { c.model.unmix.fadeout_end_epoch = v.get<int>(); }},
      {"init", [&](const json& v) { c.model.init = parse_init_mode(v.get<std::string>()); }},
      {"zero_init_heads", [&](const json& v) { c.model.zero_init_heads = v.get<bool>(); }},
      {"batch_size", [&](const json& v) { c.train.batch_size = v.get<int>(); }},
      {"batch_repetition", [&](const json& v) { c.train.batch_repetition = v.get<int>(); }},
      {"input_repetition", [&](const json& v) { c.train.input_repetition = v.get<double>(); }},
      {"epochs", [&](const json& v) { c.train.epochs = v.get<int>(); }},
      {"base_lr_numerator", [&](const json& v) { c.train.base_lr_numerator = v.get<double>(); }},
      {"decay_epochs", [&](const json& v) { c.train.decay_epochs = v.get<std::vector<int>>(); }},
      {"decay_factor", [&](const json& v) { c.train.decay_factor = v.get<double>(); }},
      {"weight_decay", [&](const json& v) { c.train.weight_decay = v.get<double>(); }},
      {"momentum", [&](const json& v) { c.train.momentum = v.get<double>(); }},
      {"warmup_epochs", [&](const json& v) { c.train.warmup_epochs = v.get<int>(); }},
      {"rebalance_loss", [&](const json& v) { c.train.rebalance_loss = v.get<bool>(); }},
      {"mix_alpha", [&](const json& v) { c.train.mix_alpha = v.get<double>(); }},
      {"augment", [&](const json& v) { c.train.augment = v.get<bool>(); }},
      {"seed", [&](const json& v) { c.train.seed = v.get<std::uint64_t>(); }},
      {"dataset", [&](const json& v) { c.data.kind = parse_dataset_kind(v.get<std::string>()); }},
      {"data_path", [&](const json& v) { c.data.path = v.get<std::string>(); }},
      {"val_path", [&](const json& v) { c.data.val_path = v.get<std::string>(); }},
      {"val_fraction", [&](const json& v) { c.data.val_fraction = v.get<double>(); }},
      {"data_seed", [&](const json& v) { c.data.seed = v.get<std::uint64_t>(); }},
      {"synthetic_per_class", [&](const json& v) { c.data.synthetic.per_class = v.get<int>(); }},
      {"synthetic_noise", [&](const json& v) { c.data.synthetic.noise = v.get<double>(); }},
      {"synthetic_contrast", [&](const json& v) { c.data.synthetic.contrast = v.get<double>(); }},
      {"synthetic_frequency", [&](const json& v) { c.data.synthetic.frequency = v.get<double>(); }},
      {"synthetic_contrast_jitter", [&](const json& v) { c.data.synthetic.contrast_jitter = v.get<double>(); }},
      {"synthetic_random_phase", [&](const json& v) { c.data.synthetic.random_phase = v.get<bool>(); }},
      {"output_dir", [&](const json& v) { c.output_dir = v.get<std::string>(); }},
      {"backend",
       [&](const json& v) {
         const auto name = v.get<std::string>();
         if (name == "reference") c.backend = kernels::Backend::reference;
         else if (name == "parallel") c.backend = kernels::Backend::parallel;
         else throw std::invalid_argument("backend must be reference|parallel, got '" + name + "'");
       }},
      // Echoed for reproducibility; the values are fixed per dataset kind.
      {"normalization_mean", [](const json&) {}},
      {"normalization_std", [](const json&) {}},
  };

  for (const auto& [key, value] : doc.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) {
      problems.push_back("unknown key '" + key + "'");
      continue;
    }
    if (value.is_object()) {
      problems.push_back("key '" + key + "': nested objects are not allowed");
      continue;
    }
    try {
      it->second(value);
    } catch (const std::exception& e) {
      problems.push_back("key '" + key + "': " + e.what());
    }
  }
  if (c.data.kind == DatasetKind::synthetic) c.data.synthetic.class_count = c.model.num_classes;
  if (problems.empty()) problems = c.violations();
  if (!problems.empty()) throw ConfigError(std::move(problems));
  return c;
}

std::vector<std::string> ExperimentConfig::violations() const {
  std::vector<std::string> out = model.violations();
  for (auto& v : train.violations()) out.push_back(std::move(v));
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) {
    out.push_back("val_fraction must lie in (0, 1)");
  }
  if (data.kind != DatasetKind::synthetic) {
    if (data.path.empty() || !std::filesystem::exists(data.path)) {
      out.push_back("data_path '" + data.path + "' does not exist");
    }
    if (!data.val_path.empty() && !std::filesystem::exists(data.val_path)) {
      out.push_back("val_path '" + data.val_path + "' does not exist");
    }
    const int expected = data.kind == DatasetKind::cifar100 ? 100 : 10;
    if (model.num_classes != expected) {
      out.push_back("num_classes must be " + std::to_string(expected) + " for " +
                    dataset_kind_name(data.kind));
    }
  } else {
    if (data.synthetic.per_class < 1) out.push_back("synthetic_per_class must be >= 1");
    if (data.synthetic.noise < 0.0) out.push_back("synthetic_noise must be >= 0");
    if (data.synthetic.contrast_jitter < 0.0 || data.synthetic.contrast_jitter >= 1.0) {
      out.push_back("synthetic_contrast_jitter must lie in [0, 1)");
    }
  }
  return out;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return ExperimentConfig::from_json(doc);
}

std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& config) {
  Rng rng(config.data.seed);
  Dataset all;
  if (config.data.kind == DatasetKind::synthetic) {
    SyntheticSpec spec = config.data.synthetic;
    spec.class_count = config.model.num_classes;
    Rng gen = rng.fork(0);
    all = gen_synthetic(spec, gen);
  } else {
    all = load_cifar(config.data.path, config.data.kind);
  }
  if (all.size() == 0) throw std::runtime_error("dataset is empty; refusing to train");
  if (config.data.kind != DatasetKind::synthetic && !config.data.val_path.empty()) {
    return {std::move(all), load_cifar(config.data.val_path, config.data.kind)};
  }
  Rng split_rng = rng.fork(1);
  return all.split(config.data.val_fraction, split_rng);
}

MimoModel build_model(const ExperimentConfig& config) {
  Rng rng = Rng(config.train.seed).fork(0);
  return MimoModel(config.model, rng);
}

TrainedRun train_experiment(const ExperimentConfig& config, const EpochCallback& on_epoch) {
  kernels::BackendScope scope(config.backend);
  auto [train, val] = load_datasets(config);
  TrainedRun run{build_model(config), std::move(train), std::move(val), {}};
  run.log = fit(run.model, run.train, run.val, config.train, on_epoch);
  return run;
}

void write_run_artifacts(const ExperimentConfig& config, TrainedRun& run,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "metrics.csv", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    f << metrics_csv_header() << '\n';
    for (const auto& m : run.log) f << metrics_csv_row(m) << '\n';
  }
  write_checkpoint(dir / "checkpoint.mxsh", run.model.state());
  {
    std::ofstream f(dir / "config.json", std::ios::trunc);
    f << config.to_json().dump(2) << '\n';
  }
  SharingReport report = build_report(run.model);
  report.config = config.to_json();
  write_report(report, dir / "report.json");
  {
    kernels::BackendScope scope(config.backend);
    std::ofstream f(dir / "eval.json", std::ios::trunc);
    json doc = eval_to_json(evaluate(run.model, run.val));
    doc["config"] = config.to_json();
    f << doc.dump(2) << '\n';
  }
}

double model_gradcheck(const ExperimentConfig& requested, int sample_count, double epsilon,
                       std::int64_t batch_pairs) {
  // Zero heads would make every upstream gradient exactly zero and the check vacuous.
  ExperimentConfig config = requested;
  config.model.zero_init_heads = false;
  kernels::BackendScope scope(config.backend);
  auto [train, val] = load_datasets(config);
  MimoModel model = build_model(config);
  Rng rng = Rng(config.train.seed).fork(7);

  std::vector<std::int64_t> first(static_cast<std::size_t>(batch_pairs));
  std::vector<std::int64_t> second(static_cast<std::size_t>(batch_pairs));
  for (std::int64_t i = 0; i < batch_pairs; ++i) {
    first[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(train.size())));
    second[i] = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(train.size())));
  }
  std::vector<Tensor> inputs{train.batch(first), train.batch(second)};
  std::vector<std::vector<int>> labels{train.batch_labels(first), train.batch_labels(second)};
  inputs.resize(static_cast<std::size_t>(config.model.m), inputs[0]);
  labels.resize(static_cast<std::size_t>(config.model.m), labels[0]);
  std::vector<MaskPair> masks;
  std::vector<double> kappas;
  if (config.model.m == 2) {
    for (std::int64_t i = 0; i < batch_pairs; ++i) {
      masks.push_back(sample_cutmix_mask(kImageSide, kImageSide,
                                         sample_mixing_ratio(rng, config.train.mix_alpha), rng));
      kappas.push_back(masks.back().kappa);
    }
  }
  const double r = config.model.unmix.kind == UnmixMode::Kind::fadeout ? 0.5 : 0.0;

  // Populate running statistics so the fixed-statistics pass is not trivial.
  forward_train(model, inputs, masks, r, /*training=*/true);

  auto loss_fn = [&]() {
    const auto fwd = forward_train(model, inputs, masks, r, /*training=*/false);
    return subnetwork_loss(fwd.logits, labels, kappas, config.train.rebalance_loss);
  };
  auto params = model.parameters();
  return finite_diff_check(params, loss_fn, epsilon, sample_count, rng);
}

json eval_to_json(const EvalResult& eval) {
  return json{{"ensemble_accuracy", eval.ensemble_accuracy},
              {"individual_accuracies", eval.individual_accuracies},
              {"mean_individual_accuracy", eval.mean_individual_accuracy},
              {"nll", eval.nll}};
}

}  // namespace mixshare
