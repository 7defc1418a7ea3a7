#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixshare/data.hpp"
#include "mixshare/diagnostics.hpp"
#include "mixshare/kernels.hpp"
#include "mixshare/model.hpp"
#include "mixshare/train.hpp"

namespace mixshare {

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::string path;      // CIFAR training file
  std::string val_path;  // optional CIFAR file used instead of a split
  double val_fraction = 0.2;
  std::uint64_t seed = 12345;  // synthetic generation and train/val split
  SyntheticSpec synthetic;
};

/// Everything needed to reproduce one run. Serialized as flat JSON.
struct ExperimentConfig {
  MimoConfig model;
  TrainConfig train;
  DatasetSpec data;
  std::string output_dir = "runs/default";
  kernels::Backend backend = kernels::Backend::reference;

  nlohmann::json to_json() const;
  /// Throws ConfigError listing every problem (unknown keys, bad types, invalid values).
  static ExperimentConfig from_json(const nlohmann::json& doc);
  std::vector<std::string> violations() const;
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// Training and validation sets described by the config.
std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& config);

/// Model initialized from the config's seed.
MimoModel build_model(const ExperimentConfig& config);

struct TrainedRun {
  MimoModel model;
  Dataset train;
  Dataset val;
  std::vector<EpochMetrics> log;
};

TrainedRun train_experiment(const ExperimentConfig& config, const EpochCallback& on_epoch = {});

/// Writes metrics.csv, checkpoint.mxsh, report.json (+ histogram CSVs) and
/// config.json into `dir`.
void write_run_artifacts(const ExperimentConfig& config, TrainedRun& run,
                         const std::filesystem::path& dir);

/// Finite-difference check of the full mixing/unmixing training loss on a
/// small batch of the configured data. Batchnorm runs on fixed statistics.
double model_gradcheck(const ExperimentConfig& config, int sample_count, double epsilon,
                       std::int64_t batch_pairs = 4);

nlohmann::json eval_to_json(const EvalResult& eval);

}  // namespace mixshare
