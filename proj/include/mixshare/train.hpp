#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixshare/data.hpp"
#include "mixshare/masks.hpp"
#include "mixshare/model.hpp"
#include "mixshare/rng.hpp"

namespace mixshare {

struct TrainConfig {
  int batch_size = 64;           // pairs per step
  int batch_repetition = 2;      // b: shuffles per epoch
  double input_repetition = 0.1; // rho: fraction of pairs with the same image in every slot
  int epochs = 30;
  double base_lr_numerator = 0.1;
  std::vector<int> decay_epochs{15, 23};
  double decay_factor = 0.1;
  double weight_decay = 3e-4;
  double momentum = 0.9;
  int warmup_epochs = 1;
  bool rebalance_loss = false;
  double mix_alpha = 2.0;
  bool augment = false;  // crop + flip
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const;
  /// (numerator / b) * (batch_size / 128).
  double base_lr() const;
};

struct EvalResult {
  double ensemble_accuracy = 0.0;              // percent
  std::vector<double> individual_accuracies;   // percent, one per subnetwork
  double mean_individual_accuracy = 0.0;       // percent
  double nll = 0.0;                            // of the ensemble probabilities
};

/// Index-level description of one epoch of training pairs.
struct EpochPlan {
  std::vector<std::vector<std::int64_t>> streams;  // M streams, equal length
  std::vector<bool> repeated;                      // input-repetition pairs
  std::vector<MaskPair> masks;                     // one per pair when M == 2

  std::int64_t pair_count() const {
    return streams.empty() ? 0 : static_cast<std::int64_t>(streams.front().size());
  }
};

/// Each input stream concatenates b independent permutations of the dataset;
/// a fraction rho of pairs then gets stream 0's example in every slot. One
/// CutMix mask (lambda ~ Beta(mix_alpha, mix_alpha)) is drawn per pair.
EpochPlan build_batches(const Dataset& data, const TrainConfig& config, int m, Rng& rng);

struct StepBatch {
  std::vector<Tensor> inputs;             // M x (N x 3 x 32 x 32)
  std::vector<std::vector<int>> labels;   // M x N
  std::vector<MaskPair> masks;            // N (M == 2)
  std::vector<double> kappas;             // N (M == 2)
};

/// Materializes pairs [begin, end) of a plan.
StepBatch make_step_batch(const Dataset& data, const EpochPlan& plan, std::int64_t begin,
                          std::int64_t end, bool augment, Rng& rng);

/// For M == 2: mean_n 2 [k_n CE0_n + (1 - k_n) CE1_n], with k replaced by
/// (k + 0.5) / 2 when rebalancing. For M > 2: sum of per-head mean CE.
Tensor subnetwork_loss(std::span<const Tensor> logits, const std::vector<std::vector<int>>& labels,
                       std::span<const double> kappas, bool rebalance);

/// Linear warmup from 0 over warmup_epochs, then step decay by decay_factor
/// at each configured epoch.
double lr_at(const TrainConfig& config, int epoch, std::int64_t step_in_epoch,
             std::int64_t steps_per_epoch);

/// Fadeout coefficient used for unmixing during `epoch` (0 for full/partial).
double unmix_coefficient(const UnmixMode& mode, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;  // at the last step of the epoch
  double train_loss = 0.0;
  EvalResult eval;
  double share_rate_classifier = 0.0;
  double share_rate_encoder = 0.0;
  double r_fadeout = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& metrics);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs the full training loop. All randomness derives from config.seed.
std::vector<EpochMetrics> fit(MimoModel& model, const Dataset& train, const Dataset& val,
                              const TrainConfig& config, const EpochCallback& on_epoch = {});

EvalResult evaluate(MimoModel& model, const Dataset& data, std::int64_t batch_size = 250);

/// Metrics from already-computed probabilities (rows are examples).
EvalResult evaluate_probabilities(const Tensor& ensemble_probs,
                                  std::span<const Tensor> per_subnet_probs,
                                  std::span<const int> labels);

}  // namespace mixshare
