#include "mixshare/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numeric>
#include <sstream>

#include "mixshare/diagnostics.hpp"
#include "mixshare/ops.hpp"
#include "mixshare/optim.hpp"

namespace mixshare {

namespace {

struct EvalAccumulator {
  std::int64_t seen = 0;
  std::int64_t ensemble_hits = 0;
  std::vector<std::int64_t> subnet_hits;
  double nll = 0.0;

  void add(const Tensor& ensemble, std::span<const Tensor> subnets, std::span<const int> labels) {
    const auto n = ensemble.dim(0);
    const auto k = ensemble.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n) {
      throw ShapeError("evaluate: label count does not match probability rows");
    }
    subnet_hits.resize(subnets.size(), 0);
    auto argmax = [k](std::span<const double> p, std::int64_t row) {
      const auto* r = p.data() + row * k;
      return static_cast<int>(std::max_element(r, r + k) - r);
    };
    for (std::int64_t i = 0; i < n; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      if (argmax(ensemble.data(), i) == y) ++ensemble_hits;
      for (std::size_t s = 0; s < subnets.size(); ++s) {
        if (argmax(subnets[s].data(), i) == y) ++subnet_hits[s];
      }
      nll -= std::log(std::max(ensemble.data()[i * k + y], 1e-300));
    }
    seen += n;
  }

  EvalResult result() const {
    EvalResult r;
    if (seen == 0) return r;
    const double n = static_cast<double>(seen);
    r.ensemble_accuracy = 100.0 * static_cast<double>(ensemble_hits) / n;
    for (auto hits : subnet_hits) r.individual_accuracies.push_back(100.0 * static_cast<double>(hits) / n);
    if (!r.individual_accuracies.empty()) {
      r.mean_individual_accuracy =
          std::accumulate(r.individual_accuracies.begin(), r.individual_accuracies.end(), 0.0) /
          static_cast<double>(r.individual_accuracies.size());
    }
    r.nll = nll / n;
    return r;
  }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<std::string> TrainConfig::violations() const {
  std::vector<std::string> out;
  if (batch_size < 2) out.push_back("batch_size must be >= 2, got " + std::to_string(batch_size));
  if (batch_repetition < 1) out.push_back("batch_repetition must be >= 1");
  if (!(input_repetition >= 0.0 && input_repetition <= 1.0)) {
    out.push_back("input_repetition must lie in [0, 1]");
  }
  if (epochs < 0) out.push_back("epochs must be >= 0");
  if (!(base_lr_numerator > 0.0)) out.push_back("base_lr_numerator must be positive");
  for (std::size_t i = 1; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] <= decay_epochs[i - 1]) {
      out.push_back("decay_epochs must be strictly increasing");
      break;
    }
  }
  if (!(decay_factor > 0.0)) out.push_back("decay_factor must be positive");
  if (weight_decay < 0.0) out.push_back("weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) out.push_back("momentum must lie in [0, 1)");
  if (warmup_epochs < 0) out.push_back("warmup_epochs must be >= 0");
  if (!(mix_alpha > 0.0)) out.push_back("mix_alpha must be positive");
  return out;
}

double TrainConfig::base_lr() const {
  return base_lr_numerator / static_cast<double>(batch_repetition) *
         (static_cast<double>(batch_size) / 128.0);
}

EpochPlan build_batches(const Dataset& data, const TrainConfig& config, int m, Rng& rng) {
  if (data.size() == 0) throw std::invalid_argument("build_batches: empty dataset");
  if (m < 1) throw std::invalid_argument("build_batches: need at least one input stream");
  const auto n = data.size();
  EpochPlan plan;
  plan.streams.resize(static_cast<std::size_t>(m));
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (auto& stream : plan.streams) {
    stream.reserve(static_cast<std::size_t>(n * config.batch_repetition));
    for (int b = 0; b < config.batch_repetition; ++b) {
      std::iota(perm.begin(), perm.end(), 0);
      rng.shuffle(std::span<std::int64_t>(perm));
      stream.insert(stream.end(), perm.begin(), perm.end());
    }
  }
  const auto pairs = plan.pair_count();
  plan.repeated.assign(static_cast<std::size_t>(pairs), false);
  for (std::int64_t p = 0; p < pairs; ++p) {
    if (rng.uniform() < config.input_repetition) {
      plan.repeated[static_cast<std::size_t>(p)] = true;
      for (auto& stream : plan.streams) stream[p] = plan.streams.front()[p];
    }
  }
  if (m == 2) {
    plan.masks.reserve(static_cast<std::size_t>(pairs));
    for (std::int64_t p = 0; p < pairs; ++p) {
      const double lambda = sample_mixing_ratio(rng, config.mix_alpha);
      plan.masks.push_back(sample_cutmix_mask(kImageSide, kImageSide, lambda, rng));
    }
  }
  return plan;
}

StepBatch make_step_batch(const Dataset& data, const EpochPlan& plan, std::int64_t begin,
                          std::int64_t end, bool augment, Rng& rng) {
  StepBatch batch;
  for (const auto& stream : plan.streams) {
    std::span<const std::int64_t> idx(stream.data() + begin, static_cast<std::size_t>(end - begin));
    Tensor x = data.batch(idx);
    if (augment) {
      for (std::int64_t i = 0; i < end - begin; ++i) {
        augment_crop_flip(x.data().subspan(static_cast<std::size_t>(i * kImageSize),
                                           static_cast<std::size_t>(kImageSize)),
                          rng);
      }
    }
    batch.inputs.push_back(std::move(x));
    batch.labels.push_back(data.batch_labels(idx));
  }
  if (!plan.masks.empty()) {
    batch.masks.assign(plan.masks.begin() + begin, plan.masks.begin() + end);
    for (const auto& m : batch.masks) batch.kappas.push_back(m.kappa);
  }
  return batch;
}

Tensor subnetwork_loss(std::span<const Tensor> logits, const std::vector<std::vector<int>>& labels,
                       std::span<const double> kappas, bool rebalance) {
  if (logits.size() != labels.size()) {
    throw std::invalid_argument("subnetwork_loss: one label list per head required");
  }
  if (logits.size() != 2) {
    Tensor total = cross_entropy(logits[0], labels[0]);
    for (std::size_t i = 1; i < logits.size(); ++i) total = add(total, cross_entropy(logits[i], labels[i]));
    return total;
  }
  std::vector<double> w0(kappas.size());
  std::vector<double> w1(kappas.size());
  for (std::size_t n = 0; n < kappas.size(); ++n) {
    const double k = rebalance ? (kappas[n] + 0.5) / 2.0 : kappas[n];
    w0[n] = 2.0 * k;
    w1[n] = 2.0 * (1.0 - k);
  }
  return add(cross_entropy(logits[0], labels[0], w0), cross_entropy(logits[1], labels[1], w1));
}

double lr_at(const TrainConfig& config, int epoch, std::int64_t step_in_epoch,
             std::int64_t steps_per_epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_at: epoch must be >= 0");
  const double base = config.base_lr();
  if (epoch < config.warmup_epochs && steps_per_epoch > 0) {
    const double done = static_cast<double>(epoch * steps_per_epoch + step_in_epoch);
    const double total = static_cast<double>(config.warmup_epochs * steps_per_epoch);
    return base * done / total;
  }
  const auto drops = std::count_if(config.decay_epochs.begin(), config.decay_epochs.end(),
                                   [epoch](int e) { return e <= epoch; });
  return base * std::pow(config.decay_factor, static_cast<double>(drops));
}

double unmix_coefficient(const UnmixMode& mode, int epoch) {
  if (mode.kind == UnmixMode::Kind::fadeout) return fadeout_coefficient(epoch, mode.fadeout_end_epoch);
  return 0.0;
}

std::string metrics_csv_header() {
  return "epoch,lr,train_loss,ens_acc,ind_acc_0,ind_acc_1,share_rate_classifier,"
         "share_rate_encoder,r_fadeout";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  const auto ind = [&](std::size_t i) {
    return i < m.eval.individual_accuracies.size() ? m.eval.individual_accuracies[i] : 0.0;
  };
  os << m.epoch << ',' << fmt(m.lr) << ',' << fmt(m.train_loss) << ',' << fmt(m.eval.ensemble_accuracy)
     << ',' << fmt(ind(0)) << ',' << fmt(ind(1)) << ',' << fmt(m.share_rate_classifier) << ','
     << fmt(m.share_rate_encoder) << ',' << fmt(m.r_fadeout);
  return os.str();
}

std::vector<EpochMetrics> fit(MimoModel& model, const Dataset& train, const Dataset& val,
                              const TrainConfig& config, const EpochCallback& on_epoch) {
  std::vector<EpochMetrics> log;
  if (config.epochs == 0) return log;
  if (train.size() < 2) throw std::invalid_argument("fit: training set needs at least 2 examples");

  const int m = model.config().m;
  Sgd optimizer(model.parameters(), config.momentum, config.weight_decay);
  const Rng root(config.seed);
  const auto pairs_per_epoch = train.size() * config.batch_repetition;
  // A trailing batch of one pair cannot be batch-normalized; it is dropped.
  auto steps_per_epoch = (pairs_per_epoch + config.batch_size - 1) / config.batch_size;
  if (pairs_per_epoch % config.batch_size == 1) --steps_per_epoch;

  std::deque<double> recent_losses;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng = root.fork(static_cast<std::uint64_t>(epoch) + 1);
    const EpochPlan plan = build_batches(train, config, m, rng);
    const double r = unmix_coefficient(model.config().unmix, epoch);

    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      const auto begin = step * config.batch_size;
      const auto end = std::min<std::int64_t>(begin + config.batch_size, plan.pair_count());
      const StepBatch batch = make_step_batch(train, plan, begin, end, config.augment, rng);
      lr = lr_at(config, epoch, step, steps_per_epoch);

      optimizer.zero_grad();
      Tape tape;
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        const auto fwd = forward_train(model, batch.inputs, batch.masks, r, /*training=*/true);
        const Tensor loss = subnetwork_loss(fwd.logits, batch.labels, batch.kappas, config.rebalance_loss);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          std::ostringstream os;
          os << "non-finite loss at epoch " << epoch << ", step " << step << ", lr " << lr
             << "; recent losses:";
          for (double l : recent_losses) os << ' ' << l;
          throw TrainingDiverged(os.str());
        }
        backward(loss);
      }
      optimizer.step(lr);
      loss_sum += loss_value;
      recent_losses.push_back(loss_value);
      if (recent_losses.size() > 10) recent_losses.pop_front();
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lr = lr;
    metrics.train_loss = steps_per_epoch > 0 ? loss_sum / static_cast<double>(steps_per_epoch) : 0.0;
    metrics.eval = val.size() > 0 ? evaluate(model, val) : EvalResult{};
    metrics.share_rate_classifier = sharing_rate(classifier_l1_histograms(model)).rate;
    metrics.share_rate_encoder = sharing_rate(encoder_l1_histograms(model)).rate;
    metrics.r_fadeout = r;
    log.push_back(metrics);
    if (on_epoch) on_epoch(metrics);
  }
  return log;
}

EvalResult evaluate(MimoModel& model, const Dataset& data, std::int64_t batch_size) {
  EvalAccumulator acc;
  for (std::int64_t start = 0; start < data.size(); start += batch_size) {
    const auto count = std::min(batch_size, data.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    const auto out = forward_inference(model, data.batch(idx));
    const auto labels = data.batch_labels(idx);
    acc.add(out.ensemble_probs, out.per_subnet_probs, labels);
  }
  return acc.result();
}

EvalResult evaluate_probabilities(const Tensor& ensemble_probs,
                                  std::span<const Tensor> per_subnet_probs,
                                  std::span<const int> labels) {
  EvalAccumulator acc;
  acc.add(ensemble_probs, per_subnet_probs, labels);
  return acc.result();
}

}  // namespace mixshare
