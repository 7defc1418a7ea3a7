#include <doctest.h>

#include <cmath>
#include <map>

#include "helpers.hpp"
#include "mixshare/checkpoint.hpp"
#include "mixshare/data.hpp"
#include "mixshare/kernels.hpp"
#include "mixshare/ops.hpp"
#include "mixshare/train.hpp"

using namespace mixshare;

namespace {

Dataset tiny_dataset(int per_class, std::uint64_t seed = 1, int classes = 4) {
  SyntheticSpec spec;
  spec.class_count = classes;
  spec.per_class = per_class;
  Rng rng(seed);
  return gen_synthetic(spec, rng);
}

MimoConfig desk_model(int classes = 4) {
  MimoConfig c;
  c.num_classes = classes;
  c.unmix = UnmixMode::full();
  return c;
}

}  // namespace

TEST_CASE("batch repetition: each example appears b times per stream") {
  const Dataset data = tiny_dataset(250);  // 1000 examples
  TrainConfig cfg;
  cfg.batch_repetition = 2;
  cfg.input_repetition = 0.0;
  Rng rng(3);
  const auto plan = build_batches(data, cfg, 2, rng);
  CHECK(plan.pair_count() == 2000);
  CHECK(plan.masks.size() == 2000);
  for (const auto& stream : plan.streams) {
    std::vector<int> counts(1000, 0);
    for (auto i : stream) ++counts[static_cast<std::size_t>(i)];
    for (int c : counts) CHECK(c == 2);
  }
  std::int64_t same = 0;
  for (std::int64_t p = 0; p < plan.pair_count(); ++p) same += plan.streams[0][p] == plan.streams[1][p];
  CHECK(same < 20);  // partners almost surely differ
}

TEST_CASE("input repetition fraction") {
  const Dataset data = tiny_dataset(1250);  // 5000 examples, 10^4 pairs at b = 2
  TrainConfig cfg;
  cfg.input_repetition = 0.1;
  Rng rng(4);
  const auto plan = build_batches(data, cfg, 2, rng);
  REQUIRE(plan.pair_count() == 10000);
  std::int64_t repeated = 0;
  for (std::int64_t p = 0; p < plan.pair_count(); ++p) {
    if (plan.repeated[static_cast<std::size_t>(p)]) {
      ++repeated;
      CHECK(plan.streams[0][p] == plan.streams[1][p]);
    }
  }
  CHECK(std::abs(repeated / 10000.0 - 0.1) < 0.01);

  cfg.input_repetition = 1.0;
  const auto all = build_batches(data, cfg, 2, rng);
  CHECK(all.streams[0] == all.streams[1]);

  // Repeated pairs give both heads the same label.
  const auto batch = make_step_batch(data, all, 0, 8, false, rng);
  CHECK(batch.labels[0] == batch.labels[1]);
  CHECK(testutil::bit_equal(batch.inputs[0].data(), batch.inputs[1].data()));

  CHECK_THROWS(build_batches(Dataset{}, cfg, 2, rng));
}

TEST_CASE("subnetwork loss weighting") {
  const Tensor l0({1, 3}, std::vector<double>{0.2, 1.0, -0.5});
  const Tensor l1({1, 3}, std::vector<double>{-1.0, 0.3, 2.0});
  const std::vector<Tensor> logits{l0, l1};
  const std::vector<std::vector<int>> labels{{1}, {0}};
  const std::vector<int> y0{1}, y1{0};
  const double ce0 = cross_entropy(l0, y0).item();
  const double ce1 = cross_entropy(l1, y1).item();

  const std::vector<double> half{0.5}, one{1.0};
  CHECK(subnetwork_loss(logits, labels, half, false).item() == doctest::Approx(ce0 + ce1));
  CHECK(subnetwork_loss(logits, labels, one, false).item() == doctest::Approx(2.0 * ce0));
  CHECK(subnetwork_loss(logits, labels, one, true).item() == doctest::Approx(1.5 * ce0 + 0.5 * ce1));

  // Weights always sum to M: equal per-head losses give 2 * CE for any kappa.
  const std::vector<Tensor> same{l0, l0};
  const std::vector<std::vector<int>> same_labels{{1}, {1}};
  for (double k : {0.1, 0.37, 0.9}) {
    const std::vector<double> kk{k};
    CHECK(subnetwork_loss(same, same_labels, kk, false).item() == doctest::Approx(2.0 * ce0));
    CHECK(subnetwork_loss(same, same_labels, kk, true).item() == doctest::Approx(2.0 * ce0));
  }
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  cfg.batch_repetition = 2;
  cfg.batch_size = 64;
  cfg.base_lr_numerator = 0.1;
  cfg.decay_epochs = {75, 150, 225};
  cfg.warmup_epochs = 1;
  CHECK(cfg.base_lr() == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(cfg, 0, 0, 100) == 0.0);
  CHECK(lr_at(cfg, 0, 50, 100) == doctest::Approx(0.0125).epsilon(1e-15));
  CHECK(lr_at(cfg, 1, 0, 100) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(cfg, 74, 99, 100) == doctest::Approx(0.025).epsilon(1e-15));
  CHECK(lr_at(cfg, 75, 0, 100) == doctest::Approx(0.0025).epsilon(1e-15));
  CHECK(lr_at(cfg, 80, 3, 100) == doctest::Approx(0.0025).epsilon(1e-15));
  CHECK(lr_at(cfg, 225, 0, 100) == doctest::Approx(0.000025).epsilon(1e-12));

  double prev = -1.0;
  for (int s = 0; s < 100; ++s) {
    const double lr = lr_at(cfg, 0, s, 100);
    CHECK(lr >= prev);
    prev = lr;
  }
}

TEST_CASE("unmix coefficient follows the mode") {
  CHECK(unmix_coefficient(UnmixMode::full(), 50) == 0.0);
  CHECK(unmix_coefficient(UnmixMode::partial(0.25), 50) == 0.0);
  CHECK(unmix_coefficient(UnmixMode::fadeout(10), 0) == 0.0);
  CHECK(unmix_coefficient(UnmixMode::fadeout(10), 5) == 0.5);
  CHECK(unmix_coefficient(UnmixMode::fadeout(10), 12) == 1.0);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK(cfg.violations().empty());
  cfg.input_repetition = 1.5;
  cfg.batch_repetition = 0;
  cfg.decay_epochs = {10, 5};
  CHECK(cfg.violations().size() == 3);
}

TEST_CASE("evaluation metrics on a hand-built table") {
  const Tensor ens({3, 3}, std::vector<double>{0.7, 0.2, 0.1, 0.1, 0.3, 0.6, 0.3, 0.4, 0.3});
  const Tensor p0({3, 3}, std::vector<double>{0.8, 0.1, 0.1, 0.2, 0.5, 0.3, 0.5, 0.2, 0.3});
  const Tensor p1({3, 3}, std::vector<double>{0.6, 0.3, 0.1, 0.0, 0.1, 0.9, 0.1, 0.6, 0.3});
  const std::vector<Tensor> subs{p0, p1};
  const std::vector<int> labels{0, 2, 0};
  const auto r = evaluate_probabilities(ens, subs, labels);
  CHECK(r.ensemble_accuracy == doctest::Approx(200.0 / 3.0));
  REQUIRE(r.individual_accuracies.size() == 2);
  CHECK(r.individual_accuracies[0] == doctest::Approx(200.0 / 3.0));  // rows 0, 2
  CHECK(r.individual_accuracies[1] == doctest::Approx(200.0 / 3.0));  // rows 0, 1
  CHECK(r.mean_individual_accuracy == doctest::Approx(200.0 / 3.0));
  CHECK(r.nll == doctest::Approx(-(std::log(0.7) + std::log(0.6) + std::log(0.3)) / 3.0));
}

TEST_CASE("untrained model is at chance and identical heads agree") {
  const Dataset data = tiny_dataset(50);
  MimoConfig mc = desk_model();
  mc.init = InitMode::identical;
  Rng rng(2);
  MimoModel model(mc, rng);
  std::ranges::copy(model.classifiers[0].weight.data(), model.classifiers[1].weight.data().begin());
  const auto r = evaluate(model, data);
  // 200 balanced examples: 3 sigma of a binomial around 25%.
  CHECK(std::abs(r.ensemble_accuracy - 25.0) <= 3.0 * 100.0 * std::sqrt(0.25 * 0.75 / 200.0) + 1e-9);
  CHECK(r.individual_accuracies[0] == r.individual_accuracies[1]);
  CHECK(r.ensemble_accuracy == r.individual_accuracies[0]);
}

TEST_CASE("fit with zero epochs leaves the model untouched") {
  const Dataset data = tiny_dataset(10);
  Rng rng(1);
  MimoModel model(desk_model(), rng);
  const auto before = encode_checkpoint(model.state());
  TrainConfig cfg;
  cfg.epochs = 0;
  CHECK(fit(model, data, data, cfg).empty());
  CHECK(encode_checkpoint(model.state()) == before);
}

TEST_CASE("fit is bit-reproducible from the seed") {
  kernels::BackendScope scope(kernels::Backend::reference);
  const Dataset train = tiny_dataset(6, 5);
  const Dataset val = tiny_dataset(2, 6);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 77;
  auto run = [&] {
    Rng rng(cfg.seed);
    MimoModel model(desk_model(), rng);
    const auto log = fit(model, train, val, cfg);
    std::string csv;
    for (const auto& m : log) csv += metrics_csv_row(m) + "\n";
    return std::make_pair(encode_checkpoint(model.state()), csv);
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  cfg.seed = 78;
  CHECK(run().first != a.first);
}

TEST_CASE("training moves the loss and reports every epoch") {
  const Dataset train = tiny_dataset(8, 5);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.warmup_epochs = 0;
  Rng rng(0);
  MimoModel model(desk_model(), rng);
  int calls = 0;
  const auto log = fit(model, train, train, cfg, [&](const EpochMetrics&) { ++calls; });
  CHECK(calls == 3);
  REQUIRE(log.size() == 3);
  for (const auto& m : log) {
    CHECK(std::isfinite(m.train_loss));
    CHECK(m.eval.ensemble_accuracy >= 0.0);
    CHECK(m.eval.ensemble_accuracy <= 100.0);
    CHECK(m.share_rate_classifier >= 0.0);
    CHECK(m.share_rate_classifier <= 100.0);
  }
}

TEST_CASE("divergence is reported with context") {
  const Dataset train = tiny_dataset(8, 5);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.warmup_epochs = 0;
  cfg.base_lr_numerator = 1e300;
  Rng rng(0);
  MimoModel model(desk_model(), rng);
  try {
    fit(model, train, train, cfg);
    FAIL("expected divergence");
  } catch (const TrainingDiverged& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch") != std::string::npos);
    CHECK(msg.find("lr") != std::string::npos);
  }
}

TEST_CASE("metrics CSV schema") {
  CHECK(metrics_csv_header() ==
        "epoch,lr,train_loss,ens_acc,ind_acc_0,ind_acc_1,share_rate_classifier,share_rate_encoder,"
        "r_fadeout");
  EpochMetrics m;
  m.epoch = 3;
  m.lr = 0.1;
  m.eval.individual_accuracies = {50.0, 25.0};
  const auto row = metrics_csv_row(m);
  CHECK(row.rfind("3,0.10000000000000001,", 0) == 0);
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
}
