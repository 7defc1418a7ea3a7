// Acceptance checks 1-8. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixshare/diagnostics.hpp"
#include "mixshare/experiment.hpp"
#include "mixshare/masks.hpp"
#include "mixshare/ops.hpp"
#include "mixshare/train.hpp"

using namespace mixshare;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

const fs::path kSource = MIXSHARE_SOURCE_DIR;
const std::string kCli = MIXSHARE_CLI_PATH;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

ExperimentConfig canonical(const std::string& name) {
  return load_config(kSource / "configs" / (name + ".json"));
}

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  auto config = canonical("desk");
  config.data.synthetic.per_class = 4;
  std::ostringstream os;
  double worst = 0.0;
  // Full unmixing, and fadeout (r = 0.5) so the fractional masks are covered too.
  for (const auto& mode : {UnmixMode::full(), UnmixMode::fadeout(10)}) {
    config.model.unmix = mode;
    const double err = model_gradcheck(config, 64, 1e-6);
    os << mode.name() << " max rel err " << err << "; ";
    worst = std::max(worst, err);
  }
  const double elapsed = seconds_since(t0);
  os << "64 samples each, " << std::fixed << std::setprecision(1) << elapsed << " s";
  return {worst < 1e-4 && elapsed < 120.0, os.str()};
}

Outcome unmix_algebra() {
  Rng rng(2024);
  constexpr std::int64_t kBatch = 50;
  constexpr std::int64_t kSide = 8;
  constexpr std::int64_t kChannels = 6;
  int exact = 0;
  int total = 0;
  bool endpoints = true;
  for (int round = 0; round < 20; ++round) {
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
    for (std::int64_t n = 0; n < kBatch; ++n) {
      MaskPair pair;
      if (n % 2 == 0) {
        pair = sample_cutmix_mask(kSide, kSide, rng.uniform(), rng);
      } else {
        pair = MaskPair::ones(kSide, kSide);
        for (auto& v : pair.mask) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
      }
      auto [a, b] = effective_masks(pair, 0.0);
      endpoints = endpoints && a == pair.mask && b == pair.complement();
      const auto [one_a, one_b] = effective_masks(pair, 1.0);
      for (std::size_t i = 0; i < one_a.size(); ++i) {
        endpoints = endpoints && one_a[i] == 1.0 && one_b[i] == 1.0;
      }
      first.push_back(std::move(a));
      second.push_back(std::move(b));
    }
    const Tensor features = random_tensor({kBatch, kChannels, kSide, kSide}, rng);
    const Tensor maps[2] = {stack_maps(first, kSide, kSide, kSide, kSide),
                            stack_maps(second, kSide, kSide, kSide, kSide)};
    const auto out = unmix(features, maps, UnmixMode::full());
    const auto f = features.data();
    const auto o0 = out[0].data();
    const auto o1 = out[1].data();
    const auto per_example = kChannels * kSide * kSide;
    for (std::int64_t n = 0; n < kBatch; ++n) {
      bool ok = true;
      for (std::int64_t k = n * per_example; k < (n + 1) * per_example; ++k) {
        ok = ok && std::bit_cast<std::uint64_t>(o0[k] + o1[k]) == std::bit_cast<std::uint64_t>(f[k]);
      }
      exact += ok ? 1 : 0;
      ++total;
    }
  }
  std::ostringstream os;
  os << exact << "/" << total << " mask pairs reconstruct exactly; r endpoints "
     << (endpoints ? "ok" : "WRONG");
  return {exact == total && total == 1000 && endpoints, os.str()};
}

Outcome schedule_exactness() {
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.batch_repetition = 2;
  cfg.warmup_epochs = 1;
  cfg.decay_epochs = {3, 6};
  cfg.decay_factor = 0.1;
  const std::int64_t steps = 10;
  bool ok = cfg.base_lr() == 0.025;
  std::ostringstream os;
  os << "base lr " << cfg.base_lr();
  const double expected[] = {0.025, 0.025, 0.025, 0.0025, 0.0025, 0.0025, 0.00025, 0.00025};
  for (int e = 1; e < 8; ++e) {
    for (std::int64_t s = 0; s < steps; ++s) {
      const double lr = lr_at(cfg, e, s, steps);
      ok = ok && std::abs(lr - expected[e]) <= 1e-15 * expected[e];
    }
  }
  // Before each drop the rate is still the previous level; the drop is a factor of 10.
  ok = ok && std::abs(lr_at(cfg, 2, steps - 1, steps) / lr_at(cfg, 3, 0, steps) - 10.0) < 1e-12;
  ok = ok && std::abs(lr_at(cfg, 5, steps - 1, steps) / lr_at(cfg, 6, 0, steps) - 10.0) < 1e-12;

  const int end = 10;
  const double r0 = fadeout_coefficient(0, end);
  const double rhalf = fadeout_coefficient(end / 2, end);
  bool r_ok = r0 == 0.0 && rhalf == 0.5;
  for (int e = end; e < end + 20; ++e) r_ok = r_ok && fadeout_coefficient(e, end) == 1.0;
  r_ok = r_ok && unmix_coefficient(UnmixMode::fadeout(end), end / 2) == 0.5;
  r_ok = r_ok && unmix_coefficient(UnmixMode::full(), end / 2) == 0.0;
  os << "; drops x10 at epochs 3 and 6 " << (ok ? "ok" : "WRONG") << "; fadeout r {0, 0.5, 1} "
     << (r_ok ? "ok" : "WRONG");
  return {ok && r_ok, os.str()};
}

Outcome sharing_metric() {
  std::ostringstream os;
  bool ok = true;
  const Histograms identical = {{1, 2, 3, 4}, {1, 2, 3, 4}};
  const Histograms disjoint = {{1, 0, 2, 0}, {0, 3, 0, 4}};
  const Histograms slab = {{7, 1}, {1, 7}};
  const double r_id = sharing_rate(identical).rate;
  const double r_dis = sharing_rate(disjoint).rate;
  const double r_slab = sharing_rate(slab).rate;
  ok = ok && std::abs(r_id - 100.0) < 1e-9 && std::abs(r_dis) < 1e-9 &&
       std::abs(r_slab - 14.3) <= 0.1;
  os << "identical " << r_id << ", disjoint " << r_dis << ", [7,1]/[1,7] " << r_slab;

  Rng rng(11);
  bool invariant = true;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t features = 5 + rng.below(60);
    Histograms h(2, std::vector<double>(features));
    for (auto& row : h)
      for (auto& v : row) v = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    const double base = sharing_rate(h).rate;
    Histograms scaled = h;
    const double factor = std::exp(4.0 * rng.normal());
    for (auto& v : scaled[rng.below(2)]) v *= factor;
    std::vector<std::size_t> perm(features);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    Histograms permuted = h;
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t c = 0; c < features; ++c) permuted[i][c] = h[i][perm[c]];
    invariant = invariant && std::abs(sharing_rate(scaled).rate - base) <= 1e-9 * std::max(1.0, base);
    invariant = invariant && std::abs(sharing_rate(permuted).rate - base) <= 1e-9 * std::max(1.0, base);
  }
  os << "; rescaling/permutation invariance over 100 trials " << (invariant ? "ok" : "WRONG");
  return {ok && invariant, os.str()};
}

// The MixMo pipeline written out by hand: encoders, mask mixing, core,
// pooling, heads, and no unmixing step at all.
std::vector<Tensor> pipeline_without_unmix(MimoModel& model, std::span<const Tensor> inputs,
                                           const std::vector<MaskPair>& masks, bool training) {
  std::vector<Tensor> encoded = {model.encode(0, inputs[0]), model.encode(1, inputs[1])};
  const Tensor pooled = global_avg_pool(model.core(mix(encoded, masks, true), training));
  return {model.head(0, pooled), model.head(1, pooled)};
}

Outcome inert_path() {
  MimoConfig cfg;
  cfg.num_classes = 4;
  cfg.unmix = UnmixMode::none();
  Rng init_a(77);
  Rng init_b(77);
  MimoModel model(cfg, init_a);
  MimoModel twin(cfg, init_b);
  Rng rng(5);
  int identical = 0;
  constexpr int kPasses = 100;
  for (int pass = 0; pass < kPasses; ++pass) {
    const std::int64_t n = 2 + static_cast<std::int64_t>(rng.below(3));
    std::vector<Tensor> inputs = {random_tensor({n, 3, 32, 32}, rng), random_tensor({n, 3, 32, 32}, rng)};
    std::vector<MaskPair> masks;
    for (std::int64_t i = 0; i < n; ++i) masks.push_back(sample_cutmix_mask(32, 32, rng.uniform(), rng));
    const bool training = pass % 2 == 0;
    const double r = rng.uniform();  // ignored without unmixing
    const auto a = forward_train(model, inputs, masks, r, training).logits;
    const auto b = pipeline_without_unmix(twin, inputs, masks, training);
    identical += same_bits(a[0].data(), b[0].data()) && same_bits(a[1].data(), b[1].data()) ? 1 : 0;
  }
  std::ostringstream os;
  os << identical << "/" << kPasses << " forward passes bit-identical (train and inference batchnorm)";
  return {identical == kPasses, os.str()};
}

int run_cli(const std::string& args) {
  const std::string cmd = kCli + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism(const fs::path& work) {
  const auto dir = work / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto j = canonical("desk").to_json();
  j["epochs"] = 2;
  j["synthetic_per_class"] = 10;
  j["batch_size"] = 16;
  j["backend"] = "reference";
  j["output_dir"] = (dir / "first").string();
  const auto cfg = dir / "tiny.json";
  std::ofstream(cfg) << j.dump(2);
  const int rc1 = run_cli("train -q -c " + cfg.string());
  const int rc2 = run_cli("train -q -c " + cfg.string() + " -o " + (dir / "second").string());
  const bool ckpt = slurp(dir / "first" / "checkpoint.mxsh") == slurp(dir / "second" / "checkpoint.mxsh");
  const bool csv = slurp(dir / "first" / "metrics.csv") == slurp(dir / "second" / "metrics.csv");
  const bool nonempty = fs::file_size(dir / "first" / "checkpoint.mxsh") > 0;
  std::ostringstream os;
  os << "exit codes " << rc1 << "," << rc2 << "; checkpoint " << (ckpt ? "identical" : "DIFFERS")
     << "; metrics.csv " << (csv ? "identical" : "DIFFERS");
  return {rc1 == 0 && rc2 == 0 && ckpt && csv && nonempty, os.str()};
}

// ---------------------------------------------------------------------------

struct RunSummary {
  double share = 0.0;
  double ens = 0.0;
  double ind = 0.0;
};

struct VariantStats {
  std::vector<RunSummary> runs;
  double mean(double RunSummary::*field) const {
    double s = 0.0;
    for (const auto& r : runs) s += r.*field;
    return s / static_cast<double>(runs.size());
  }
  double stddev(double RunSummary::*field) const {
    const double m = mean(field);
    double s = 0.0;
    for (const auto& r : runs) s += (r.*field - m) * (r.*field - m);
    return runs.size() > 1 ? std::sqrt(s / static_cast<double>(runs.size() - 1)) : 0.0;
  }
  double gap() const { return mean(&RunSummary::ens) - mean(&RunSummary::ind); }
};

struct TableRun {
  std::map<char, VariantStats> stats;
  std::map<char, double> block3_pearson;  // seed-0 models of (a) and (b)
  double seconds = 0.0;
};

double block3_pearson(const ExperimentConfig& config, TrainedRun& run) {
  Rng rng = Rng(config.train.seed).fork(99);
  const MaskPair mask = sample_cutmix_mask(32, 32, 0.5, rng);
  const Histograms h = variance_importance(run.model, run.val, run.val.image(0), 3, mask);
  return pearson(h[0], h[1]);
}

TableRun train_table(const fs::path& work, int seeds) {
  const std::map<char, std::string> variants = {
      {'a', "desk_mixmo"}, {'b', "desk_unmix_init"}, {'c', "desk_unmix"}, {'d', "desk_fadeout"}};
  TableRun out;
  const auto t0 = Clock::now();
  for (int seed = 0; seed < seeds; ++seed) {
    for (const auto& [key, name] : variants) {
      auto config = canonical(name);
      config.train.seed = static_cast<std::uint64_t>(seed);
      config.backend = kernels::Backend::parallel;
      const auto t_run = Clock::now();
      TrainedRun run = train_experiment(config);
      const auto dir = work / "table" / (name + "_seed" + std::to_string(seed));
      write_run_artifacts(config, run, dir);
      const auto& last = run.log.back();
      out.stats[key].runs.push_back(
          {last.share_rate_classifier, last.eval.ensemble_accuracy, last.eval.mean_individual_accuracy});
      if (seed == 0 && (key == 'a' || key == 'b')) out.block3_pearson[key] = block3_pearson(config, run);
      std::cout << "  (" << key << ") " << name << " seed " << seed << ": share "
                << std::setprecision(4) << last.share_rate_classifier << "%, ens "
                << last.eval.ensemble_accuracy << ", ind " << last.eval.mean_individual_accuracy
                << "  [" << std::setprecision(3) << seconds_since(t_run) << " s]" << std::endl;
    }
  }
  out.seconds = seconds_since(t0);
  return out;
}

Outcome table_reproduction(const TableRun& t) {
  const auto& a = t.stats.at('a');
  const auto& b = t.stats.at('b');
  const auto& c = t.stats.at('c');
  const auto& d = t.stats.at('d');
  const double sa = a.mean(&RunSummary::share);
  const double sb = b.mean(&RunSummary::share);
  const double sd = d.mean(&RunSummary::share);
  const bool pa = sa < 30.0;
  const bool pb = sb > 90.0 && b.gap() < 0.5;
  const bool pc = c.mean(&RunSummary::ens) < b.mean(&RunSummary::ens) ||
                  c.stddev(&RunSummary::ens) > b.stddev(&RunSummary::ens);
  const bool pd = sd > sa && sd < sb && d.gap() > 0.3;
  const bool fast = t.seconds < 1800.0;
  std::ostringstream os;
  os << std::setprecision(4) << "(a) share " << sa << (pa ? " ok" : " FAIL") << "; (b) share " << sb
     << ", ens-ind " << b.gap() << (pb ? " ok" : " FAIL") << "; (c) ens " << c.mean(&RunSummary::ens)
     << "+-" << c.stddev(&RunSummary::ens) << " vs (b) " << b.mean(&RunSummary::ens) << "+-"
     << b.stddev(&RunSummary::ens) << (pc ? " ok" : " FAIL") << "; (d) share " << sd << ", ens-ind "
     << d.gap() << (pd ? " ok" : " FAIL") << "; " << a.runs.size() << " seeds in " << t.seconds
     << " s" << (fast ? "" : " (over 30 min)");
  return {pa && pb && pc && pd && fast, os.str()};
}

Outcome variance_diagnostic(const TableRun& t) {
  const double ra = t.block3_pearson.at('a');
  const double rb = t.block3_pearson.at('b');
  std::ostringstream os;
  os << std::setprecision(4) << "block-3 Pearson r: (a) " << ra << " (need < -0.2), (b) " << rb
     << " (need > 0.5)";
  return {ra < -0.2 && rb > 0.5, os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"mixshare acceptance checks"};
  std::set<int> only;
  std::string work = (fs::temp_directory_path() / "mixshare_acceptance").string();
  int seeds = 3;
  app.add_option("--only", only, "Run only these criteria (1-8)")->check(CLI::Range(1, 8));
  app.add_option("--work", work, "Directory for training artifacts");
  app.add_option("--seeds", seeds, "Seeds per variant for criteria 5 and 8")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);

  const auto wanted = [&](int k) { return only.empty() || only.count(k) > 0; };
  fs::create_directories(work);

  std::map<int, std::pair<std::string, std::function<Outcome()>>> checks = {
      {1, {"gradient oracle", gradient_oracle}},
      {2, {"unmix algebra", unmix_algebra}},
      {3, {"schedule exactness", schedule_exactness}},
      {4, {"sharing-rate metric", sharing_metric}},
      {6, {"inert-path equivalence", inert_path}},
      {7, {"determinism", [&] { return determinism(work); }}},
  };
  std::optional<TableRun> table;
  const auto need_table = [&]() -> const TableRun& {
    if (!table) table = train_table(work, seeds);
    return *table;
  };
  checks[5] = {"desk-scale table reproduction", [&] { return table_reproduction(need_table()); }};
  checks[8] = {"variance diagnostic", [&] { return variance_diagnostic(need_table()); }};

  int failures = 0;
  for (auto& [k, entry] : checks) {
    if (!wanted(k)) continue;
    Outcome result;
    try {
      result = entry.second();
    } catch (const std::exception& e) {
      result = {false, std::string("exception: ") + e.what()};
    }
    failures += result.pass ? 0 : 1;
    std::cout << (result.pass ? "PASS" : "FAIL") << "  criterion " << k << " (" << entry.first
              << "): " << result.detail << std::endl;
  }
  return failures == 0 ? EXIT_SUCCESS : EXIT_FAILURE;
}
