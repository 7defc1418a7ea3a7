#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "mixshare/diagnostics.hpp"

using namespace mixshare;

namespace {

MimoModel make_model(std::uint64_t seed) {
  MimoConfig c;
  c.num_classes = 4;
  c.unmix = UnmixMode::full();
  Rng rng(seed);
  return MimoModel(c, rng);
}

Dataset constant_dataset(int n) {
  Dataset d;
  d.class_count = 4;
  d.images.assign(static_cast<std::size_t>(n * kImageSize), 0.3);
  d.labels.assign(static_cast<std::size_t>(n), 1);
  return d;
}

}  // namespace

TEST_CASE("L1 histograms match direct sums over raw weights") {
  auto model = make_model(3);
  const auto enc = encoder_l1_histograms(model);
  const auto cls = classifier_l1_histograms(model);
  REQUIRE(enc.size() == 2);
  REQUIRE(enc[0].size() == 16);
  REQUIRE(cls[1].size() == 64);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto w = model.encoders[i].data();
    for (std::size_t c = 0; c < 16; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 27; ++k) s += std::abs(w[c * 27 + k]);
      CHECK(enc[i][c] == doctest::Approx(s).epsilon(1e-10));
    }
    const auto W = model.classifiers[i].weight.data();
    for (std::size_t c = 0; c < 64; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += std::abs(W[k * 64 + c]);
      CHECK(cls[i][c] == doctest::Approx(s).epsilon(1e-10));
    }
  }
}

TEST_CASE("encoder slab of 7 versus 1") {
  auto model = make_model(1);
  for (auto& e : model.encoders) std::ranges::fill(e.data(), 0.0);
  for (std::size_t k = 0; k < 27; ++k) {
    model.encoders[0].data()[k] = 7.0 / 27.0;
    model.encoders[1].data()[k] = 1.0 / 27.0;
  }
  const auto h = encoder_l1_histograms(model);
  CHECK(h[0][0] == doctest::Approx(7.0));
  CHECK(h[1][0] == doctest::Approx(1.0));
  CHECK(h[0][1] == 0.0);

  for (auto& e : model.encoders) std::ranges::fill(e.data(), 0.0);
  const auto zero = encoder_l1_histograms(model);
  for (double v : zero[0]) CHECK(v == 0.0);
  CHECK(sharing_rate(zero).rate == doctest::Approx(100.0));  // both uniform
}

TEST_CASE("one-hot classifier column") {
  auto model = make_model(2);
  std::ranges::fill(model.classifiers[0].weight.data(), 0.0);
  model.classifiers[0].weight.data()[2 * 64 + 5] = -0.75;
  const auto h = classifier_l1_histograms(model);
  CHECK(h[0][5] == 0.75);
  CHECK(h[0][4] == 0.0);
  CHECK(sharing_rate(h).per_feature_ratio[4] == 0.0);
}

TEST_CASE("sharing rate hand-computed cases") {
  CHECK(sharing_rate({{1, 2, 3}, {1, 2, 3}}).rate == doctest::Approx(100.0));
  CHECK(sharing_rate({{1, 0, 1, 0}, {0, 1, 0, 1}}).rate == doctest::Approx(0.0));
  const auto fig = sharing_rate({{7, 1}, {1, 7}});
  CHECK(fig.per_feature_ratio[0] == doctest::Approx(1.0 / 7.0));
  CHECK(fig.per_feature_ratio[1] == doctest::Approx(1.0 / 7.0));
  CHECK(std::abs(fig.rate - 14.3) <= 0.1);

  // Features nobody uses count as shared.
  const auto unused = sharing_rate({{1, 0}, {1, 0}});
  CHECK(unused.per_feature_ratio[1] == 1.0);
  // Three subnetworks: min over max across all of them.
  CHECK(sharing_rate({{1, 1}, {1, 1}, {2, 0}}).per_feature_ratio[1] == 0.0);
}

TEST_CASE("sharing rate is invariant to rescaling and permutation") {
  Rng rng(8);
  Histograms h(2, std::vector<double>(10));
  for (auto& row : h)
    for (auto& v : row) v = rng.uniform();
  const auto base = sharing_rate(h);

  Histograms scaled = h;
  for (auto& v : scaled[1]) v *= 37.5;
  CHECK(sharing_rate(scaled).rate == doctest::Approx(base.rate).epsilon(1e-12));

  std::vector<std::size_t> perm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
  Histograms permuted(2, std::vector<double>(10));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 10; ++c) permuted[i][c] = h[i][perm[c]];
  const auto p = sharing_rate(permuted);
  CHECK(p.rate == doctest::Approx(base.rate).epsilon(1e-12));
  for (std::size_t c = 0; c < 10; ++c) CHECK(p.per_feature_ratio[c] == doctest::Approx(base.per_feature_ratio[perm[c]]).epsilon(1e-12));
  CHECK(base.rate >= 0.0);
  CHECK(base.rate <= 100.0);
}

TEST_CASE("channel variance importance") {
  const Tensor constant({5, 3, 2, 2}, 1.25);
  for (double v : channel_variance_importance(constant)) CHECK(v == 0.0);

  Tensor maps = testutil::random_tensor({6, 3, 2, 2}, 4);
  const auto base = channel_variance_importance(maps);
  for (std::int64_t n = 0; n < 6; ++n)
    for (std::int64_t p = 0; p < 4; ++p) maps.data()[static_cast<std::size_t>((n * 3 + 1) * 4 + p)] *= 2.0;
  const auto scaled = channel_variance_importance(maps);
  CHECK(scaled[1] == doctest::Approx(4.0 * base[1]));
  CHECK(scaled[0] == base[0]);

  // Population variance over N, then mean over space.
  const Tensor two({2, 1, 1, 2}, std::vector<double>{0.0, 1.0, 2.0, 5.0});
  CHECK(channel_variance_importance(two)[0] == doctest::Approx((1.0 + 4.0) / 2.0));
}

TEST_CASE("variance importance sweep") {
  auto model = make_model(5);
  const Dataset same = constant_dataset(6);
  Rng rng(1);
  const auto mask = sample_cutmix_mask(32, 32, 0.5, rng);
  const auto fixed = same.image(0);
  const auto v = variance_importance(model, same, fixed, 3, mask, 4);
  REQUIRE(v.size() == 2);
  REQUIRE(v[0].size() == 64);
  for (const auto& row : v)
    for (double x : row) CHECK(x == doctest::Approx(0.0).scale(1.0).epsilon(1e-20));

  CHECK(variance_importance(model, same, fixed, 1, mask).at(0).size() == 16);
  CHECK_THROWS_AS(variance_importance(model, same, fixed, 0, mask), std::out_of_range);
  CHECK_THROWS_AS(variance_importance(model, same, fixed, 4, mask), std::out_of_range);
}

TEST_CASE("report JSON round trip, schema and optional section") {
  auto model = make_model(6);
  SharingReport r = build_report(model);
  r.config = {{"seed", 3}};
  auto doc = report_to_json(r);
  CHECK(doc.at("schema_version") == kReportSchemaVersion);
  CHECK(doc.contains("timestamp"));
  CHECK_FALSE(doc.contains("variance_importance"));

  auto back = report_from_json(doc);
  CHECK(back.encoder_hist == r.encoder_hist);
  CHECK(back.classifier_hist == r.classifier_hist);
  CHECK(back.per_feature_ratio == r.per_feature_ratio);
  CHECK(back.share_rate_classifier == r.share_rate_classifier);
  CHECK_FALSE(back.variance_importance.has_value());
  CHECK(back.config == r.config);

  r.variance_importance = std::vector<std::pair<int, Histograms>>{{3, {{1.0, 2.0}, {0.5, 0.0}}}};
  back = report_from_json(report_to_json(r));
  REQUIRE(back.variance_importance.has_value());
  CHECK(back.variance_importance->at(0).first == 3);
  CHECK(back.variance_importance->at(0).second == r.variance_importance->at(0).second);

  doc["schema_version"] = 99;
  CHECK_THROWS(report_from_json(doc));
}

TEST_CASE("report files on disk") {
  auto model = make_model(7);
  const auto dir = testutil::scratch_dir("report");
  write_report(build_report(model), dir / "report.json");
  CHECK(std::filesystem::exists(dir / "report.json"));
  std::ifstream csv(dir / "report_classifier.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "feature_index,h_0,h_1,ratio");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 64);
  CHECK(std::filesystem::exists(dir / "report_encoder.csv"));
  CHECK_THROWS(write_report(build_report(model), dir / "missing" / "deeper" / "r.json"));
}

TEST_CASE("pearson correlation") {
  const std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8}, c{4, 3, 2, 1}, k{5, 5, 5, 5};
  CHECK(pearson(a, b) == doctest::Approx(1.0));
  CHECK(pearson(a, c) == doctest::Approx(-1.0));
  CHECK(pearson(a, k) == 0.0);
}
