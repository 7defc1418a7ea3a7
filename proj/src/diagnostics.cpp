#include "mixshare/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mixshare {

namespace {

constexpr double kNoiseFloor = 1e-12;

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_hist_csv(const std::filesystem::path& path, const Histograms& hists,
                    const std::vector<double>& ratio) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f << "feature_index";
  for (std::size_t i = 0; i < hists.size(); ++i) f << ",h_" << i;
  f << ",ratio\n";
  f << std::setprecision(17);
  for (std::size_t c = 0; c < ratio.size(); ++c) {
    f << c;
    for (const auto& h : hists) f << ',' << h[c];
    f << ',' << ratio[c] << '\n';
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

Histograms encoder_l1_histograms(MimoModel& model) {
  Histograms out;
  for (const auto& enc : model.encoders) {
    const auto channels = enc.dim(0);
    const auto slab = enc.numel() / channels;
    std::vector<double> h(static_cast<std::size_t>(channels), 0.0);
    const auto w = enc.data();
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t k = 0; k < slab; ++k) h[c] += std::abs(w[c * slab + k]);
    }
    out.push_back(std::move(h));
  }
  return out;
}

Histograms classifier_l1_histograms(MimoModel& model) {
  Histograms out;
  for (const auto& head : model.classifiers) {
    const auto classes = head.weight.dim(0);
    const auto features = head.weight.dim(1);
    std::vector<double> h(static_cast<std::size_t>(features), 0.0);
    const auto w = head.weight.data();
    for (std::int64_t k = 0; k < classes; ++k) {
      for (std::int64_t f = 0; f < features; ++f) h[f] += std::abs(w[k * features + f]);
    }
    out.push_back(std::move(h));
  }
  return out;
}

SharingRate sharing_rate(const Histograms& hists) {
  if (hists.size() < 2) throw std::invalid_argument("sharing_rate: need at least 2 histograms");
  const auto features = hists.front().size();
  if (features == 0) throw std::invalid_argument("sharing_rate: empty histograms");
  for (const auto& h : hists) {
    if (h.size() != features) throw std::invalid_argument("sharing_rate: histogram lengths differ");
  }
  Histograms normalized;
  for (const auto& h : hists) {
    const double mass = std::accumulate(h.begin(), h.end(), 0.0);
    std::vector<double> n(features);
    for (std::size_t c = 0; c < features; ++c) {
      n[c] = mass > 0.0 ? h[c] / mass : 1.0 / static_cast<double>(features);
    }
    normalized.push_back(std::move(n));
  }
  SharingRate out;
  out.per_feature_ratio.resize(features);
  double total = 0.0;
  for (std::size_t c = 0; c < features; ++c) {
    double lo = normalized.front()[c];
    double hi = lo;
    for (const auto& n : normalized) {
      lo = std::min(lo, n[c]);
      hi = std::max(hi, n[c]);
    }
    const double ratio = hi <= kNoiseFloor ? 1.0 : lo / hi;
    out.per_feature_ratio[c] = ratio;
    total += ratio;
  }
  out.rate = 100.0 * total / static_cast<double>(features);
  return out;
}

std::vector<double> channel_variance_importance(const Tensor& maps) {
  if (maps.rank() != 4) {
    throw ShapeError("channel_variance_importance: maps must be N x C x H x W, got " +
                     shape_str(maps.shape()));
  }
  const auto n = maps.dim(0);
  const auto channels = maps.dim(1);
  const auto spatial = maps.dim(2) * maps.dim(3);
  std::vector<double> out(static_cast<std::size_t>(channels), 0.0);
  const auto v = maps.data();
  for (std::int64_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::int64_t s = 0; s < spatial; ++s) {
      // Welford: exact zero for constant sequences.
      double mean = 0.0;
      double m2 = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double x = v[(i * channels + c) * spatial + s];
        const double delta = x - mean;
        mean += delta / static_cast<double>(i + 1);
        m2 += delta * (x - mean);
      }
      const double var = m2;
      acc += var / static_cast<double>(n);
    }
    out[c] = acc / static_cast<double>(spatial);
  }
  return out;
}

Histograms variance_importance(MimoModel& model, const Dataset& testset,
                               std::span<const double> fixed_input, int block_index,
                               const MaskPair& mask, std::int64_t batch_size) {
  const auto group_count = static_cast<int>(model.groups.size());
  if (block_index < 1 || block_index > group_count) {
    throw std::out_of_range("variance_importance: block index " + std::to_string(block_index) +
                            " outside [1, " + std::to_string(group_count) + "]");
  }
  if (testset.size() == 0) throw std::invalid_argument("variance_importance: empty test set");
  if (static_cast<std::int64_t>(fixed_input.size()) != kImageSize) {
    throw ShapeError("variance_importance: fixed input must have " + std::to_string(kImageSize) +
                     " values");
  }
  const int m = model.config().m;
  Histograms out;
  for (int varied = 0; varied < m; ++varied) {
    // Collect the group output for every test example, then reduce.
    std::vector<double> stacked;
    Shape block_shape;
    for (std::int64_t start = 0; start < testset.size(); start += batch_size) {
      const auto count = std::min(batch_size, testset.size() - start);
      std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
      std::iota(idx.begin(), idx.end(), start);
      const Tensor varying = testset.batch(idx);
      Tensor fixed(varying.shape());
      for (std::int64_t i = 0; i < count; ++i) {
        std::copy(fixed_input.begin(), fixed_input.end(), fixed.data().begin() + i * kImageSize);
      }
      std::vector<Tensor> inputs(static_cast<std::size_t>(m), fixed);
      inputs[static_cast<std::size_t>(varied)] = varying;
      const std::vector<MaskPair> masks(static_cast<std::size_t>(count), mask);
      const auto fwd = forward_train(model, inputs, masks, 0.0, /*training=*/false);
      const Tensor& block = fwd.group_outputs[static_cast<std::size_t>(block_index - 1)];
      block_shape = block.shape();
      stacked.insert(stacked.end(), block.data().begin(), block.data().end());
    }
    block_shape[0] = testset.size();
    out.push_back(channel_variance_importance(Tensor(block_shape, std::move(stacked))));
  }
  return out;
}

SharingReport build_report(MimoModel& model) {
  SharingReport r;
  r.encoder_hist = encoder_l1_histograms(model);
  r.classifier_hist = classifier_l1_histograms(model);
  const auto enc = sharing_rate(r.encoder_hist);
  const auto cls = sharing_rate(r.classifier_hist);
  r.encoder_per_feature_ratio = enc.per_feature_ratio;
  r.per_feature_ratio = cls.per_feature_ratio;
  r.share_rate_encoder = enc.rate;
  r.share_rate_classifier = cls.rate;
  return r;
}

nlohmann::json report_to_json(const SharingReport& report) {
  nlohmann::json doc;
  doc["schema_version"] = kReportSchemaVersion;
  doc["timestamp"] = utc_timestamp();
  doc["encoder_hist"] = report.encoder_hist;
  doc["classifier_hist"] = report.classifier_hist;
  doc["per_feature_ratio"] = report.per_feature_ratio;
  doc["encoder_per_feature_ratio"] = report.encoder_per_feature_ratio;
  doc["share_rate_encoder"] = report.share_rate_encoder;
  doc["share_rate_classifier"] = report.share_rate_classifier;
  if (report.variance_importance) {
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& [block, hists] : *report.variance_importance) {
      blocks.push_back({{"block", block}, {"importance", hists}});
    }
    doc["variance_importance"] = blocks;
  }
  doc["config"] = report.config;
  return doc;
}

SharingReport report_from_json(const nlohmann::json& doc) {
  if (doc.value("schema_version", -1) != kReportSchemaVersion) {
    throw std::runtime_error("unsupported sharing report schema version");
  }
  SharingReport r;
  r.encoder_hist = doc.at("encoder_hist").get<Histograms>();
  r.classifier_hist = doc.at("classifier_hist").get<Histograms>();
  r.per_feature_ratio = doc.at("per_feature_ratio").get<std::vector<double>>();
  r.encoder_per_feature_ratio = doc.at("encoder_per_feature_ratio").get<std::vector<double>>();
  r.share_rate_encoder = doc.at("share_rate_encoder").get<double>();
  r.share_rate_classifier = doc.at("share_rate_classifier").get<double>();
  if (doc.contains("variance_importance")) {
    std::vector<std::pair<int, Histograms>> blocks;
    for (const auto& b : doc.at("variance_importance")) {
      blocks.emplace_back(b.at("block").get<int>(), b.at("importance").get<Histograms>());
    }
    r.variance_importance = std::move(blocks);
  }
  if (doc.contains("config")) r.config = doc.at("config");
  return r;
}

void write_report(const SharingReport& report, const std::filesystem::path& path) {
  {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << report_to_json(report).dump(2) << '\n';
    if (!f) throw std::runtime_error("failed writing " + path.string());
  }
  const auto dir = path.parent_path();
  const auto stem = path.stem().string();
  write_hist_csv(dir / (stem + "_classifier.csv"), report.classifier_hist, report.per_feature_ratio);
  write_hist_csv(dir / (stem + "_encoder.csv"), report.encoder_hist, report.encoder_per_feature_ratio);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("pearson: size mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace mixshare
