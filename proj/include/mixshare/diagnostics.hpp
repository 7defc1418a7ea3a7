#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixshare/data.hpp"
#include "mixshare/model.hpp"
#include "mixshare/tensor.hpp"

namespace mixshare {

using Histograms = std::vector<std::vector<double>>;  // M x C

/// h[i][c] = sum of |w| over encoder i's kernel slab for output channel c.
Histograms encoder_l1_histograms(MimoModel& model);
/// h[i][c] = sum over classes of |W_i[class, c]|.
Histograms classifier_l1_histograms(MimoModel& model);

struct SharingRate {
  std::vector<double> per_feature_ratio;
  double rate = 0.0;  // percent
};

/// Normalizes each histogram to unit mass (all-zero -> uniform), then takes
/// min / max across subnetworks per feature (0/0 -> 1) and averages x100.
SharingRate sharing_rate(const Histograms& hists);

/// Mean over H x W of the per-channel variance across the test set of
/// the output of residual group `block_index` (1-based). Row i varies input i
/// over `testset` while every other input is held at `fixed_input`.
Histograms variance_importance(MimoModel& model, const Dataset& testset,
                               std::span<const double> fixed_input, int block_index,
                               const MaskPair& mask, std::int64_t batch_size = 100);

/// Mean over H x W of the per-channel variance across N of an N x C x H x W
/// stack of feature maps.
std::vector<double> channel_variance_importance(const Tensor& maps);

inline constexpr int kReportSchemaVersion = 1;

struct SharingReport {
  Histograms encoder_hist;
  Histograms classifier_hist;
  std::vector<double> per_feature_ratio;  // classifier features
  std::vector<double> encoder_per_feature_ratio;
  double share_rate_encoder = 0.0;
  double share_rate_classifier = 0.0;
  /// block index -> M x C_block, omitted when the sweep was not run.
  std::optional<std::vector<std::pair<int, Histograms>>> variance_importance;
  nlohmann::json config;  // echoed experiment config, may be null
};

SharingReport build_report(MimoModel& model);

nlohmann::json report_to_json(const SharingReport& report);
SharingReport report_from_json(const nlohmann::json& doc);

/// Writes `<path>` (JSON) plus `<stem>_classifier.csv` and `<stem>_encoder.csv`
/// next to it with header `feature_index,h_0,h_1,ratio`.
void write_report(const SharingReport& report, const std::filesystem::path& path);

/// Pearson correlation; 0 when either side has zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace mixshare
