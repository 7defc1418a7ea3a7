#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

namespace mixshare {

/// Binary CutMix mask for one pair of inputs.
///
/// Input 0 owns `mask` (ones outside the cut rectangle); input 1 owns the
/// complement. `kappa` is the realized mean of `mask`.
struct MaskPair {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<double> mask;
  double kappa = 1.0;

  static MaskPair ones(std::int64_t height, std::int64_t width);
  std::vector<double> complement() const;
};

/// How final feature maps are filtered before each classifier.
struct UnmixMode {
  enum class Kind { none, full, partial, fadeout };

  Kind kind = Kind::none;
  double partial_fraction = 1.0;  // used by partial
  int fadeout_end_epoch = 1;      // used by fadeout

  static UnmixMode none() { return {}; }
  static UnmixMode full() { return {Kind::full, 1.0, 1}; }
  static UnmixMode partial(double fraction) { return {Kind::partial, fraction, 1}; }
  static UnmixMode fadeout(int end_epoch) { return {Kind::fadeout, 1.0, end_epoch}; }

  /// Empty when valid, otherwise one message per violated constraint.
  std::vector<std::string> violations() const;
  /// Number of leading channels that get unmixed out of `channels`.
  std::int64_t unmixed_channels(std::int64_t channels) const;
  std::string name() const;
  static Kind parse_kind(const std::string& name);
};

/// lambda ~ Beta(alpha, alpha), strictly inside (0, 1).
double sample_mixing_ratio(Rng& rng, double alpha);

/// Zero rectangle of target area (1 - lambda) * h * w centred uniformly at
/// random and clipped to the image.
MaskPair sample_cutmix_mask(std::int64_t h, std::int64_t w, double lambda, Rng& rng);

/// Box-average pooling of an h x w map down to target_h x target_w.
std::vector<double> downsample_mask(std::span<const double> mask, std::int64_t h, std::int64_t w,
                                    std::int64_t target_h, std::int64_t target_w);

/// r = min(1, epoch / end_epoch).
double fadeout_coefficient(int epoch, int end_epoch);

/// (M + r (1 - M), (1 - M) + r M) for input 0 and input 1.
std::pair<std::vector<double>, std::vector<double>> effective_masks(const MaskPair& masks, double r);

/// Stacks per-example maps into an N x H x W tensor, box-downsampling each
/// map from its own resolution when it differs from (h, w).
Tensor stack_maps(const std::vector<std::vector<double>>& maps, std::int64_t src_h,
                  std::int64_t src_w, std::int64_t h, std::int64_t w);

/// Aggregates M encoded inputs.
///
/// Training: mask * encoded[0] + complement * encoded[1] per example (M == 2
/// only). Inference: elementwise mean of all encodings.
Tensor mix(std::span<const Tensor> encoded, const std::vector<MaskPair>& masks, bool training);

/// Splits final feature maps into one view per input.
///
/// `effective` holds N x H x W maps for input 0 and input 1. With mode none
/// both outputs alias `features`.
std::vector<Tensor> unmix(const Tensor& features, std::span<const Tensor> effective,
                          const UnmixMode& mode);

}  // namespace mixshare
