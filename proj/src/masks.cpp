#include "mixshare/masks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mixshare/ops.hpp"

namespace mixshare {

MaskPair MaskPair::ones(std::int64_t height, std::int64_t width) {
  MaskPair m;
  m.height = height;
  m.width = width;
  m.mask.assign(static_cast<std::size_t>(height * width), 1.0);
  m.kappa = 1.0;
  return m;
}

std::vector<double> MaskPair::complement() const {
  std::vector<double> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = 1.0 - mask[i];
  return out;
}

std::vector<std::string> UnmixMode::violations() const {
  std::vector<std::string> out;
  if (kind == Kind::partial && !(partial_fraction > 0.0 && partial_fraction <= 1.0)) {
    out.push_back("unmix partial fraction must lie in (0, 1], got " +
                  std::to_string(partial_fraction));
  }
  if (kind == Kind::fadeout && fadeout_end_epoch < 1) {
    out.push_back("unmix fadeout end epoch must be >= 1, got " + std::to_string(fadeout_end_epoch));
  }
  return out;
}

std::int64_t UnmixMode::unmixed_channels(std::int64_t channels) const {
  switch (kind) {
    case Kind::none:
      return 0;
    case Kind::partial:
      return std::min<std::int64_t>(
          channels, static_cast<std::int64_t>(std::ceil(partial_fraction * static_cast<double>(channels) - 1e-9)));
    case Kind::full:
    case Kind::fadeout:
      return channels;
  }
  return 0;
}

std::string UnmixMode::name() const {
  switch (kind) {
    case Kind::none: return "none";
    case Kind::full: return "full";
    case Kind::partial: return "partial";
    case Kind::fadeout: return "fadeout";
  }
  return "none";
}

UnmixMode::Kind UnmixMode::parse_kind(const std::string& name) {
  if (name == "none") return Kind::none;
  if (name == "full") return Kind::full;
  if (name == "partial") return Kind::partial;
  if (name == "fadeout") return Kind::fadeout;
  throw std::invalid_argument("unknown unmix mode '" + name + "' (expected none|full|partial|fadeout)");
}

double sample_mixing_ratio(Rng& rng, double alpha) {
  if (!(alpha > 0.0)) {
    throw std::invalid_argument("sample_mixing_ratio: alpha must be positive, got " +
                                std::to_string(alpha));
  }
  return rng.beta(alpha, alpha);
}

MaskPair sample_cutmix_mask(std::int64_t h, std::int64_t w, double lambda, Rng& rng) {
  if (h < 1 || w < 1) throw std::invalid_argument("sample_cutmix_mask: empty mask size");
  MaskPair m = MaskPair::ones(h, w);
  const double cut_ratio = std::sqrt(std::clamp(1.0 - lambda, 0.0, 1.0));
  const auto cut_h = static_cast<std::int64_t>(std::lround(static_cast<double>(h) * cut_ratio));
  const auto cut_w = static_cast<std::int64_t>(std::lround(static_cast<double>(w) * cut_ratio));
  const auto cy = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h)));
  const auto cx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w)));
  const auto y0 = std::clamp<std::int64_t>(cy - cut_h / 2, 0, h);
  const auto y1 = std::clamp<std::int64_t>(cy - cut_h / 2 + cut_h, 0, h);
  const auto x0 = std::clamp<std::int64_t>(cx - cut_w / 2, 0, w);
  const auto x1 = std::clamp<std::int64_t>(cx - cut_w / 2 + cut_w, 0, w);
  for (auto y = y0; y < y1; ++y) {
    for (auto x = x0; x < x1; ++x) m.mask[static_cast<std::size_t>(y * w + x)] = 0.0;
  }
  const auto zeros = (y1 - y0) * (x1 - x0);
  m.kappa = static_cast<double>(h * w - zeros) / static_cast<double>(h * w);
  return m;
}

std::vector<double> downsample_mask(std::span<const double> mask, std::int64_t h, std::int64_t w,
                                    std::int64_t target_h, std::int64_t target_w) {
  if (static_cast<std::int64_t>(mask.size()) != h * w) {
    throw std::invalid_argument("downsample_mask: mask has " + std::to_string(mask.size()) +
                                " cells, expected " + std::to_string(h * w));
  }
  if (target_h < 1 || target_w < 1 || h % target_h != 0 || w % target_w != 0) {
    throw std::invalid_argument("downsample_mask: " + std::to_string(h) + "x" + std::to_string(w) +
                                " is not an integer multiple of " + std::to_string(target_h) +
                                "x" + std::to_string(target_w));
  }
  const auto bh = h / target_h;
  const auto bw = w / target_w;
  if (bh == 1 && bw == 1) return {mask.begin(), mask.end()};
  std::vector<double> out(static_cast<std::size_t>(target_h * target_w));
  const double inv = 1.0 / static_cast<double>(bh * bw);
  for (std::int64_t ty = 0; ty < target_h; ++ty) {
    for (std::int64_t tx = 0; tx < target_w; ++tx) {
      double acc = 0.0;
      for (std::int64_t y = ty * bh; y < (ty + 1) * bh; ++y) {
        for (std::int64_t x = tx * bw; x < (tx + 1) * bw; ++x) acc += mask[y * w + x];
      }
      out[ty * target_w + tx] = acc * inv;
    }
  }
  return out;
}

double fadeout_coefficient(int epoch, int end_epoch) {
  if (epoch < 0 || end_epoch < 1) {
    throw std::invalid_argument("fadeout_coefficient: need epoch >= 0 and end_epoch >= 1");
  }
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(end_epoch));
}

std::pair<std::vector<double>, std::vector<double>> effective_masks(const MaskPair& masks,
                                                                    double r) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw std::invalid_argument("effective_masks: r must lie in [0, 1], got " + std::to_string(r));
  }
  std::vector<double> first(masks.mask.size());
  std::vector<double> second(masks.mask.size());
  for (std::size_t i = 0; i < masks.mask.size(); ++i) {
    const double m = masks.mask[i];
    first[i] = m + r * (1.0 - m);
    second[i] = (1.0 - m) + r * m;
  }
  return {std::move(first), std::move(second)};
}

Tensor stack_maps(const std::vector<std::vector<double>>& maps, std::int64_t src_h,
                  std::int64_t src_w, std::int64_t h, std::int64_t w) {
  const auto batch = static_cast<std::int64_t>(maps.size());
  Tensor out(Shape{batch, h, w});
  auto dst = out.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const auto small = downsample_mask(maps[n], src_h, src_w, h, w);
    std::copy(small.begin(), small.end(), dst.begin() + n * h * w);
  }
  return out;
}

Tensor mix(std::span<const Tensor> encoded, const std::vector<MaskPair>& masks, bool training) {
  if (encoded.empty()) throw std::invalid_argument("mix: no encoded inputs");
  for (const auto& e : encoded) {
    if (e.shape() != encoded.front().shape()) {
      throw ShapeError("mix: encoded inputs differ in shape: " + shape_str(encoded.front().shape()) +
                       " vs " + shape_str(e.shape()));
    }
  }
  if (!training) return mean_of(encoded);
  if (encoded.size() != 2) {
    throw std::invalid_argument("mix: masked mixing supports exactly 2 inputs, got " +
                                std::to_string(encoded.size()));
  }
  const auto& ref = encoded.front();
  if (ref.rank() != 4) throw ShapeError("mix: encodings must be N x C x H x W, got " + shape_str(ref.shape()));
  const auto batch = ref.dim(0);
  const auto h = ref.dim(2);
  const auto w = ref.dim(3);
  if (static_cast<std::int64_t>(masks.size()) != batch) {
    throw ShapeError("mix: " + std::to_string(masks.size()) + " masks for batch of " +
                     std::to_string(batch));
  }
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  first.reserve(masks.size());
  second.reserve(masks.size());
  for (const auto& m : masks) {
    if (m.height != h || m.width != w) {
      throw ShapeError("mix: mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                       " but features are " + std::to_string(h) + "x" + std::to_string(w));
    }
    first.push_back(m.mask);
    second.push_back(m.complement());
  }
  const auto channels = ref.dim(1);
  const Tensor a = spatial_mask(encoded[0], stack_maps(first, h, w, h, w), channels);
  const Tensor b = spatial_mask(encoded[1], stack_maps(second, h, w, h, w), channels);
  return add(a, b);
}

std::vector<Tensor> unmix(const Tensor& features, std::span<const Tensor> effective,
                          const UnmixMode& mode) {
  if (mode.kind == UnmixMode::Kind::none) return {features, features};
  if (effective.size() != 2) {
    throw std::invalid_argument("unmix: needs one effective map per input (2), got " +
                                std::to_string(effective.size()));
  }
  if (features.rank() != 4) {
    throw ShapeError("unmix: features must be N x C x H x W, got " + shape_str(features.shape()));
  }
  const auto masked = mode.unmixed_channels(features.dim(1));
  std::vector<Tensor> out;
  for (const auto& maps : effective) {
    if (maps.rank() != 3 || maps.dim(0) != features.dim(0) || maps.dim(1) != features.dim(2) ||
        maps.dim(2) != features.dim(3)) {
      throw ShapeError("unmix: maps " + shape_str(maps.shape()) + " do not match features " +
                       shape_str(features.shape()));
    }
    out.push_back(spatial_mask(features, maps, masked));
  }
  return out;
}

}  // namespace mixshare
