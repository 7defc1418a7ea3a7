#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

namespace mixshare {

enum class DatasetKind { cifar10, cifar100, synthetic };

std::string dataset_kind_name(DatasetKind kind);
DatasetKind parse_dataset_kind(const std::string& name);

inline constexpr std::int64_t kImageSide = 32;
inline constexpr std::int64_t kImageChannels = 3;
inline constexpr std::int64_t kImageSize = kImageChannels * kImageSide * kImageSide;

/// Per-channel normalization applied to pixels in [0, 1].
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  static Normalization cifar10();
  static Normalization cifar100();
  static Normalization synthetic();
  static Normalization for_kind(DatasetKind kind);
};

/// Images stored normalized, N x 3 x 32 x 32 row-major.
struct Dataset {
  std::vector<double> images;
  std::vector<int> labels;
  int class_count = 0;
  Normalization norm;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::span<const double> image(std::int64_t i) const {
    return {images.data() + i * kImageSize, static_cast<std::size_t>(kImageSize)};
  }
  /// Stacks the listed examples into an N x 3 x 32 x 32 tensor.
  Tensor batch(std::span<const std::int64_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::int64_t> indices) const;

  /// Splits off the trailing `fraction` of a seeded permutation as validation.
  std::pair<Dataset, Dataset> split(double val_fraction, Rng& rng) const;
  Dataset subset(std::span<const std::int64_t> indices) const;
};

/// Reads a CIFAR binary file. CIFAR-100 records are <coarse><fine><3072 px>,
/// CIFAR-10 records are <label><3072 px>; the fine label is used.
Dataset load_cifar(const std::filesystem::path& path, DatasetKind kind);
Dataset load_cifar(const std::filesystem::path& path, DatasetKind kind, const Normalization& norm,
                   int class_count);

/// Writes a dataset in CIFAR-10 record layout (pixels de-normalized and
/// rounded to bytes). Labels must fit in one byte.
void write_cifar10(const std::filesystem::path& path, const Dataset& data);

struct SyntheticSpec {
  int class_count = 4;
  int per_class = 100;
  double noise = 0.3;       // pixel noise std in [0, 1] pixel units
  double contrast = 0.25;   // grating amplitude around mid-grey
  double frequency = 4.0;   // cycles per image
  double contrast_jitter = 0.0;  // per-example contrast factor ~ U[1 - j, 1 + j]
  bool random_phase = false;     // per-example grating phase ~ U[0, 2 pi)
};

/// Oriented gratings, one angle per class (k * pi / class_count), plus
/// Gaussian pixel noise, quantized to 8-bit levels. Optional per-example
/// contrast jitter and random phase. Examples are interleaved
/// by class.
Dataset gen_synthetic(const SyntheticSpec& spec, Rng& rng);

/// Random 4-pixel-padded crop and horizontal flip of one normalized image.
void augment_crop_flip(std::span<double> image, Rng& rng);

}  // namespace mixshare
