#include "mixshare/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mixshare {

std::string dataset_kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar100: return "cifar100";
    case DatasetKind::synthetic: return "synthetic";
  }
  return "synthetic";
}

DatasetKind parse_dataset_kind(const std::string& name) {
  if (name == "cifar10") return DatasetKind::cifar10;
  if (name == "cifar100") return DatasetKind::cifar100;
  if (name == "synthetic") return DatasetKind::synthetic;
  throw std::invalid_argument("unknown dataset kind '" + name + "' (expected cifar10|cifar100|synthetic)");
}

Normalization Normalization::cifar10() {
  return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
}

Normalization Normalization::cifar100() {
  return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}};
}

Normalization Normalization::synthetic() { return {{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}}; }

Normalization Normalization::for_kind(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::cifar10: return cifar10();
    case DatasetKind::cifar100: return cifar100();
    case DatasetKind::synthetic: return synthetic();
  }
  return synthetic();
}

Tensor Dataset::batch(std::span<const std::int64_t> indices) const {
  const auto n = static_cast<std::int64_t>(indices.size());
  Tensor out(Shape{n, kImageChannels, kImageSide, kImageSide});
  auto dst = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto src = image(indices[i]);
    std::copy(src.begin(), src.end(), dst.begin() + i * kImageSize);
  }
  return out;
}

std::vector<int> Dataset::batch_labels(std::span<const std::int64_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

Dataset Dataset::subset(std::span<const std::int64_t> indices) const {
  Dataset out;
  out.class_count = class_count;
  out.norm = norm;
  out.images.reserve(indices.size() * kImageSize);
  for (auto i : indices) {
    const auto src = image(i);
    out.images.insert(out.images.end(), src.begin(), src.end());
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split(double val_fraction, Rng& rng) const {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("split: validation fraction must lie in (0, 1)");
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(size()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
  rng.shuffle(std::span<std::int64_t>(order));
  const auto val_count = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(order.size())));
  const auto cut = order.size() - val_count;
  std::span<const std::int64_t> all(order);
  return {subset(all.subspan(0, cut)), subset(all.subspan(cut))};
}

Dataset load_cifar(const std::filesystem::path& path, DatasetKind kind) {
  if (kind == DatasetKind::synthetic) {
    throw std::invalid_argument("load_cifar: synthetic datasets are generated, not loaded");
  }
  return load_cifar(path, kind, Normalization::for_kind(kind), kind == DatasetKind::cifar100 ? 100 : 10);
}

Dataset load_cifar(const std::filesystem::path& path, DatasetKind kind, const Normalization& norm,
                   int class_count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset file " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();

  const std::size_t label_bytes = kind == DatasetKind::cifar100 ? 2 : 1;
  const std::size_t record = label_bytes + static_cast<std::size_t>(kImageSize);
  if (bytes.size() % record != 0) {
    const auto complete = bytes.size() / record;
    throw std::runtime_error(path.string() + ": truncated record at byte offset " +
                             std::to_string(complete * record) + " (file size " +
                             std::to_string(bytes.size()) + " is not a multiple of " +
                             std::to_string(record) + ")");
  }
  Dataset out;
  out.class_count = class_count;
  out.norm = norm;
  const auto count = bytes.size() / record;
  if (count == 0) std::cerr << "warning: " << path.string() << " contains no records\n";
  out.images.resize(count * static_cast<std::size_t>(kImageSize));
  out.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t off = r * record;
    const int label = static_cast<unsigned char>(bytes[off + label_bytes - 1]);
    if (label >= class_count) {
      throw std::runtime_error(path.string() + ": label " + std::to_string(label) +
                               " at byte offset " + std::to_string(off + label_bytes - 1) +
                               " is not below class count " + std::to_string(class_count));
    }
    out.labels[r] = label;
    for (std::int64_t p = 0; p < kImageSize; ++p) {
      const auto c = static_cast<std::size_t>(p / (kImageSide * kImageSide));
      const double pixel = static_cast<unsigned char>(bytes[off + label_bytes + p]) / 255.0;
      out.images[r * kImageSize + p] = (pixel - norm.mean[c]) / norm.std[c];
    }
  }
  return out;
}

void write_cifar10(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  std::string record(static_cast<std::size_t>(1 + kImageSize), '\0');
  for (std::int64_t i = 0; i < data.size(); ++i) {
    const int label = data.labels[static_cast<std::size_t>(i)];
    if (label < 0 || label > 255) throw std::runtime_error("write_cifar10: label does not fit in a byte");
    record[0] = static_cast<char>(label);
    const auto img = data.image(i);
    for (std::int64_t p = 0; p < kImageSize; ++p) {
      const auto c = static_cast<std::size_t>(p / (kImageSide * kImageSide));
      const double pixel = img[p] * data.norm.std[c] + data.norm.mean[c];
      const auto level = std::clamp(std::lround(pixel * 255.0), 0L, 255L);
      record[static_cast<std::size_t>(1 + p)] = static_cast<char>(level);
    }
    f.write(record.data(), static_cast<std::streamsize>(record.size()));
  }
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Dataset gen_synthetic(const SyntheticSpec& spec, Rng& rng) {
  if (spec.class_count < 2) throw std::invalid_argument("gen_synthetic: class_count must be >= 2");
  if (spec.per_class < 0) throw std::invalid_argument("gen_synthetic: per_class must be >= 0");
  if (spec.contrast_jitter < 0.0 || spec.contrast_jitter >= 1.0) {
    throw std::invalid_argument("gen_synthetic: contrast_jitter must lie in [0, 1)");
  }
  Dataset out;
  out.class_count = spec.class_count;
  out.norm = Normalization::synthetic();
  const auto total = static_cast<std::size_t>(spec.class_count) * static_cast<std::size_t>(spec.per_class);
  out.images.resize(total * static_cast<std::size_t>(kImageSize));
  out.labels.resize(total);

  std::vector<double> pattern(static_cast<std::size_t>(kImageSide * kImageSide));
  std::size_t index = 0;
  for (int i = 0; i < spec.per_class; ++i) {
    for (int k = 0; k < spec.class_count; ++k, ++index) {
      const double angle = std::numbers::pi * k / spec.class_count;
      const double fx = std::cos(angle) * spec.frequency / kImageSide;
      const double fy = std::sin(angle) * spec.frequency / kImageSide;
      double amplitude = spec.contrast;
      if (spec.contrast_jitter > 0.0) amplitude *= 1.0 + spec.contrast_jitter * (2.0 * rng.uniform() - 1.0);
      const double phase = spec.random_phase ? 2.0 * std::numbers::pi * rng.uniform() : 0.0;
      for (std::int64_t y = 0; y < kImageSide; ++y) {
        for (std::int64_t x = 0; x < kImageSide; ++x) {
          pattern[y * kImageSide + x] =
              0.5 + amplitude * std::cos(2.0 * std::numbers::pi * (fx * x + fy * y) + phase);
        }
      }
      out.labels[index] = k;
      double* img = out.images.data() + index * kImageSize;
      for (std::int64_t c = 0; c < kImageChannels; ++c) {
        for (std::int64_t p = 0; p < kImageSide * kImageSide; ++p) {
          double pixel = pattern[p];
          if (spec.noise > 0.0) pixel += rng.normal(0.0, spec.noise);
          pixel = std::clamp(std::round(pixel * 255.0), 0.0, 255.0) / 255.0;
          img[c * kImageSide * kImageSide + p] =
              (pixel - out.norm.mean[static_cast<std::size_t>(c)]) / out.norm.std[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  return out;
}

void augment_crop_flip(std::span<double> image, Rng& rng) {
  constexpr std::int64_t pad = 4;
  const auto dy = static_cast<std::int64_t>(rng.below(2 * pad + 1)) - pad;
  const auto dx = static_cast<std::int64_t>(rng.below(2 * pad + 1)) - pad;
  const bool flip = rng.below(2) == 1;
  std::vector<double> src(image.begin(), image.end());
  for (std::int64_t c = 0; c < kImageChannels; ++c) {
    const double* plane = src.data() + c * kImageSide * kImageSide;
    double* dst = image.data() + c * kImageSide * kImageSide;
    for (std::int64_t y = 0; y < kImageSide; ++y) {
      for (std::int64_t x = 0; x < kImageSide; ++x) {
        const auto sy = y + dy;
        const auto sx0 = x + dx;
        const auto sx = flip ? kImageSide - 1 - sx0 : sx0;
        const bool inside = sy >= 0 && sy < kImageSide && sx0 >= 0 && sx0 < kImageSide;
        // Zero padding in normalized space is the channel mean.
        dst[y * kImageSide + x] = inside ? plane[sy * kImageSide + sx] : 0.0;
      }
    }
  }
}

}  // namespace mixshare
