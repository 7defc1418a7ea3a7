#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

namespace testutil {

inline mixshare::Tensor random_tensor(mixshare::Shape shape, std::uint64_t seed, double scale = 1.0,
                                      bool grad = false) {
  mixshare::Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(mixshare::shape_numel(shape)));
  for (auto& x : v) x = scale * rng.normal();
  mixshare::Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(grad);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mixshare_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
