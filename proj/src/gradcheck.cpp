#include "mixshare/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace mixshare {

double finite_diff_check(std::span<Tensor> params, const std::function<Tensor()>& loss_fn,
                         double epsilon, int sample_count, Rng& rng) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  if (sample_count <= 0) return 0.0;

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].numel() > 0) candidates.push_back(i);
  }
  if (candidates.empty()) return 0.0;

  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = loss_fn();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  for (int s = 0; s < sample_count; ++s) {
    const auto which = candidates[rng.below(candidates.size())];
    auto& p = params[which];
    const auto index = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(p.numel())));
    const double original = p.data()[index];
    p.data()[index] = original + epsilon;
    const double plus = loss_fn().item();
    p.data()[index] = original - epsilon;
    const double minus = loss_fn().item();
    p.data()[index] = original;

    const double numeric = (plus - minus) / (2.0 * epsilon);
    const double exact = analytic[which][index];
    const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(exact - numeric) / denom);
  }
  return worst;
}

}  // namespace mixshare
