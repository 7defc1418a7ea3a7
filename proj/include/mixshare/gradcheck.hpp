#pragma once

#include <functional>
#include <span>

#include "mixshare/rng.hpp"
#include "mixshare/tensor.hpp"

namespace mixshare {

/// Compares reverse-mode gradients against central differences.
///
/// Samples `sample_count` scalar entries (parameter tensor uniformly, then
/// entry uniformly) and returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// `loss_fn` must be deterministic and must not mutate the parameters.
double finite_diff_check(std::span<Tensor> params, const std::function<Tensor()>& loss_fn,
                         double epsilon, int sample_count, Rng& rng);

}  // namespace mixshare
