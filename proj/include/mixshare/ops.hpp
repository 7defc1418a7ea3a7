#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mixshare/tensor.hpp"

namespace mixshare {

// Differentiable ops. Each records an adjoint on the active tape when any
// input requires grad; otherwise it is a plain forward computation.

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
Tensor relu(const Tensor& x);

/// 2-D convolution without bias. x: N x C x H x W, weight: O x C x k x k.
/// Square kernels, zero padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, std::int64_t stride, std::int64_t pad);

/// Learnable affine parameters plus running statistics of a batchnorm layer.
struct BatchNorm2d {
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;

  explicit BatchNorm2d(std::int64_t channels = 0);
  std::int64_t channels() const { return weight.defined() ? weight.numel() : 0; }
};

/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode uses the running estimates only.
Tensor batchnorm2d(const Tensor& x, BatchNorm2d& bn, bool training);

/// N x C x H x W -> N x C.
Tensor global_avg_pool(const Tensor& x);

/// x: N x F, weight: K x F, bias: K -> N x K.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Multiplies the first `masked_channels` channels of each example by that
/// example's spatial map. x: N x C x H x W, maps: N x H x W (treated as a constant).
Tensor spatial_mask(const Tensor& x, const Tensor& maps, std::int64_t masked_channels);

/// Elementwise mean of equally-shaped tensors.
Tensor mean_of(std::span<const Tensor> xs);

/// Mean over the batch of weights[n] * -log softmax(logits[n])[labels[n]].
/// Empty weights means all ones.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> weights = {});

inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return cross_entropy(logits, labels);
}

/// Row-wise softmax; not differentiable (evaluation only).
Tensor softmax_rows(const Tensor& logits);

}  // namespace mixshare
