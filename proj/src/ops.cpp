#include "mixshare/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "mixshare/kernels.hpp"

namespace mixshare {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

// Gradient of a tracked output, or empty span if nothing flowed into it.
std::span<const double> out_grad(const Tensor& out) {
  auto& node = *out.handle();
  return node.grad;
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool tracked = should_record({&a, &b});
  Tensor out = make_output(a.shape(), tracked);
  auto y = out.data();
  const auto xa = a.data();
  const auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
  if (tracked) {
    active_tape()->record([a, b, out]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      for (const Tensor* t : {&a, &b}) {
        if (!wants_grad(*t)) continue;
        auto g = t->grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool tracked = should_record({&a, &b});
  Tensor out = make_output(a.shape(), tracked);
  auto y = out.data();
  const auto xa = a.data();
  const auto xb = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] * xb[i];
  if (tracked) {
    active_tape()->record([a, b, out]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      if (wants_grad(a)) {
        auto g = a.grad_storage();
        const auto other = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
      }
      if (wants_grad(b)) {
        auto g = b.grad_storage();
        const auto other = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * other[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  const bool tracked = should_record({&x});
  Tensor out = make_output(x.shape(), tracked);
  auto y = out.data();
  const auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = factor * in[i];
  if (tracked) {
    active_tape()->record([x, out, factor]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      auto g = x.grad_storage();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * dy[i];
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool tracked = should_record({&x});
  Tensor out = make_output(Shape{}, tracked);
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (tracked) {
    active_tape()->record([x, out]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      for (auto& g : x.grad_storage()) g += dy[0];
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  const bool tracked = should_record({&x});
  Tensor out = make_output(x.shape(), tracked);
  auto y = out.data();
  const auto in = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] > 0.0 ? in[i] : 0.0;
  if (tracked) {
    active_tape()->record([x, out]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      auto g = x.grad_storage();
      const auto in = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += in[i] > 0.0 ? dy[i] : 0.0;
    });
  }
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& weight, std::int64_t stride, std::int64_t pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const auto k = weight.dim(2);
  if (weight.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, input " + shape_str(x.shape()) + " has " +
                     std::to_string(x.dim(1)));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.in_h = x.dim(2);
  g.in_w = x.dim(3);
  g.out_channels = weight.dim(0);
  g.kernel = k;
  g.stride = stride;
  g.pad = pad;
  if (g.in_h + 2 * pad < k || g.in_w + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  const bool tracked = should_record({&x, &weight});
  Tensor out = make_output(Shape{g.batch, g.out_channels, g.out_h(), g.out_w()}, tracked);
  kernels::conv2d_forward(g, x.data(), weight.data(), out.data());
  if (tracked) {
    active_tape()->record([x, weight, out, g]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      if (wants_grad(weight)) kernels::conv2d_backward_weight(g, x.data(), dy, weight.grad_storage());
      if (wants_grad(x)) kernels::conv2d_backward_input(g, weight.data(), dy, x.grad_storage());
    });
  }
  return out;
}

BatchNorm2d::BatchNorm2d(std::int64_t channels) {
  if (channels <= 0) return;
  weight = Tensor::ones({channels});
  bias = Tensor::zeros({channels});
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::ones({channels});
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

Tensor batchnorm2d(const Tensor& x, BatchNorm2d& bn, bool training) {
  require_rank(x, 4, "batchnorm2d", "input");
  if (x.dim(1) != bn.channels()) {
    throw ShapeError("batchnorm2d: layer has " + std::to_string(bn.channels()) +
                     " channels, input " + shape_str(x.shape()));
  }
  kernels::ChannelGeometry g{x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  const bool tracked = should_record({&x, &bn.weight, &bn.bias});
  Tensor out = make_output(x.shape(), tracked);
  const auto channels = static_cast<std::size_t>(g.channels);

  if (training) {
    if (g.batch < 2) {
      throw std::invalid_argument("batchnorm2d: training mode needs a batch of at least 2, got " +
                                  std::to_string(g.batch));
    }
    std::vector<double> mean(channels);
    std::vector<double> inv_std(channels);
    kernels::batchnorm_train_forward(g, x.data(), bn.weight.data(), bn.bias.data(), bn.eps,
                                     out.data(), mean, inv_std);
    const double count = static_cast<double>(g.batch * g.spatial);
    auto rm = bn.running_mean.data();
    auto rv = bn.running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      const double biased = 1.0 / (inv_std[c] * inv_std[c]) - bn.eps;
      const double unbiased = biased * count / (count - 1.0);
      rm[c] = bn.momentum * rm[c] + (1.0 - bn.momentum) * mean[c];
      rv[c] = bn.momentum * rv[c] + (1.0 - bn.momentum) * unbiased;
    }
    if (tracked) {
      Tensor weight = bn.weight;
      Tensor bias = bn.bias;
      active_tape()->record([x, weight, bias, out, g, mean = std::move(mean),
                             inv_std = std::move(inv_std)]() mutable {
        const auto dy = out_grad(out);
        if (dy.empty()) return;
        std::vector<double> dx_scratch;
        std::span<double> dx;
        if (wants_grad(x)) {
          dx = x.grad_storage();
        } else {
          dx_scratch.assign(dy.size(), 0.0);
          dx = dx_scratch;
        }
        std::vector<double> dgamma(mean.size(), 0.0);
        std::vector<double> dbeta(mean.size(), 0.0);
        kernels::batchnorm_train_backward(g, x.data(), weight.data(), mean, inv_std, dy, dx,
                                          dgamma, dbeta);
        if (wants_grad(weight)) {
          auto gw = weight.grad_storage();
          for (std::size_t c = 0; c < dgamma.size(); ++c) gw[c] += dgamma[c];
        }
        if (wants_grad(bias)) {
          auto gb = bias.grad_storage();
          for (std::size_t c = 0; c < dbeta.size(); ++c) gb[c] += dbeta[c];
        }
      });
    }
    return out;
  }

  std::vector<double> inv_std(channels);
  const auto rm = bn.running_mean.data();
  const auto rv = bn.running_var.data();
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(rv[c] + bn.eps);
  const auto in = x.data();
  auto y = out.data();
  const auto gamma = bn.weight.data();
  const auto beta = bn.bias.data();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.channels; ++c) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        y[off + s] = gamma[c] * (in[off + s] - rm[c]) * inv_std[c] + beta[c];
      }
    }
  }
  if (tracked) {
    Tensor weight = bn.weight;
    Tensor bias = bn.bias;
    std::vector<double> mean(rm.begin(), rm.end());
    active_tape()->record([x, weight, bias, out, g, mean = std::move(mean),
                           inv_std = std::move(inv_std)]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      const auto in = x.data();
      const auto gamma = weight.data();
      std::span<double> dx = wants_grad(x) ? x.grad_storage() : std::span<double>{};
      std::span<double> gw = wants_grad(weight) ? weight.grad_storage() : std::span<double>{};
      std::span<double> gb = wants_grad(bias) ? bias.grad_storage() : std::span<double>{};
      for (std::int64_t n = 0; n < g.batch; ++n) {
        for (std::int64_t c = 0; c < g.channels; ++c) {
          const auto off = (n * g.channels + c) * g.spatial;
          for (std::int64_t s = 0; s < g.spatial; ++s) {
            const double d = dy[off + s];
            if (!dx.empty()) dx[off + s] += d * gamma[c] * inv_std[c];
            if (!gw.empty()) gw[c] += d * (in[off + s] - mean[c]) * inv_std[c];
            if (!gb.empty()) gb[c] += d;
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const auto batch = x.dim(0);
  const auto channels = x.dim(1);
  const auto spatial = x.dim(2) * x.dim(3);
  const bool tracked = should_record({&x});
  Tensor out = make_output(Shape{batch, channels}, tracked);
  const auto in = x.data();
  auto y = out.data();
  for (std::int64_t i = 0; i < batch * channels; ++i) {
    double acc = 0.0;
    for (std::int64_t s = 0; s < spatial; ++s) acc += in[i * spatial + s];
    y[i] = acc / static_cast<double>(spatial);
  }
  if (tracked) {
    active_tape()->record([x, out, spatial]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      auto g = x.grad_storage();
      const double inv = 1.0 / static_cast<double>(spatial);
      for (std::size_t i = 0; i < dy.size(); ++i) {
        for (std::int64_t s = 0; s < spatial; ++s) g[i * spatial + s] += dy[i] * inv;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const auto batch = x.dim(0);
  const auto features = x.dim(1);
  const auto classes = weight.dim(0);
  if (weight.dim(1) != features) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " does not accept input " +
                     shape_str(x.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != classes) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const bool tracked = should_record({&x, &weight, &bias});
  Tensor out = make_output(Shape{batch, classes}, tracked);
  const auto in = x.data();
  const auto w = weight.data();
  const auto b = bias.data();
  auto y = out.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t k = 0; k < classes; ++k) {
      double acc = b[k];
      for (std::int64_t f = 0; f < features; ++f) acc += in[n * features + f] * w[k * features + f];
      y[n * classes + k] = acc;
    }
  }
  if (tracked) {
    active_tape()->record([x, weight, bias, out, batch, features, classes]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      const auto in = x.data();
      const auto w = weight.data();
      if (wants_grad(x)) {
        auto g = x.grad_storage();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t k = 0; k < classes; ++k)
            for (std::int64_t f = 0; f < features; ++f)
              g[n * features + f] += dy[n * classes + k] * w[k * features + f];
      }
      if (wants_grad(weight)) {
        auto g = weight.grad_storage();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t k = 0; k < classes; ++k)
            for (std::int64_t f = 0; f < features; ++f)
              g[k * features + f] += dy[n * classes + k] * in[n * features + f];
      }
      if (wants_grad(bias)) {
        auto g = bias.grad_storage();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t k = 0; k < classes; ++k) g[k] += dy[n * classes + k];
      }
    });
  }
  return out;
}

Tensor spatial_mask(const Tensor& x, const Tensor& maps, std::int64_t masked_channels) {
  require_rank(x, 4, "spatial_mask", "input");
  require_rank(maps, 3, "spatial_mask", "maps");
  const auto batch = x.dim(0);
  const auto channels = x.dim(1);
  const auto spatial = x.dim(2) * x.dim(3);
  if (maps.dim(0) != batch || maps.dim(1) != x.dim(2) || maps.dim(2) != x.dim(3)) {
    throw ShapeError("spatial_mask: maps " + shape_str(maps.shape()) +
                     " do not match features " + shape_str(x.shape()));
  }
  if (masked_channels < 0 || masked_channels > channels) {
    throw ShapeError("spatial_mask: masked channel count " + std::to_string(masked_channels) +
                     " outside [0, " + std::to_string(channels) + "]");
  }
  const bool tracked = should_record({&x});
  Tensor out = make_output(x.shape(), tracked);
  const auto in = x.data();
  const auto m = maps.data();
  auto y = out.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const auto off = (n * channels + c) * spatial;
      if (c < masked_channels) {
        for (std::int64_t s = 0; s < spatial; ++s) y[off + s] = in[off + s] * m[n * spatial + s];
      } else {
        for (std::int64_t s = 0; s < spatial; ++s) y[off + s] = in[off + s];
      }
    }
  }
  if (tracked) {
    active_tape()->record([x, maps, out, batch, channels, spatial, masked_channels]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      auto g = x.grad_storage();
      const auto m = maps.data();
      for (std::int64_t n = 0; n < batch; ++n) {
        for (std::int64_t c = 0; c < channels; ++c) {
          const auto off = (n * channels + c) * spatial;
          if (c < masked_channels) {
            for (std::int64_t s = 0; s < spatial; ++s) g[off + s] += dy[off + s] * m[n * spatial + s];
          } else {
            for (std::int64_t s = 0; s < spatial; ++s) g[off + s] += dy[off + s];
          }
        }
      }
    });
  }
  return out;
}

Tensor mean_of(std::span<const Tensor> xs) {
  if (xs.empty()) throw std::invalid_argument("mean_of: empty input list");
  for (const auto& t : xs) require_same_shape(xs.front(), t, "mean_of");
  bool tracked = false;
  for (const auto& t : xs) tracked = tracked || should_record({&t});
  Tensor out = make_output(xs.front().shape(), tracked);
  auto y = out.data();
  const double inv = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double acc = 0.0;
    for (const auto& t : xs) acc += t.data()[i];
    y[i] = acc * inv;
  }
  if (tracked) {
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    active_tape()->record([inputs, out, inv]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      for (auto& t : inputs) {
        if (!wants_grad(t)) continue;
        auto g = t.grad_storage();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * inv;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> weights) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const auto batch = logits.dim(0);
  const auto classes = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  if (!weights.empty() && static_cast<std::int64_t>(weights.size()) != batch) {
    throw ShapeError("cross_entropy: " + std::to_string(weights.size()) +
                     " weights for batch of " + std::to_string(batch));
  }
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || labels[n] >= classes) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[n]) + " at index " +
                              std::to_string(n) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  const bool tracked = should_record({&logits});
  Tensor out = make_output(Shape{}, tracked);
  const auto z = logits.data();
  std::vector<double> probs(z.size());
  double total = 0.0;
  for (std::int64_t n = 0; n < batch; ++n) {
    const double* row = z.data() + n * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) {
      probs[n * classes + k] = std::exp(row[k] - peak);
      denom += probs[n * classes + k];
    }
    for (std::int64_t k = 0; k < classes; ++k) probs[n * classes + k] /= denom;
    const double nll = std::log(denom) - (row[labels[n]] - peak);
    total += (weights.empty() ? 1.0 : weights[n]) * nll;
  }
  out.data()[0] = total / static_cast<double>(batch);
  if (tracked) {
    std::vector<int> label_copy(labels.begin(), labels.end());
    std::vector<double> weight_copy(weights.begin(), weights.end());
    active_tape()->record([logits, out, batch, classes, probs = std::move(probs),
                           label_copy = std::move(label_copy),
                           weight_copy = std::move(weight_copy)]() mutable {
      const auto dy = out_grad(out);
      if (dy.empty()) return;
      auto g = logits.grad_storage();
      for (std::int64_t n = 0; n < batch; ++n) {
        const double w = (weight_copy.empty() ? 1.0 : weight_copy[n]) * dy[0] /
                         static_cast<double>(batch);
        for (std::int64_t k = 0; k < classes; ++k) {
          const double target = (k == label_copy[n]) ? 1.0 : 0.0;
          g[n * classes + k] += w * (probs[n * classes + k] - target);
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "softmax_rows", "logits");
  const auto batch = logits.dim(0);
  const auto classes = logits.dim(1);
  Tensor out(logits.shape());
  const auto z = logits.data();
  auto p = out.data();
  for (std::int64_t n = 0; n < batch; ++n) {
    const double* row = z.data() + n * classes;
    const double peak = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::int64_t k = 0; k < classes; ++k) {
      p[n * classes + k] = std::exp(row[k] - peak);
      denom += p[n * classes + k];
    }
    for (std::int64_t k = 0; k < classes; ++k) p[n * classes + k] /= denom;
  }
  return out;
}

}  // namespace mixshare
