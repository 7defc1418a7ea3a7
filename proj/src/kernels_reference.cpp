// Serial direct-loop kernels. Slow, but each output is an obvious sum.

#include <cmath>

#include "mixshare/kernels.hpp"

namespace mixshare::kernels::reference {

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y) {
  const auto oh_n = g.out_h();
  const auto ow_n = g.out_w();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t oc = 0; oc < g.out_channels; ++oc) {
      for (std::int64_t oh = 0; oh < oh_n; ++oh) {
        for (std::int64_t ow = 0; ow < ow_n; ++ow) {
          double acc = 0.0;
          for (std::int64_t ic = 0; ic < g.in_channels; ++ic) {
            for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
              const auto ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const auto iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= g.in_w) continue;
                acc += x[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw] *
                       w[((oc * g.in_channels + ic) * g.kernel + kh) * g.kernel + kw];
              }
            }
          }
          y[((n * g.out_channels + oc) * oh_n + oh) * ow_n + ow] = acc;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  const auto oh_n = g.out_h();
  const auto ow_n = g.out_w();
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t oc = 0; oc < g.out_channels; ++oc) {
      for (std::int64_t oh = 0; oh < oh_n; ++oh) {
        for (std::int64_t ow = 0; ow < ow_n; ++ow) {
          const double d = dy[((n * g.out_channels + oc) * oh_n + oh) * ow_n + ow];
          for (std::int64_t ic = 0; ic < g.in_channels; ++ic) {
            for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
              const auto ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
                const auto iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= g.in_w) continue;
                dx[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw] +=
                    d * w[((oc * g.in_channels + ic) * g.kernel + kh) * g.kernel + kw];
              }
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  const auto oh_n = g.out_h();
  const auto ow_n = g.out_w();
  for (std::int64_t oc = 0; oc < g.out_channels; ++oc) {
    for (std::int64_t ic = 0; ic < g.in_channels; ++ic) {
      for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
        for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
          double acc = 0.0;
          for (std::int64_t n = 0; n < g.batch; ++n) {
            for (std::int64_t oh = 0; oh < oh_n; ++oh) {
              const auto ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= g.in_h) continue;
              for (std::int64_t ow = 0; ow < ow_n; ++ow) {
                const auto iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= g.in_w) continue;
                acc += x[((n * g.in_channels + ic) * g.in_h + ih) * g.in_w + iw] *
                       dy[((n * g.out_channels + oc) * oh_n + oh) * ow_n + ow];
              }
            }
          }
          dw[((oc * g.in_channels + ic) * g.kernel + kh) * g.kernel + kw] += acc;
        }
      }
    }
  }
}

void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std) {
  const double count = static_cast<double>(g.batch * g.spatial);
  for (std::int64_t c = 0; c < g.channels; ++c) {
    double sum = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto* row = &x[(n * g.channels + c) * g.spatial];
      for (std::int64_t s = 0; s < g.spatial; ++s) sum += row[s];
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto* row = &x[(n * g.channels + c) * g.spatial];
      for (std::int64_t s = 0; s < g.spatial; ++s) sq += (row[s] - mu) * (row[s] - mu);
    }
    const double istd = 1.0 / std::sqrt(sq / count + eps);
    mean[c] = mu;
    inv_std[c] = istd;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        y[off + s] = gamma[c] * (x[off + s] - mu) * istd + beta[c];
      }
    }
  }
}

void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta) {
  const double count = static_cast<double>(g.batch * g.spatial);
  for (std::int64_t c = 0; c < g.channels; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        const double xhat = (x[off + s] - mean[c]) * inv_std[c];
        sum_dy += dy[off + s];
        sum_dy_xhat += dy[off + s] * xhat;
      }
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double scale = gamma[c] * inv_std[c] / count;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        const double xhat = (x[off + s] - mean[c]) * inv_std[c];
        dx[off + s] += scale * (count * dy[off + s] - sum_dy - xhat * sum_dy_xhat);
      }
    }
  }
}

}  // namespace mixshare::kernels::reference
