// GEMM-lowered convolution and channel-parallel batchnorm.
//
// Work is split across the batch (conv) or channels (batchnorm). Weight
// gradients are formed per sample and summed in sample order so the result
// does not depend on the number of OpenMP threads.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

#include "mixshare/kernels.hpp"

namespace mixshare::kernels::parallel {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

constexpr std::int64_t kWeightGradBlock = 16;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel == 1 && g.stride == 1 && g.pad == 0;
}

// Output columns [lo, hi) whose input column ow * stride - pad + kw is in range.
void valid_columns(const ConvGeometry& g, std::int64_t kw, std::int64_t ow_n, std::int64_t& lo,
                   std::int64_t& hi) {
  const auto offset = kw - g.pad;
  lo = offset >= 0 ? 0 : (-offset + g.stride - 1) / g.stride;
  const auto last = g.in_w - 1 - offset;  // largest valid ow * stride
  hi = last < 0 ? 0 : std::min(ow_n, last / g.stride + 1);
  lo = std::min(lo, hi);
}

// cols is patch() x (out_h * out_w), row-major.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const auto oh_n = g.out_h();
  const auto ow_n = g.out_w();
  const auto positions = oh_n * ow_n;
  for (std::int64_t ic = 0; ic < g.in_channels; ++ic) {
    const double* plane = x + ic * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
      for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
        double* row = cols + ((ic * g.kernel + kh) * g.kernel + kw) * positions;
        std::int64_t lo = 0, hi = 0;
        valid_columns(g, kw, ow_n, lo, hi);
        const auto offset = kw - g.pad;
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          const auto ih = oh * g.stride - g.pad + kh;
          double* out = row + oh * ow_n;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(out, out + ow_n, 0.0);
            continue;
          }
          const double* src = plane + ih * g.in_w + offset;
          std::fill(out, out + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, out + lo);
          } else {
            for (std::int64_t ow = lo; ow < hi; ++ow) out[ow] = src[ow * g.stride];
          }
          std::fill(out + hi, out + ow_n, 0.0);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
  const auto oh_n = g.out_h();
  const auto ow_n = g.out_w();
  const auto positions = oh_n * ow_n;
  for (std::int64_t ic = 0; ic < g.in_channels; ++ic) {
    double* plane = dx + ic * g.in_h * g.in_w;
    for (std::int64_t kh = 0; kh < g.kernel; ++kh) {
      for (std::int64_t kw = 0; kw < g.kernel; ++kw) {
        const double* row = cols + ((ic * g.kernel + kh) * g.kernel + kw) * positions;
        std::int64_t lo = 0, hi = 0;
        valid_columns(g, kw, ow_n, lo, hi);
        const auto offset = kw - g.pad;
        for (std::int64_t oh = 0; oh < oh_n; ++oh) {
          const auto ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          double* dst = plane + ih * g.in_w + offset;
          const double* in = row + oh * ow_n;
          if (g.stride == 1) {
            for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow] += in[ow];
          } else {
            for (std::int64_t ow = lo; ow < hi; ++ow) dst[ow * g.stride] += in[ow];
          }
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y) {
  const auto positions = g.out_h() * g.out_w();
  const auto in_stride = g.in_channels * g.in_h * g.in_w;
  const auto out_stride = g.out_channels * positions;
  const ConstMap weights(w.data(), g.out_channels, g.patch());
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.patch() * positions));
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const double* src = x.data() + n * in_stride;
      if (!pointwise) {
        im2col(g, src, cols.data());
        src = cols.data();
      }
      MutMap out(y.data() + n * out_stride, g.out_channels, positions);
      out.noalias() = weights * ConstMap(src, g.patch(), positions);
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  const auto positions = g.out_h() * g.out_w();
  const auto in_stride = g.in_channels * g.in_h * g.in_w;
  const auto out_stride = g.out_channels * positions;
  const ConstMap weights(w.data(), g.out_channels, g.patch());
  const bool pointwise = is_pointwise(g);

#pragma omp parallel
  {
    RowMatrix cols(g.patch(), positions);
#pragma omp for schedule(static)
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const ConstMap grad_out(dy.data() + n * out_stride, g.out_channels, positions);
      if (pointwise) {
        MutMap(dx.data() + n * in_stride, g.in_channels, positions).noalias() +=
            weights.transpose() * grad_out;
      } else {
        cols.noalias() = weights.transpose() * grad_out;
        col2im_add(g, cols.data(), dx.data() + n * in_stride);
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  const auto positions = g.out_h() * g.out_w();
  const auto in_stride = g.in_channels * g.in_h * g.in_w;
  const auto out_stride = g.out_channels * positions;
  const auto wsize = g.out_channels * g.patch();
  const bool pointwise = is_pointwise(g);
  std::vector<double> partial(static_cast<std::size_t>(kWeightGradBlock * wsize));

  for (std::int64_t start = 0; start < g.batch; start += kWeightGradBlock) {
    const auto count = std::min(kWeightGradBlock, g.batch - start);
#pragma omp parallel
    {
      std::vector<double> cols(pointwise ? 0 : static_cast<std::size_t>(g.patch() * positions));
#pragma omp for schedule(static)
      for (std::int64_t i = 0; i < count; ++i) {
        const auto n = start + i;
        const double* src = x.data() + n * in_stride;
        if (!pointwise) {
          im2col(g, src, cols.data());
          src = cols.data();
        }
        MutMap(partial.data() + i * wsize, g.out_channels, g.patch()).noalias() =
            ConstMap(dy.data() + n * out_stride, g.out_channels, positions) *
            ConstMap(src, g.patch(), positions).transpose();
      }
    }
    for (std::int64_t i = 0; i < count; ++i) {
      const double* p = partial.data() + i * wsize;
      for (std::int64_t k = 0; k < wsize; ++k) dw[k] += p[k];
    }
  }
}

void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std) {
  const double count = static_cast<double>(g.batch * g.spatial);
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.channels; ++c) {
    double sum = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const double* row = x.data() + (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) sum += row[s];
    }
    const double mu = sum / count;
    double sq = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const double* row = x.data() + (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) sq += (row[s] - mu) * (row[s] - mu);
    }
    const double istd = 1.0 / std::sqrt(sq / count + eps);
    mean[c] = mu;
    inv_std[c] = istd;
    const double a = gamma[c] * istd;
    const double b = beta[c] - mu * a;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) y[off + s] = a * x[off + s] + b;
    }
  }
}

void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta) {
  const double count = static_cast<double>(g.batch * g.spatial);
#pragma omp parallel for schedule(static)
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const double mu = mean[c];
    const double istd = inv_std[c];
    double sum_dy = 0.0;
    double sum_dy_x = 0.0;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        sum_dy += dy[off + s];
        sum_dy_x += dy[off + s] * (x[off + s] - mu);
      }
    }
    const double sum_dy_xhat = sum_dy_x * istd;
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double scale = gamma[c] * istd / count;
    const double mean_term = sum_dy;
    const double slope = sum_dy_xhat * istd;
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const auto off = (n * g.channels + c) * g.spatial;
      for (std::int64_t s = 0; s < g.spatial; ++s) {
        dx[off + s] += scale * (count * dy[off + s] - mean_term - (x[off + s] - mu) * slope);
      }
    }
  }
}

}  // namespace mixshare::kernels::parallel
