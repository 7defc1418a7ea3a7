#pragma once

#include <cstdint>
#include <span>

namespace mixshare::kernels {

/// Which implementation of the heavy kernels to run.
///
/// `reference` is the serial direct-loop code kept as ground truth.
/// `parallel` lowers convolutions to GEMM (Eigen) and spreads the batch over
/// OpenMP threads. Both are deterministic: the parallel kernels never reduce
/// across threads in a thread-count-dependent order.
enum class Backend { reference, parallel };

void set_backend(Backend backend);
Backend backend();
const char* backend_name(Backend backend);

/// RAII override of the active backend.
class BackendScope {
 public:
  explicit BackendScope(Backend b) : previous_(backend()) { set_backend(b); }
  ~BackendScope() { set_backend(previous_); }
  BackendScope(const BackendScope&) = delete;
  BackendScope& operator=(const BackendScope&) = delete;

 private:
  Backend previous_;
};

struct ConvGeometry {
  std::int64_t batch = 0;
  std::int64_t in_channels = 0;
  std::int64_t in_h = 0;
  std::int64_t in_w = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 0;
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  std::int64_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::int64_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::int64_t patch() const { return in_channels * kernel * kernel; }
};

struct ChannelGeometry {
  std::int64_t batch = 0;
  std::int64_t channels = 0;
  std::int64_t spatial = 0;  // H * W
};

// Dispatching entry points. Outputs of *_forward are overwritten; gradient
// outputs (dx, dw, dgamma, dbeta) are accumulated into.

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw);

/// Normalizes with batch statistics. Writes per-channel mean and 1/sqrt(var+eps)
/// (biased variance) for the backward pass.
void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std);
void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta);

namespace reference {
void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw);
void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std);
void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta);
}  // namespace reference

namespace parallel {
void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw);
void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std);
void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta);
}  // namespace parallel

}  // namespace mixshare::kernels
