#include "mixshare/kernels.hpp"

#include <atomic>

namespace mixshare::kernels {

namespace {
std::atomic<Backend> active_backend{Backend::reference};
}

void set_backend(Backend b) { active_backend.store(b); }
Backend backend() { return active_backend.load(); }

const char* backend_name(Backend b) {
  return b == Backend::reference ? "reference" : "parallel";
}

void conv2d_forward(const ConvGeometry& g, std::span<const double> x, std::span<const double> w,
                    std::span<double> y) {
  if (backend() == Backend::parallel) return parallel::conv2d_forward(g, x, w, y);
  reference::conv2d_forward(g, x, w, y);
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> w,
                           std::span<const double> dy, std::span<double> dx) {
  if (backend() == Backend::parallel) return parallel::conv2d_backward_input(g, w, dy, dx);
  reference::conv2d_backward_input(g, w, dy, dx);
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> x,
                            std::span<const double> dy, std::span<double> dw) {
  if (backend() == Backend::parallel) return parallel::conv2d_backward_weight(g, x, dy, dw);
  reference::conv2d_backward_weight(g, x, dy, dw);
}

void batchnorm_train_forward(const ChannelGeometry& g, std::span<const double> x,
                             std::span<const double> gamma, std::span<const double> beta,
                             double eps, std::span<double> y, std::span<double> mean,
                             std::span<double> inv_std) {
  if (backend() == Backend::parallel) {
    return parallel::batchnorm_train_forward(g, x, gamma, beta, eps, y, mean, inv_std);
  }
  reference::batchnorm_train_forward(g, x, gamma, beta, eps, y, mean, inv_std);
}

void batchnorm_train_backward(const ChannelGeometry& g, std::span<const double> x,
                              std::span<const double> gamma, std::span<const double> mean,
                              std::span<const double> inv_std, std::span<const double> dy,
                              std::span<double> dx, std::span<double> dgamma,
                              std::span<double> dbeta) {
  if (backend() == Backend::parallel) {
    return parallel::batchnorm_train_backward(g, x, gamma, mean, inv_std, dy, dx, dgamma, dbeta);
  }
  reference::batchnorm_train_backward(g, x, gamma, mean, inv_std, dy, dx, dgamma, dbeta);
}

}  // namespace mixshare::kernels
