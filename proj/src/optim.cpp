#include "mixshare/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mixshare {

void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_step: param/grad/velocity sizes differ (" + std::to_string(param.size()) +
                     ", " + std::to_string(grad.size()) + ", " + std::to_string(velocity.size()) +
                     ")");
  }
  // lr == 0 is allowed: the first warmup step has a zero learning rate.
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("sgd_step: learning rate must be finite and >= 0");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
    param[i] -= lr * velocity[i];
  }
}

Sgd::Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p.has_grad()) {
      sgd_step(p.data(), p.grad_storage(), velocity_[i], lr, momentum_, weight_decay_);
    } else {
      const std::vector<double> zeros(static_cast<std::size_t>(p.numel()), 0.0);
      sgd_step(p.data(), zeros, velocity_[i], lr, momentum_, weight_decay_);
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace mixshare
