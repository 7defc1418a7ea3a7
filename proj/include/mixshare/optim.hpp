#pragma once

#include <span>
#include <vector>

#include "mixshare/tensor.hpp"

namespace mixshare {

/// One SGD update on raw buffers:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay);

/// SGD with momentum and L2 weight decay over a fixed parameter list.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();

  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

}  // namespace mixshare
