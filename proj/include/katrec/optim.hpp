#pragma once

#include <cstddef>
#include <vector>

#include "katrec/autodiff.hpp"

namespace katrec::ad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled
  std::size_t horizon = 0;     // linear decay to 0 over this many steps; 0 disables decay
  bool float32 = false;        // round parameters to float after each step
};

/// Adam with bias correction, decoupled weight decay and a linearly decaying
/// learning rate. Owns the moment estimates of its parameter group.
class Adam {
 public:
  Adam(AdamConfig config, std::vector<Var> params);

  /// Learning rate the next call to step() will use.
  double learning_rate() const;
  void step(const Gradients& grads);

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const std::vector<Var>& params() const { return params_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }

  /// Restores optimizer state; moment shapes must match the parameters.
  void restore(std::size_t steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  AdamConfig config_;
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
};

}  // namespace katrec::ad
