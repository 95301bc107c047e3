#include "katrec/optim.hpp"

#include <algorithm>
#include <cmath>

#include "katrec/error.hpp"

namespace katrec::ad {

Adam::Adam(AdamConfig config, std::vector<Var> params) : config_(config), params_(std::move(params)) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) fail("Adam", "parameter '", p.name(), "' does not require grad");
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

double Adam::learning_rate() const {
  if (config_.horizon == 0) return config_.lr;
  const double frac = static_cast<double>(steps_) / static_cast<double>(config_.horizon);
  return config_.lr * std::max(0.0, 1.0 - frac);
}

void Adam::step(const Gradients& grads) {
  for (const auto& p : params_) {
    const Tensor* g = grads.find(p);
    if (!g) fail("Adam::step", "missing gradient for parameter '", p.name(), "'");
    if (g->shape() != p.shape()) {
      fail("Adam::step", "gradient shape ", shape_string(g->shape()), " does not match parameter '", p.name(),
           "' ", shape_string(p.shape()));
    }
  }
  const double lr = learning_rate();
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var p = params_[k];
    const Tensor& g = *grads.find(p);
    auto w = p.mutable_value().data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + config_.weight_decay * w[i]);
      if (config_.float32) w[i] = static_cast<double>(static_cast<float>(w[i]));
    }
  }
}

void Adam::restore(std::size_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    fail("Adam::restore", "expected ", params_.size(), " moment tensors, got ", m.size(), "/", v.size());
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (m[k].shape() != params_[k].shape() || v[k].shape() != params_[k].shape()) {
      fail("Adam::restore", "moment shape mismatch for '", params_[k].name(), "'");
    }
  }
  steps_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace katrec::ad
