#include "flowkrig/optim.hpp"

#include <cmath>

namespace flowkrig {

Parameter::Parameter(std::string n, Tensor t) : name(std::move(n)), tensor(std::move(t)) {
  tensor.set_requires_grad(true);
  first_moment.assign(tensor.size(), 0.0);
  second_moment.assign(tensor.size(), 0.0);
}

void zero_grads(std::span<Parameter> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

void adam_step(std::span<Parameter> params, const AdamConfig& cfg) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw TensorError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : params) {
    ++p.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p.step));
    auto w = p.tensor.mutable_values();
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g[i];
      p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = p.first_moment[i] / c1;
      const double v_hat = p.second_moment[i] / c2;
      w[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
    p.tensor.clear_grad();
  }
}

}  // namespace flowkrig
