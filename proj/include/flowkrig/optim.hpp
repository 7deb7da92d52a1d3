#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowkrig/tensor.hpp"

namespace flowkrig {

/// A named trainable tensor with its Adam moment state.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor t);
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Allocates zeroed gradient buffers for every parameter.
void zero_grads(std::span<Parameter> params);

/// One bias-corrected Adam update. Every parameter must carry a gradient;
/// nothing is modified if one is missing. Gradients are released afterwards.
void adam_step(std::span<Parameter> params, const AdamConfig& cfg);

}  // namespace flowkrig
