#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "tscan/tensor.hpp"

namespace tscan {

struct AdamConfig {
  double learning_rate = 0.015;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// First/second moment accumulators, congruent with the parameter list they
// were initialized from. step counts completed updates.
struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;

  static AdamState init(std::span<Tensor* const> params, AdamConfig cfg);
};

// One Adam update with bias correction. params/grads must be congruent with
// the state; gradients must be finite.
void adam_step(std::span<Tensor* const> params, std::span<const std::span<const double>> grads,
               AdamState& state);

}  // namespace tscan
