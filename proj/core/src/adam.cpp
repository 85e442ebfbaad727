#include "tscan/adam.hpp"

#include <cmath>
#include <string>

#include "tscan/errors.hpp"

namespace tscan {

AdamState AdamState::init(std::span<Tensor* const> params, AdamConfig cfg) {
  if (!(cfg.learning_rate > 0.0)) throw ContractError("adam: learning rate must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw ContractError("adam: betas must lie in [0, 1)");
  AdamState s;
  s.config = cfg;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor* p : params) {
    s.m.push_back(Tensor::zeros(p->rows(), p->cols()));
    s.v.push_back(Tensor::zeros(p->rows(), p->cols()));
  }
  return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const std::span<const double>> grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ContractError("adam_step: " + std::to_string(params.size()) + " params, " +
                        std::to_string(grads.size()) + " grads, state for " +
                        std::to_string(state.m.size()));
  const AdamConfig& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const std::span<const double> g = grads[i];
    if (static_cast<std::int64_t>(g.size()) != p.size())
      throw ShapeError("adam_step: param " + std::to_string(i) + " has " +
                       std::to_string(p.size()) + " values, grad has " +
                       std::to_string(g.size()));
    double* pm = state.m[i].data();
    double* pv = state.v[i].data();
    double* pp = p.data();
    const std::size_t n = g.size();
    for (std::size_t j = 0; j < n; ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj))
        throw ContractError("adam_step: non-finite gradient in param " + std::to_string(i));
      pm[j] = c.beta1 * pm[j] + (1.0 - c.beta1) * gj;
      pv[j] = c.beta2 * pv[j] + (1.0 - c.beta2) * gj * gj;
      const double mhat = pm[j] / bc1;
      const double vhat = pv[j] / bc2;
      pp[j] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

}  // namespace tscan
