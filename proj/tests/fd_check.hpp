#pragma once

// Central-difference gradient checking. A builder records a scalar loss on a
// fresh tape from the caller's input tensors (creating tracked leaves for
// them); the checker perturbs each input element in place and compares the
// analytic leaf gradients against (f(x+h) - f(x-h)) / 2h.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "tscan/tape.hpp"
#include "tscan/tensor.hpp"

namespace tscan::testing {

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int checked = 0;
};

using BuildFn = std::function<Var(Tape&, std::vector<Var>&)>;

inline FdReport fd_check(std::span<Tensor* const> inputs, const BuildFn& build,
                         double step = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  const Var loss = build(tape, leaves);
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const Var& v : leaves) {
    const std::span<const double> g = tape.grad(v);
    analytic.emplace_back(g.begin(), g.end());
  }

  const auto eval = [&]() {
    Tape t;
    std::vector<Var> ignored;
    return build(t, ignored).scalar();
  };

  FdReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double>& vals = inputs[i]->values();
    for (std::size_t k = 0; k < vals.size(); ++k) {
      const double saved = vals[k];
      vals[k] = saved + step;
      const double up = eval();
      vals[k] = saved - step;
      const double dn = eval();
      vals[k] = saved;
      const double fd = (up - dn) / (2.0 * step);
      const double an = analytic[i][k];
      const double abs_err = std::abs(fd - an);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace tscan::testing
