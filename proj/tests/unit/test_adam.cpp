#include <cmath>
#include <vector>

#include "doctest.h"
#include "tscan/adam.hpp"
#include "tscan/errors.hpp"
#include "tscan/tape.hpp"

using namespace tscan;

namespace {

// Reference Adam iteration written independently of the production loop:
// scalar state, explicit bias correction, no in-place tricks.
struct RefAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double update(double g, const AdamConfig& c) {
    ++t;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(c.beta1, t));
    const double vhat = v / (1.0 - std::pow(c.beta2, t));
    return -c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
  }
};

}  // namespace

TEST_CASE("adam matches a hand-iterated scalar reference over 20 steps") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Tensor p = Tensor::scalar(3.0);
  std::vector<Tensor*> params{&p};
  AdamState state = AdamState::init(params, cfg);

  RefAdam ref;
  double ref_p = 3.0;
  for (int step = 0; step < 20; ++step) {
    // Gradient of f(p) = p^2 / 2 is p itself; use the reference value so both
    // iterations see identical inputs.
    const double g = ref_p;
    std::vector<double> gbuf{g};
    std::vector<std::span<const double>> grads{std::span<const double>(gbuf)};
    adam_step(params, grads, state);
    ref_p += ref.update(g, cfg);
    CHECK(p.at(0, 0) == doctest::Approx(ref_p).epsilon(1e-14));
  }
  CHECK(state.step == 20);
  // Descent on a convex bowl must have moved the parameter toward zero.
  CHECK(std::abs(p.at(0, 0)) < 3.0);
}

TEST_CASE("adam first step moves by about the learning rate regardless of scale") {
  // With zero moment history, |update| ~= lr for any nonzero gradient.
  for (double g : {1e-3, 1.0, 1e3}) {
    AdamConfig cfg;
    cfg.learning_rate = 0.05;
    Tensor p = Tensor::scalar(0.0);
    std::vector<Tensor*> params{&p};
    AdamState state = AdamState::init(params, cfg);
    std::vector<double> gbuf{g};
    std::vector<std::span<const double>> grads{std::span<const double>(gbuf)};
    adam_step(params, grads, state);
    CHECK(p.at(0, 0) == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));
  }
}

TEST_CASE("adam handles multiple parameters with distinct shapes") {
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  Tensor a = Tensor::from(2, 2, {1.0, -1.0, 0.5, 2.0});
  Tensor b = Tensor::from(1, 3, {0.0, 4.0, -2.0});
  std::vector<Tensor*> params{&a, &b};
  AdamState state = AdamState::init(params, cfg);

  std::vector<double> ga{0.1, -0.2, 0.3, -0.4};
  std::vector<double> gb{1.0, 0.0, -1.0};
  std::vector<std::span<const double>> grads{std::span<const double>(ga),
                                             std::span<const double>(gb)};
  adam_step(params, grads, state);

  // Each coordinate moves opposite its gradient sign; zero gradient stays put.
  CHECK(a.at(0, 0) < 1.0);
  CHECK(a.at(0, 1) > -1.0);
  CHECK(a.at(1, 0) < 0.5);
  CHECK(a.at(1, 1) > 2.0);
  CHECK(b.at(0, 0) < 0.0);
  CHECK(b.at(0, 1) == 4.0);
  CHECK(b.at(0, 2) > -2.0);
}

TEST_CASE("adam converges on a quadratic") {
  AdamConfig cfg;
  cfg.learning_rate = 0.1;
  Tensor p = Tensor::from(1, 2, {5.0, -3.0});
  std::vector<Tensor*> params{&p};
  AdamState state = AdamState::init(params, cfg);
  for (int i = 0; i < 400; ++i) {
    std::vector<double> g{p.at(0, 0) - 1.0, p.at(0, 1) + 2.0};
    std::vector<std::span<const double>> grads{std::span<const double>(g)};
    adam_step(params, grads, state);
  }
  CHECK(p.at(0, 0) == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(p.at(0, 1) == doctest::Approx(-2.0).epsilon(1e-3));
}

TEST_CASE("adam drives a tape-built least-squares model to the solution") {
  // Fit y = 2x - 1 from four exact points through the graph machinery.
  Tensor w = Tensor::scalar(0.0);
  Tensor b = Tensor::scalar(0.0);
  w.requires_grad = true;
  b.requires_grad = true;
  std::vector<Tensor*> params{&w, &b};
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  AdamState state = AdamState::init(params, cfg);

  const Tensor xs = Tensor::from(4, 1, {-1.0, 0.0, 1.0, 2.0});
  const Tensor ys = Tensor::from(4, 1, {-3.0, -1.0, 1.0, 3.0});
  Tape tape;
  for (int i = 0; i < 1200; ++i) {
    tape.reset();
    Var vw = tape.leaf(w);
    Var vb = tape.leaf(b);
    Var pred = add_bias(mul(tape.constant(xs), vw), vb);
    Var loss = mse(pred, tape.constant(ys));
    tape.backward(loss);
    std::vector<std::span<const double>> grads{tape.grad(vw), tape.grad(vb)};
    adam_step(params, grads, state);
  }
  CHECK(w.at(0, 0) == doctest::Approx(2.0).epsilon(1e-3));
  CHECK(b.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-3));
}

TEST_CASE("adam rejects malformed inputs") {
  Tensor p = Tensor::scalar(1.0);
  std::vector<Tensor*> params{&p};
  AdamConfig bad;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(AdamState::init(params, bad), ContractError);
  bad.learning_rate = 0.01;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(AdamState::init(params, bad), ContractError);

  AdamState state = AdamState::init(params, AdamConfig{});
  std::vector<double> wrong{1.0, 2.0};
  std::vector<std::span<const double>> grads{std::span<const double>(wrong)};
  CHECK_THROWS_AS(adam_step(params, grads, state), ShapeError);

  std::vector<double> nan_g{std::nan("")};
  std::vector<std::span<const double>> grads2{std::span<const double>(nan_g)};
  CHECK_THROWS_AS(adam_step(params, grads2, state), ContractError);

  std::vector<std::span<const double>> none;
  CHECK_THROWS_AS(adam_step(params, none, state), ContractError);
}
