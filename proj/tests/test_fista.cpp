#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gal/fista.hpp"
#include "gal/rng.hpp"
#include "oracles.hpp"

using namespace gal;

namespace {

// Small well-conditioned least-squares instance: diagonally dominant so the
// accelerated method reaches tight tolerances within a couple hundred steps.
oracle::Lasso make_lasso(double lambda, uint64_t seed) {
  Rng rng(seed);
  Tensor a({12, 8});
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 8; ++c) a.at(r, c) = (r == c ? 2.0 : 0.0) + 0.3 * rng.normal();
  Tensor b({12});
  for (auto& v : b.values()) v = rng.normal();
  return {std::move(a), std::move(b), lambda};
}

}  // namespace

TEST_CASE("soft threshold: closed form and properties") {
  CHECK(prox_l1(3.0, 1.0) == 2.0);
  CHECK(prox_l1(-3.0, 1.0) == -2.0);
  CHECK(prox_l1(0.7, 1.0) == 0.0);
  CHECK(prox_l1(-0.999, 1.0) == 0.0);
  CHECK(prox_l1(1.0, 1.0) == 0.0);  // band edge is an exact zero
  CHECK(prox_l1(5.0, 0.0) == 5.0);

  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const double x = rng.normal() * 3, y = rng.normal() * 3;
    const double t = rng.uniform() * 2;
    const double px = prox_l1(x, t), py = prox_l1(y, t);
    CHECK(std::fabs(px) <= std::fabs(x));                 // shrinks
    CHECK(px * x >= 0.0);                                 // never flips sign
    CHECK(std::fabs(px - py) <= std::fabs(x - y) + 1e-15);  // nonexpansive
    if (std::fabs(x) <= t) CHECK(px == 0.0);              // dead band exact
  }

  Tensor v({4}, {2.0, -0.5, 0.1, -4.0});
  prox_l1(v, 1.0);
  CHECK(v[0] == 1.0);
  CHECK(v[1] == 0.0);
  CHECK(v[2] == 0.0);
  CHECK(v[3] == -3.0);
  CHECK_THROWS_AS(prox_l1(v, -0.1), std::invalid_argument);
}

TEST_CASE("momentum schedule follows the alpha recurrence exactly") {
  FistaState st;
  CHECK(st.alpha == 1.0);
  Tensor m({2}, {0.0, 0.0});
  auto zero_grad = [](const Tensor&, Tensor&) {};
  fista_step(st, m, zero_grad, 1.0, 0.0);
  const double a2 = 0.5 * (1.0 + std::sqrt(5.0));
  CHECK(st.alpha == a2);
  fista_step(st, m, zero_grad, 1.0, 0.0);
  const double a3 = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * a2 * a2));
  CHECK(st.alpha == a3);
  CHECK(st.alpha == doctest::Approx(2.193527085331054).epsilon(1e-14));
  double a = a3;
  for (int k = 3; k <= 40; ++k) {
    fista_step(st, m, zero_grad, 1.0, 0.0);
    a = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * a * a));
    CHECK(st.alpha == a);
  }
  CHECK(st.k == 40);
  // alpha_k grows like k/2, which is what gives the accelerated rate
  CHECK(st.alpha > 19.0);
  CHECK(st.alpha < 22.0);
}

TEST_CASE("first step extrapolates by zero, later steps by (alpha-1)/alpha_next") {
  FistaState st;
  Tensor m({3}, {1.0, -2.0, 0.5});
  const Tensor m0 = m;
  Tensor seen_y({3});
  auto record = [&](const Tensor& y, Tensor& g) {
    seen_y = y;
    // constant gradient moves the iterate without curvature effects
    for (auto& v : g.values()) v = 1.0;
  };
  fista_step(st, m, record, 0.25, 0.0);
  for (int i = 0; i < 3; ++i) CHECK(seen_y[i] == m0[i]);  // y == m exactly
  for (int i = 0; i < 3; ++i) CHECK(m[i] == doctest::Approx(m0[i] - 0.25).epsilon(1e-15));

  const Tensor m1 = m;
  fista_step(st, m, record, 0.25, 0.0);
  const double a2 = 0.5 * (1.0 + std::sqrt(5.0));
  const double a3 = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * a2 * a2));
  const double mix = (a2 - 1.0) / a3;
  for (int i = 0; i < 3; ++i)
    CHECK(seen_y[i] == doctest::Approx(m1[i] + mix * (m1[i] - m0[i])).epsilon(1e-15));
}

TEST_CASE("separable quadratic: one unit step lands on the soft threshold") {
  // H(m) = 0.5*|m - c|^2 has L = 1; with eta = 1 the forward step lands on c
  // and the prox gives the exact closed-form minimizer of H + lambda*|.|_1.
  Tensor c({5}, {2.0, -0.3, 0.05, -1.4, 0.0});
  Tensor m({5}, {0.9, 0.9, 0.9, 0.9, 0.9});
  FistaState st;
  auto grad = [&](const Tensor& y, Tensor& g) {
    for (int64_t i = 0; i < y.size(); ++i) g[i] = y[i] - c[i];
  };
  const double lambda = 0.5;
  for (int k = 0; k < 60; ++k) fista_step(st, m, grad, 1.0, lambda);
  for (int64_t i = 0; i < m.size(); ++i) {
    const double want = prox_l1(c[i], lambda);
    if (want == 0.0) CHECK(m[i] == 0.0);
    else CHECK(m[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("matches a coordinate-descent solver on small l1 problems") {
  for (double lambda : {0.01, 0.1, 1.0}) {
    CAPTURE(lambda);
    oracle::Lasso prob = make_lasso(lambda, 901);
    const Tensor ref = prob.solve_coordinate_descent();
    const double eta = 1.0 / prob.lipschitz();
    Tensor m({8});
    FistaState st;
    auto grad = [&](const Tensor& y, Tensor& g) { prob.gradient_smooth(y, g); };
    for (int k = 0; k < 200; ++k) fista_step(st, m, grad, eta, lambda);
    double linf = 0;
    for (int i = 0; i < 8; ++i) linf = std::max(linf, std::fabs(m[i] - ref[i]));
    CHECK(linf <= 1e-6);
    // agreement on which coordinates died
    for (int i = 0; i < 8; ++i)
      if (ref[i] == 0.0) CHECK(m[i] == 0.0);
  }
}

TEST_CASE("objective decays at least at the accelerated rate") {
  oracle::Lasso prob = make_lasso(0.1, 902);
  const Tensor star = prob.solve_coordinate_descent();
  const double fstar = prob.objective(star);
  const double eta = 1.0 / prob.lipschitz();
  Tensor m({8}, {3, -3, 3, -3, 3, -3, 3, -3});  // start far away
  double r0 = 0;
  for (int i = 0; i < 8; ++i) r0 += (m[i] - star[i]) * (m[i] - star[i]);
  FistaState st;
  auto grad = [&](const Tensor& y, Tensor& g) { prob.gradient_smooth(y, g); };
  for (int k = 1; k <= 200; ++k) {
    fista_step(st, m, grad, eta, 0.1);
    const double bound = 2.0 * r0 / (eta * (k + 1) * (k + 1));
    CHECK(prob.objective(m) - fstar <= bound + 1e-12);
  }
  CHECK(prob.objective(m) - fstar < 1e-9);
}

TEST_CASE("when zero is optimal the iterate reaches exact zero and stays") {
  oracle::Lasso prob = make_lasso(0.0, 903);
  // lambda beyond |A^T b|_inf makes the all-zero vector the unique optimum
  Tensor atb({8});
  prob.gradient_smooth(Tensor::zeros({8}), atb);
  double linf = 0;
  for (auto v : atb.values()) linf = std::max(linf, std::fabs(v));
  prob.lambda = 1.5 * linf;
  const double eta = 1.0 / prob.lipschitz();
  Tensor m({8}, {1, -1, 2, -2, 1, -1, 2, -2});
  FistaState st;
  auto grad = [&](const Tensor& y, Tensor& g) { prob.gradient_smooth(y, g); };
  bool all_zero = false;
  int hit = -1;
  for (int k = 0; k < 200 && !all_zero; ++k) {
    fista_step(st, m, grad, eta, prob.lambda);
    all_zero = true;
    for (auto v : m.values()) all_zero = all_zero && v == 0.0;
    if (all_zero) hit = k;
  }
  REQUIRE(all_zero);
  INFO("reached zero at step ", hit);
  for (int k = 0; k < 20; ++k) {
    fista_step(st, m, grad, eta, prob.lambda);
    for (auto v : m.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("subgradient descent shrinks but does not produce exact zeros") {
  oracle::Lasso prob = make_lasso(0.1, 901);
  Tensor m({8}, {1, -1, 1, -1, 1, -1, 1, -1});
  const double f0 = prob.objective(m);
  Tensor vel;
  Tensor g({8});
  for (int k = 0; k < 200; ++k) {
    prob.gradient_smooth(m, g);
    sgd_mask_step(m, g, vel, 1e-2, 0.9, prob.lambda);
  }
  CHECK(prob.objective(m) < f0);
  int exact_zeros = 0;
  for (auto v : m.values()) exact_zeros += v == 0.0;
  CHECK(exact_zeros == 0);

  // the proximal path at a sparsifying strength does produce exact zeros
  prob.lambda = 1.0;
  Tensor mf({8}, {1, -1, 1, -1, 1, -1, 1, -1});
  FistaState st;
  auto gfn = [&](const Tensor& y, Tensor& gg) { prob.gradient_smooth(y, gg); };
  for (int k = 0; k < 200; ++k) fista_step(st, mf, gfn, 1.0 / prob.lipschitz(), prob.lambda);
  int fista_zeros = 0;
  for (auto v : mf.values()) fista_zeros += v == 0.0;
  CHECK(fista_zeros > 0);
}

TEST_CASE("velocity state carries momentum across subgradient steps") {
  Tensor m({1}, {10.0});
  Tensor vel;
  Tensor g = Tensor::zeros({1});
  sgd_mask_step(m, g, vel, 1.0, 0.9, 0.0);  // zero grad, zero lambda: no motion
  CHECK(m[0] == 10.0);
  g[0] = 1.0;
  sgd_mask_step(m, g, vel, 1.0, 0.9, 0.0);
  CHECK(m[0] == 9.0);  // v = 1
  g[0] = 0.0;
  sgd_mask_step(m, g, vel, 1.0, 0.9, 0.0);
  CHECK(m[0] == doctest::Approx(9.0 - 0.9).epsilon(1e-15));  // momentum coast
  // sign(0) contributes nothing: an exactly-zero entry with zero grad stays
  Tensor z({1}, {0.0});
  Tensor zvel;
  sgd_mask_step(z, Tensor::zeros({1}), zvel, 1.0, 0.9, 5.0);
  CHECK(z[0] == 0.0);
}

TEST_CASE("step rejects bad arguments") {
  FistaState st;
  Tensor m({2}, {1.0, 2.0});
  auto zero_grad = [](const Tensor&, Tensor&) {};
  CHECK_THROWS_AS(fista_step(st, m, zero_grad, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(fista_step(st, m, zero_grad, -1.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(fista_step(st, m, zero_grad, 1.0, -0.1), std::invalid_argument);
  fista_step(st, m, zero_grad, 1.0, 0.1);
  Tensor wrong({3});
  CHECK_THROWS_AS(fista_step(st, wrong, zero_grad, 1.0, 0.1), std::invalid_argument);
  auto nan_grad = [](const Tensor&, Tensor& g) { g[0] = std::nan(""); };
  CHECK_THROWS_AS(fista_step(st, m, nan_grad, 1.0, 0.1), std::domain_error);
  Tensor vel({2});
  Tensor bad_g({3});
  CHECK_THROWS_AS(sgd_mask_step(m, bad_g, vel, 1.0, 0.9, 0.1), std::invalid_argument);
}
