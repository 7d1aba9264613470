#pragma once

#include <functional>

#include "gal/tensor.hpp"

namespace gal {

// Soft threshold: the closed-form proximal map of t*|.|_1. Returns exact
// 0.0 on the dead band, which is what makes whole structures removable.
inline double prox_l1(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}
void prox_l1(Tensor& x, double t);

// Running state for the accelerated proximal iteration. alpha follows
// alpha_{k+1} = (1 + sqrt(1 + 4 alpha_k^2)) / 2 from alpha_1 = 1, and
// m_prev holds the previous iterate for the extrapolation step. The first
// step extrapolates by zero regardless of m_prev because alpha_1 - 1 = 0.
struct FistaState {
  double alpha = 1.0;
  Tensor m_prev;  // empty until the first step
  int64_t k = 0;
};

// Fills `grad` (preallocated, zeroed, same shape as m) with the gradient
// of the smooth objective part evaluated at the extrapolated point `y`.
using SmoothGradFn = std::function<void(const Tensor& y, Tensor& grad)>;

// One accelerated proximal step on m, in place:
//   y      = m + ((alpha_k - 1) / alpha_{k+1}) (m - m_prev)
//   m_next = prox_{eta*lambda}(y - eta * grad(y))
void fista_step(FistaState& st, Tensor& m, const SmoothGradFn& grad_at_y,
                double eta, double lambda);

// Subgradient alternative used for ablation runs: momentum SGD on
// H(m) + lambda*|m|_1, taking sign(m) as the l1 subgradient (sign(0) = 0).
// No proximal map, so entries shrink but essentially never hit exact zero.
void sgd_mask_step(Tensor& m, const Tensor& grad_h, Tensor& velocity,
                   double eta, double momentum, double lambda);

}  // namespace gal
