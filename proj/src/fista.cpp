#include "gal/fista.hpp"

#include <cmath>
#include <stdexcept>

namespace gal {

void prox_l1(Tensor& x, double t) {
  if (t < 0) throw std::invalid_argument("prox_l1: negative threshold");
  for (auto& v : x.values()) v = prox_l1(v, t);
}

void fista_step(FistaState& st, Tensor& m, const SmoothGradFn& grad_at_y,
                double eta, double lambda) {
  if (eta <= 0) throw std::invalid_argument("fista_step: eta must be positive");
  if (lambda < 0) throw std::invalid_argument("fista_step: lambda must be nonnegative");
  if (st.m_prev.size() == 0) st.m_prev = m;
  if (!st.m_prev.same_shape(m))
    throw std::invalid_argument("fista_step: iterate shape changed mid-run");

  const double alpha_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * st.alpha * st.alpha));
  const double mix = (st.alpha - 1.0) / alpha_next;

  Tensor y(m.shape());
  for (int64_t i = 0; i < m.size(); ++i) y[i] = m[i] + mix * (m[i] - st.m_prev[i]);

  Tensor grad = Tensor::zeros(m.shape());
  grad_at_y(y, grad);
  grad.require_finite("fista gradient");

  st.m_prev = m;
  const double band = eta * lambda;
  for (int64_t i = 0; i < m.size(); ++i) m[i] = prox_l1(y[i] - eta * grad[i], band);
  st.alpha = alpha_next;
  ++st.k;
}

void sgd_mask_step(Tensor& m, const Tensor& grad_h, Tensor& velocity,
                   double eta, double momentum, double lambda) {
  if (!grad_h.same_shape(m))
    throw std::invalid_argument("sgd_mask_step: gradient shape mismatch");
  if (velocity.size() == 0) velocity = Tensor::zeros(m.shape());
  if (!velocity.same_shape(m))
    throw std::invalid_argument("sgd_mask_step: velocity shape mismatch");
  for (int64_t i = 0; i < m.size(); ++i) {
    const double sg = (m[i] > 0.0) ? 1.0 : (m[i] < 0.0 ? -1.0 : 0.0);
    velocity[i] = momentum * velocity[i] + grad_h[i] + lambda * sg;
    m[i] -= eta * velocity[i];
  }
}

}  // namespace gal
