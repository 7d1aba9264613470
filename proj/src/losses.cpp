#include "gal/losses.hpp"

#include <cmath>

#include "gal/errors.hpp"

namespace gal {

const char* to_string(DRegKind kind) {
  switch (kind) {
    case DRegKind::NegL1: return "neg-l1";
    case DRegKind::NegL2: return "neg-l2";
    case DRegKind::Adversarial: return "adversarial";
  }
  return "?";
}

namespace {
// log of a probability node, clamped away from {0,1} first.
ValueId safe_log(Graph& g, ValueId p) { return g.log(g.clamp(p, kProbEps, 1.0 - kProbEps)); }
}  // namespace

ValueId adversarial_loss(Graph& g, ValueId d_real, ValueId d_fake) {
  return g.add(g.mean(safe_log(g, d_real)), generator_fool_loss(g, d_fake));
}

ValueId generator_fool_loss(Graph& g, ValueId d_fake) {
  // 1 - p of the clamped probability stays in [eps, 1-eps].
  ValueId flipped = g.affine(g.clamp(d_fake, kProbEps, 1.0 - kProbEps), -1.0, 1.0);
  return g.mean(g.log(flipped));
}

ValueId adversarial_regularizer(Graph& g, ValueId d_fake) {
  return g.mean(safe_log(g, d_fake));
}

ValueId data_alignment_loss(Graph& g, ValueId fb, ValueId fg) {
  if (g.shape(fb) != g.shape(fg))
    throw std::invalid_argument("data_alignment_loss: feature shapes differ (" +
                                shape_to_string(g.shape(fb)) + " vs " + shape_to_string(g.shape(fg)) + ")");
  const int n = g.shape(fb)[0];
  return g.affine(g.sum_squares(g.sub(fb, fg)), 1.0 / (2.0 * n), 0.0);
}

double d_regularizer_value(DRegKind kind, const Tensor& d_fake,
                           const std::vector<Parameter>& wd) {
  switch (kind) {
    case DRegKind::NegL1: return -l1_norm(wd);
    case DRegKind::NegL2: return -half_sq_norm(wd);
    case DRegKind::Adversarial: {
      double acc = 0;
      for (auto p : d_fake.values()) {
        const double c = std::min(std::max(p, kProbEps), 1.0 - kProbEps);
        acc += std::log(c);
      }
      return acc / static_cast<double>(d_fake.size());
    }
  }
  throw ConfigError("d_regularizer_value: unknown kind");
}

double l1_norm(const std::vector<Parameter>& ps) {
  double acc = 0;
  for (const auto& p : ps)
    for (auto v : p.tensor.values()) acc += std::fabs(v);
  return acc;
}

double half_sq_norm(const std::vector<Parameter>& ps) {
  double acc = 0;
  for (const auto& p : ps)
    for (auto v : p.tensor.values()) acc += v * v;
  return 0.5 * acc;
}

}  // namespace gal
