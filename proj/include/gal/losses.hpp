#pragma once

#include "gal/graph.hpp"
#include "gal/network.hpp"

namespace gal {

// Probabilities are clamped into [kProbEps, 1 - kProbEps] before any log so
// the game value stays finite even when the judge saturates.
inline constexpr double kProbEps = 1e-7;

// Judge regularizer flavors. The negated norms penalize judge capacity (the
// judge maximizes, hence the sign); the adversarial kind instead rewards the
// judge for calling generator output real, which keeps the game alive.
enum class DRegKind { NegL1, NegL2, Adversarial };
const char* to_string(DRegKind kind);

// mean log d_real + mean log(1 - d_fake): the two-player game value.
ValueId adversarial_loss(Graph& g, ValueId d_real, ValueId d_fake);

// The generator-side term alone: mean log(1 - d_fake).
ValueId generator_fool_loss(Graph& g, ValueId d_fake);

// mean log d_fake, added to the judge's maximization objective.
ValueId adversarial_regularizer(Graph& g, ValueId d_fake);

// (1/2n) sum |fb - fg|^2 over [n,K] feature batches.
ValueId data_alignment_loss(Graph& g, ValueId fb, ValueId fg);

// Value of the selected judge regularizer (coefficient excluded):
// NegL1 -> -|Wd|_1, NegL2 -> -0.5*|Wd|_2^2, Adversarial -> mean log d_fake.
double d_regularizer_value(DRegKind kind, const Tensor& d_fake,
                           const std::vector<Parameter>& wd);

double l1_norm(const std::vector<Parameter>& ps);
double half_sq_norm(const std::vector<Parameter>& ps);

}  // namespace gal
