#pragma once

#include <cstdint>
#include <vector>

#include "gal/graph.hpp"
#include "gal/network.hpp"

namespace gal {

// Binary judge over class-logit features: fully-connected stack
// in -> 128 -> 256 -> 128 -> 1 with ReLU between and a sigmoid on the final
// scalar, so the verdict lives strictly inside (0,1).
struct Discriminator {
  int in_features = 0;
  std::vector<Parameter> params;  // D{i}.w / D{i}.b in forward order
  int64_t param_count() const;
};

Discriminator init_discriminator(int in_features, uint64_t seed);

// The judge's parameters bound once into a graph, so applying it to several
// feature batches in the same graph accumulates one gradient per tensor.
struct BoundDiscriminator {
  std::vector<ValueId> leaves;  // same order as Discriminator::params
};
BoundDiscriminator bind_discriminator(Graph& g, Discriminator& d, bool trainable);

// Probabilities [n,1] for a bound judge applied to features [n,in].
ValueId discriminate(Graph& g, const BoundDiscriminator& bd, ValueId features);

// No-grad convenience: probabilities for a feature batch.
Tensor discriminate(const Discriminator& d, const Tensor& features);

}  // namespace gal
