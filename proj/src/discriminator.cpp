#include "gal/discriminator.hpp"

#include <cmath>
#include <stdexcept>

#include "gal/errors.hpp"

namespace gal {

namespace {
constexpr int kWidths[] = {128, 256, 128, 1};
}

int64_t Discriminator::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

Discriminator init_discriminator(int in_features, uint64_t seed) {
  if (in_features < 1) throw ConfigError("init_discriminator: feature width must be positive");
  Discriminator d;
  d.in_features = in_features;
  int fan_in = in_features;
  for (int i = 0; i < 4; ++i) {
    const int out = kWidths[i];
    Tensor w({fan_in, out});
    Rng rng(derive_seed(seed, {tag("disc"), static_cast<uint64_t>(i)}));
    const double stddev = std::sqrt(2.0 / fan_in);
    for (auto& v : w.values()) v = rng.normal() * stddev;
    d.params.push_back({"D" + std::to_string(i) + ".w", std::move(w)});
    d.params.push_back({"D" + std::to_string(i) + ".b", Tensor::zeros({out})});
    fan_in = out;
  }
  return d;
}

BoundDiscriminator bind_discriminator(Graph& g, Discriminator& d, bool trainable) {
  if (d.params.size() != 8) throw ConfigError("bind_discriminator: malformed judge");
  BoundDiscriminator bd;
  for (auto& p : d.params) bd.leaves.push_back(g.leaf(p.tensor, trainable, p.name));
  return bd;
}

ValueId discriminate(Graph& g, const BoundDiscriminator& bd, ValueId features) {
  ValueId h = features;
  for (int i = 0; i < 4; ++i) {
    h = g.linear(h, bd.leaves[static_cast<size_t>(2 * i)], bd.leaves[static_cast<size_t>(2 * i + 1)]);
    if (i < 3) h = g.relu(h);
  }
  return g.sigmoid(h);
}

Tensor discriminate(const Discriminator& d, const Tensor& features) {
  Graph g(false);
  BoundDiscriminator bd = bind_discriminator(g, const_cast<Discriminator&>(d), false);
  return g.value(discriminate(g, bd, g.constant(features, "features")));
}

}  // namespace gal
