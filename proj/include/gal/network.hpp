#pragma once

#include <string>
#include <vector>

#include "gal/architecture.hpp"
#include "gal/graph.hpp"
#include "gal/rng.hpp"
#include "gal/tensor.hpp"

namespace gal {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// An architecture plus its weights, in one canonical parameter order (layer
// order; weight before bias; composite layers enumerate their pieces in
// forward order).
struct Network {
  ArchitectureSpec spec;
  std::vector<Parameter> params;

  Tensor* find(const std::string& name);
  const Tensor* find(const std::string& name) const;
  int64_t param_count() const;
};

// Allocates parameters in canonical order. Weights are He-normal
// (stddev sqrt(2/fan_in), stream derived from seed and parameter position),
// biases zero.
Network init_network(const ArchitectureSpec& spec, uint64_t seed);

// Which structure families carry mask slots.
struct StructureKinds {
  bool channel = false;
  bool block = false;
  bool branch = false;
  bool any() const { return channel || block || branch; }
};

enum class StructureKind { Channel, Block, Branch };
const char* to_string(StructureKind kind);

// How a pruned slot is realized when the network is compacted.
//   FullProducer: the producing filters/rows are private to this consumer, so
//     both sides shrink (producer output units and consumer input slices).
//   InputSelect: the producer feeds a shared stream (residual sum, concat, or
//     the image itself can't shrink), so only the consumer's input slices are
//     dropped, recorded as an in_index selection.
enum class CompactionMode { FullProducer, InputSelect };

// One contiguous window of the mask vector bound to a location in the net.
struct AttachmentSite {
  StructureKind kind = StructureKind::Channel;
  CompactionMode mode = CompactionMode::FullProducer;
  int layer = -1;        // top-level layer index
  int branch = -1;       // inception branch, or -1
  bool inner = false;    // true: the composite's private mid input
  int offset = 0;        // window start in the mask vector
  int count = 0;         // entries in the window
  int group_size = 1;    // flattened elements gated per entry
  int producer_layer = -1;  // FullProducer at top level: the producing layer
};

struct SoftMask {
  Tensor values;  // rank-1, one real slot per structure
  std::vector<AttachmentSite> sites;
  int size() const { return values.rank() == 1 ? values.dim(0) : 0; }
  // Zero-count under |m| <= threshold (threshold 0 counts exact zeros).
  int zeros(double threshold = 0.0) const;
};

struct MaskedNetwork {
  Network net;
  SoftMask mask;
  double dropout_rate = 0.1;
};

// Wraps a copy of `baseline` with mask slots for the requested structure
// kinds. Slots are enumerated in forward order. A layer reading the raw input
// image never receives a channel slot. Mask values are drawn from N(0,1) on a
// stream derived from `seed`. Requires an uncompacted network (no in_index
// selections anywhere).
MaskedNetwork attach_masks(const Network& baseline, const StructureKinds& kinds, uint64_t seed);

struct ForwardOptions {
  const SoftMask* mask = nullptr;  // null: plain forward
  double dropout_rate = 0.0;
  bool noise_active = false;   // dropout noise after the head nonlinearity
  Rng* noise_rng = nullptr;    // required when noise_active
  bool params_trainable = false;
  bool mask_trainable = false;
};

struct ForwardHandles {
  ValueId logits = -1;
  ValueId mask_leaf = -1;  // -1 when no mask participates
};

// Builds the network's graph on top of `input` (shape [N,C,H,W] matching
// spec.input_chw). Parameters are bound as graph leaves, so backward() leaves
// gradients on net.params tensors (and mask.values when mask_trainable).
ForwardHandles build_forward(Graph& g, Network& net, ValueId input, const ForwardOptions& opt);
ForwardHandles build_forward(Graph& g, MaskedNetwork& mn, ValueId input, bool noise_active,
                             Rng* noise_rng, bool params_trainable, bool mask_trainable);

// Convenience no-grad forward: returns logits [N,classes].
Tensor forward_eval(const Network& net, const Tensor& batch);
// Masked no-grad forward (noise off).
Tensor forward_eval(const MaskedNetwork& mn, const Tensor& batch);

}  // namespace gal
