#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "gal/architecture.hpp"
#include "gal/data.hpp"
#include "gal/network.hpp"
#include "gal/trainer.hpp"

namespace gal {

// One mask entry selected for physical removal. `index` is the entry's
// position within its attachment window (an input channel, a feature group,
// a block slot, or a branch slot); `value` is the mask value at selection
// time, recorded for the report.
struct PrunedStructure {
  StructureKind kind = StructureKind::Channel;
  int layer = -1;
  int branch = -1;  // inception branch, or -1
  bool inner = false;  // composite's private mid channels
  int index = 0;
  double value = 0.0;
};

// Every structure with |m| <= threshold, in mask order. Threshold 0 selects
// exact zeros only.
std::vector<PrunedStructure> extract_prunable(const MaskedNetwork& net, double threshold = 0.0);

// Physically removes the listed structures and folds every surviving mask
// value into the downstream weights, so the result is a plain network that
// computes the masked network's function (listed entries forced to zero)
// without any mask. Channel removal drops the consumer's input slices, plus
// the producing filters when the producer feeds this layer alone; a shared
// stream is narrowed with an input selection instead. A removed block is
// spliced to identity; a removed branch shrinks its concatenation. Removing
// every channel of a layer (or every branch of a module) raises ConfigError
// naming the layer.
Network compact(const MaskedNetwork& net, const std::vector<PrunedStructure>& removals);
// extract_prunable + compact in one step.
Network compact(const MaskedNetwork& net, double threshold = 0.0);

// Largest |Δlogit| between the masked and the compact network on a probe
// batch [N,C,H,W].
double max_logit_gap(const MaskedNetwork& masked, const Network& compacted, const Tensor& probes);

struct PruneReport {
  double threshold = 0.0;
  double lambda = 0.0;
  std::vector<PrunedStructure> removed;
  CostReport cost_before, cost_after;
  std::vector<int> widths_before, widths_after;
  double error_before = -1.0;  // percent; negative: not measured
  double error_after = -1.0;
  double equivalence_residual = -1.0;  // max |Δlogit|; negative: not measured
};

nlohmann::json to_json(const PruneReport& report);

struct FinetuneConfig {
  EtaSchedule eta;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  int batch = 128;
  int epochs = 10;
  uint64_t seed = 1;
};

// Cross-entropy SGD-momentum on the compact network (the only stage that
// consumes labels). Returns the test error in percent after each epoch.
std::vector<double> finetune(Network& net, const ImageSet& train, const ImageSet& test,
                             const FinetuneConfig& cfg);

}  // namespace gal
