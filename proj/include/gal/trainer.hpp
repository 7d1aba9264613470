#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gal/data.hpp"
#include "gal/discriminator.hpp"
#include "gal/fista.hpp"
#include "gal/losses.hpp"
#include "gal/network.hpp"

namespace gal {

enum class MaskOptimizer { Fista, Sgd };
const char* to_string(MaskOptimizer opt);

// Step-decay learning rate: base * decay^(epoch / every_epochs).
struct EtaSchedule {
  double base = 1e-3;
  double decay = 0.1;
  int every_epochs = 40;
  double at_epoch(int epoch) const;
};

struct TrainConfig {
  double lambda = 0.05;          // mask sparsity strength
  EtaSchedule eta;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  int batch = 128;
  int d_steps = 1;               // judge updates per iteration
  int g_steps = 1;               // generator updates per iteration
  int64_t max_iterations = 0;
  double dropout = 0.1;          // generator noise, active during G updates only
  DRegKind d_reg = DRegKind::Adversarial;
  double d_reg_coeff = 1.0;
  MaskOptimizer mask_opt = MaskOptimizer::Fista;
  uint64_t seed = 1;

  void check() const;  // throws ConfigError on out-of-range fields
};

struct LossBreakdown {
  double adversarial = 0;  // game value, both terms
  double data = 0;         // feature alignment
  double mask_l1 = 0;      // lambda * |m|_1 after the step
  double weight_l2 = 0;    // wd * 0.5 * |W_G|^2 after the step
  double d_reg = 0;        // coeff * judge regularizer value
};

struct MetricsRow {
  int64_t iteration = 0;  // 1-based; emitted after the iteration completes
  int epoch = 0;
  LossBreakdown loss;
  double d_accuracy = 0;
  int exact_zero_count = 0;
  double eta = 0;
};

// CSV with %.17g doubles, so text metrics round-trip bit for bit.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

struct TrainerState {
  int64_t iteration = 0;          // completed iterations
  std::vector<Tensor> g_velocity; // one per generator parameter
  FistaState fista;
  Tensor mask_velocity;           // SGD mask path only
  std::vector<MetricsRow> history;
};

struct DStepOutcome {
  double adversarial = 0;
  double d_reg = 0;
  double accuracy = 0;
};

// One ascent step of the judge on precomputed feature batches (both produced
// without generator noise). Plain SGD; the neg-l1/neg-l2 regularizers enter
// as analytic gradient terms.
DStepOutcome discriminator_step(Discriminator& d, const Tensor& fb, const Tensor& fg,
                                const TrainConfig& cfg, double eta);

struct GStepOutcome {
  double adversarial_fool = 0;  // mean log(1 - D(fg)) from the weight pass
  double data = 0;
};

// One generator update against a frozen judge: first SGD-momentum on the
// weights with noise active, then one mask step (accelerated proximal, or the
// momentum-subgradient ablation path). Both passes draw noise from `noise`.
GStepOutcome generator_step(MaskedNetwork& net, Discriminator& d, const Tensor& fb,
                            const Tensor& x, const TrainConfig& cfg, double eta,
                            TrainerState& st, Rng& noise);

// Smooth generator objective: mean log(1-D(fg)) + (1/2n)|fb-fg|^2
// + wd*0.5*|W_G|^2, with noise drawn from `noise`. The l1 term is excluded
// (it belongs to the proximal map).
double generator_smooth_objective(const MaskedNetwork& net, const Discriminator& d,
                                  const Tensor& fb, const Tensor& x,
                                  const TrainConfig& cfg, Rng& noise);

using MetricsSink = std::function<void(const MetricsRow&)>;

struct GalRun {
  MaskedNetwork net;
  Discriminator d;
  TrainerState state;
};

// Alternates d_steps judge updates and g_steps generator updates until
// max_iterations total, emitting one metrics row per iteration. Consumes
// images only; the API carries no labels. Any non-finite loss aborts with
// NumericalError naming the iteration and term. Passing a `resume` state
// continues at resume.iteration: every stream is derived from (seed, counter),
// so a resumed run is bitwise identical to an uninterrupted one.
GalRun train_gal(const Network& baseline, MaskedNetwork net, Discriminator d,
                 const Tensor& train_images, const TrainConfig& cfg,
                 const MetricsSink& sink = {}, TrainerState resume = {});

// --- label-consuming side, used before and after mask learning -------------

struct SupervisedConfig {
  EtaSchedule eta;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  int batch = 128;
  int epochs = 1;
  uint64_t seed = 1;
};

// Cross-entropy SGD-momentum training. Returns mean training loss of the
// final epoch. `after_epoch(e, mean_loss)` runs once per completed epoch.
double train_supervised(Network& net, const ImageSet& data, const SupervisedConfig& cfg,
                        const std::function<void(int, double)>& after_epoch = {});

// Top-1 error in percent.
double evaluate_error(const Network& net, const ImageSet& data);

}  // namespace gal
