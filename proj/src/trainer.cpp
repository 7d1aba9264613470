#include "gal/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gal/errors.hpp"

namespace gal {

const char* to_string(MaskOptimizer opt) {
  return opt == MaskOptimizer::Fista ? "fista" : "sgd";
}

double EtaSchedule::at_epoch(int epoch) const {
  return base * std::pow(decay, epoch / every_epochs);
}

void TrainConfig::check() const {
  if (lambda < 0) throw ConfigError("config: lambda must be nonnegative");
  if (d_steps < 1 || g_steps < 1) throw ConfigError("config: step counts must be at least 1");
  if (batch < 1) throw ConfigError("config: batch size must be positive");
  if (max_iterations < 0) throw ConfigError("config: negative iteration budget");
  if (eta.base <= 0 || eta.decay <= 0 || eta.every_epochs < 1)
    throw ConfigError("config: learning-rate schedule must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("config: momentum must be in [0,1)");
  if (weight_decay < 0) throw ConfigError("config: weight decay must be nonnegative");
  if (dropout < 0 || dropout >= 1) throw ConfigError("config: dropout rate must be in [0,1)");
  if (d_reg_coeff < 0) throw ConfigError("config: regularizer coefficient must be nonnegative");
}

std::string metrics_csv_header() {
  return "iteration,epoch,adversarial,data,mask_l1,weight_l2,d_reg,d_accuracy,exact_zero_count,eta";
}

std::string metrics_csv_row(const MetricsRow& row) {
  char buf[320];
  std::snprintf(buf, sizeof buf, "%lld,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g",
                static_cast<long long>(row.iteration), row.epoch, row.loss.adversarial,
                row.loss.data, row.loss.mask_l1, row.loss.weight_l2, row.loss.d_reg,
                row.d_accuracy, row.exact_zero_count, row.eta);
  return buf;
}

DStepOutcome discriminator_step(Discriminator& d, const Tensor& fb, const Tensor& fg,
                                const TrainConfig& cfg, double eta) {
  Graph g;
  ValueId vb = g.constant(fb, "fb");
  ValueId vf = g.constant(fg, "fg");
  BoundDiscriminator bd = bind_discriminator(g, d, true);
  ValueId pr = discriminate(g, bd, vb);
  ValueId pf = discriminate(g, bd, vf);
  ValueId objective = adversarial_loss(g, pr, pf);
  if (cfg.d_reg == DRegKind::Adversarial && cfg.d_reg_coeff != 0)
    objective = g.add(objective, g.affine(adversarial_regularizer(g, pf), cfg.d_reg_coeff, 0.0));

  DStepOutcome out;
  out.adversarial = g.value(adversarial_loss(g, pr, pf))[0];
  out.d_reg = cfg.d_reg_coeff * d_regularizer_value(cfg.d_reg, g.value(pf), d.params);
  const auto& real = g.value(pr);
  const auto& fake = g.value(pf);
  int correct = 0;
  for (int64_t i = 0; i < real.size(); ++i) correct += real[i] > 0.5;
  for (int64_t i = 0; i < fake.size(); ++i) correct += fake[i] <= 0.5;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(real.size() + fake.size());

  // Ascent on the objective, run as descent on its negation.
  g.backward(g.affine(objective, -1.0, 0.0));
  for (auto& p : d.params) {
    auto grad = p.tensor.grad();
    auto& w = p.tensor;
    for (int64_t i = 0; i < w.size(); ++i) {
      double gi = grad[i];
      if (cfg.d_reg == DRegKind::NegL1)
        gi += cfg.d_reg_coeff * ((w[i] > 0.0) - (w[i] < 0.0));
      else if (cfg.d_reg == DRegKind::NegL2)
        gi += cfg.d_reg_coeff * w[i];
      w[i] -= eta * gi;
    }
  }
  return out;
}

namespace {

// Shared by the generator's two passes: masked noisy forward, judge verdict,
// fool + alignment objective. mask_values is bound trainably when the caller
// asks for mask gradients, the weights the other way around.
struct GeneratorPass {
  Graph g;
  ValueId fool = -1;
  ValueId data = -1;
  ValueId objective = -1;
};

void run_generator_pass(GeneratorPass& pass, Network& net, const SoftMask& mask,
                        Discriminator& d, const Tensor& fb, const Tensor& x,
                        const TrainConfig& cfg, Rng& noise, bool params_trainable,
                        bool mask_trainable) {
  Graph& g = pass.g;
  ForwardOptions opt;
  opt.mask = &mask;
  opt.dropout_rate = cfg.dropout;
  opt.noise_active = cfg.dropout > 0;
  opt.noise_rng = &noise;
  opt.params_trainable = params_trainable;
  opt.mask_trainable = mask_trainable;
  ForwardHandles h = build_forward(g, net, g.constant(x, "x"), opt);
  BoundDiscriminator bd = bind_discriminator(g, d, false);
  ValueId pf = discriminate(g, bd, h.logits);
  pass.fool = generator_fool_loss(g, pf);
  pass.data = data_alignment_loss(g, g.constant(fb, "fb"), h.logits);
  pass.objective = g.add(pass.fool, pass.data);
}

}  // namespace

GStepOutcome generator_step(MaskedNetwork& net, Discriminator& d, const Tensor& fb,
                            const Tensor& x, const TrainConfig& cfg, double eta,
                            TrainerState& st, Rng& noise) {
  GStepOutcome out;
  {
    GeneratorPass pass;
    run_generator_pass(pass, net.net, net.mask, d, fb, x, cfg, noise, true, false);
    out.adversarial_fool = pass.g.value(pass.fool)[0];
    out.data = pass.g.value(pass.data)[0];
    pass.g.backward(pass.objective);
    if (st.g_velocity.size() != net.net.params.size()) {
      st.g_velocity.clear();
      for (const auto& p : net.net.params) st.g_velocity.push_back(Tensor::zeros(p.tensor.shape()));
    }
    for (size_t i = 0; i < net.net.params.size(); ++i)
      sgd_momentum_step(net.net.params[i].tensor, net.net.params[i].tensor.grad(),
                        st.g_velocity[i], eta, cfg.momentum, cfg.weight_decay);
  }

  if (net.mask.size() == 0) return out;

  auto smooth_grad = [&](const Tensor& at, Tensor& grad) {
    SoftMask probe;
    probe.values = at;
    probe.sites = net.mask.sites;
    GeneratorPass pass;
    run_generator_pass(pass, net.net, probe, d, fb, x, cfg, noise, false, true);
    pass.g.backward(pass.objective);
    auto gr = probe.values.grad();
    std::copy(gr.begin(), gr.end(), grad.values().begin());
  };
  if (cfg.mask_opt == MaskOptimizer::Fista) {
    fista_step(st.fista, net.mask.values, smooth_grad, eta, cfg.lambda);
  } else {
    Tensor grad = Tensor::zeros(net.mask.values.shape());
    smooth_grad(net.mask.values, grad);
    sgd_mask_step(net.mask.values, grad, st.mask_velocity, eta, cfg.momentum, cfg.lambda);
  }
  return out;
}

double generator_smooth_objective(const MaskedNetwork& net, const Discriminator& d,
                                  const Tensor& fb, const Tensor& x,
                                  const TrainConfig& cfg, Rng& noise) {
  GeneratorPass pass;
  // Evaluation-only traversal; nothing is bound trainably or mutated.
  auto& mn = const_cast<MaskedNetwork&>(net);
  run_generator_pass(pass, mn.net, mn.mask, const_cast<Discriminator&>(d), fb, x, cfg, noise,
                     false, false);
  return pass.g.value(pass.objective)[0] + cfg.weight_decay * half_sq_norm(net.net.params);
}

GalRun train_gal(const Network& baseline, MaskedNetwork net, Discriminator d,
                 const Tensor& train_images, const TrainConfig& cfg, const MetricsSink& sink,
                 TrainerState resume) {
  cfg.check();
  if (d.in_features != baseline.spec.classes)
    throw ConfigError("train_gal: judge reads " + std::to_string(d.in_features) +
                      " features but the network emits " + std::to_string(baseline.spec.classes));
  if (resume.iteration < 0) throw ConfigError("train_gal: negative resume iteration");
  BatchSchedule dstream(train_images, cfg.batch, derive_seed(cfg.seed, {tag("dstream")}));
  BatchSchedule gstream(train_images, cfg.batch, derive_seed(cfg.seed, {tag("gstream")}));

  const int64_t start = resume.iteration;
  GalRun run{std::move(net), std::move(d), std::move(resume)};
  int64_t d_count = start * cfg.d_steps, g_count = start * cfg.g_steps;
  for (int64_t t = start; t < cfg.max_iterations; ++t) {
    const int epoch = static_cast<int>(g_count / gstream.batches_per_pass());
    MetricsRow row;
    row.iteration = t + 1;
    row.epoch = epoch;
    row.eta = cfg.eta.at_epoch(epoch);
    try {
      DStepOutcome dout;
      for (int s = 0; s < cfg.d_steps; ++s) {
        Tensor xb = dstream.batch(d_count++);
        Tensor fb = forward_eval(baseline, xb);
        Tensor fg = forward_eval(run.net, xb);
        dout = discriminator_step(run.d, fb, fg, cfg, row.eta);
      }
      GStepOutcome gout;
      for (int s = 0; s < cfg.g_steps; ++s) {
        Tensor xb = gstream.batch(g_count);
        Tensor fb = forward_eval(baseline, xb);
        Rng noise(derive_seed(cfg.seed, {tag("noise"), static_cast<uint64_t>(g_count)}));
        gout = generator_step(run.net, run.d, fb, xb, cfg, row.eta, run.state, noise);
        ++g_count;
      }
      row.loss.adversarial = dout.adversarial;
      row.loss.d_reg = dout.d_reg;
      row.d_accuracy = dout.accuracy;
      row.loss.data = gout.data;
    } catch (const std::domain_error& err) {
      throw NumericalError("iteration " + std::to_string(t + 1) + ": " + err.what());
    }
    double l1 = 0;
    for (auto v : run.net.mask.values.values()) l1 += std::fabs(v);
    row.loss.mask_l1 = cfg.lambda * l1;
    row.loss.weight_l2 = cfg.weight_decay * half_sq_norm(run.net.net.params);
    row.exact_zero_count = run.net.mask.zeros();
    const double probes[] = {row.loss.adversarial, row.loss.data, row.loss.mask_l1,
                             row.loss.weight_l2, row.loss.d_reg};
    for (double v : probes)
      if (!std::isfinite(v))
        throw NumericalError("iteration " + std::to_string(t + 1) + ": loss diverged (" +
                             metrics_csv_row(row) + ")");
    run.state.iteration = t + 1;
    run.state.history.push_back(row);
    if (sink) sink(row);
  }
  return run;
}

double train_supervised(Network& net, const ImageSet& data, const SupervisedConfig& cfg,
                        const std::function<void(int, double)>& after_epoch) {
  if (data.labels.size() != static_cast<size_t>(data.images.dim(0)))
    throw DataError("supervised training needs one label per image");
  if (cfg.epochs < 0) throw ConfigError("config: negative epoch count");
  BatchSchedule stream(data.images, cfg.batch, derive_seed(cfg.seed, {tag("sup")}));
  std::vector<Tensor> velocity;
  for (const auto& p : net.params) velocity.push_back(Tensor::zeros(p.tensor.shape()));
  std::vector<int> labels(static_cast<size_t>(cfg.batch));
  double epoch_loss = 0;
  int64_t b = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    const double eta = cfg.eta.at_epoch(e);
    double acc = 0;
    for (int k = 0; k < stream.batches_per_pass(); ++k, ++b) {
      {
        const std::vector<int>& rows = stream.rows(b);
        for (int i = 0; i < cfg.batch; ++i) labels[static_cast<size_t>(i)] = data.labels[static_cast<size_t>(rows[static_cast<size_t>(i)])];
      }
      Tensor xb = stream.batch(b);
      Graph g;
      ForwardOptions opt;
      opt.params_trainable = true;
      ForwardHandles h = build_forward(g, net, g.constant(xb, "x"), opt);
      ValueId loss = g.cross_entropy(h.logits, labels);
      acc += g.value(loss)[0];
      g.backward(loss);
      for (size_t i = 0; i < net.params.size(); ++i)
        sgd_momentum_step(net.params[i].tensor, net.params[i].tensor.grad(), velocity[i], eta,
                          cfg.momentum, cfg.weight_decay);
    }
    epoch_loss = acc / stream.batches_per_pass();
    if (!std::isfinite(epoch_loss))
      throw NumericalError("supervised epoch " + std::to_string(e) + ": loss diverged");
    if (after_epoch) after_epoch(e, epoch_loss);
  }
  return epoch_loss;
}

double evaluate_error(const Network& net, const ImageSet& data) {
  if (data.labels.size() != static_cast<size_t>(data.images.dim(0)))
    throw DataError("error evaluation needs one label per image");
  Tensor logits = forward_eval(net, data.images);
  const int n = logits.dim(0), k = logits.dim(1);
  int wrong = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    wrong += best != data.labels[static_cast<size_t>(i)];
  }
  return 100.0 * wrong / n;
}

}  // namespace gal
