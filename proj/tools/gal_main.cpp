#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "gal/architecture.hpp"
#include "gal/checkpoint.hpp"
#include "gal/errors.hpp"
#include "gal/mnist.hpp"
#include "gal/network.hpp"
#include "gal/pruner.hpp"
#include "gal/runconfig.hpp"
#include "gal/synth.hpp"
#include "gal/trainer.hpp"

namespace fs = std::filesystem;
using namespace gal;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  uint64_t seed = 0;
  bool seed_given = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "run configuration JSON");
    cmd->add_option("--out", out, "output directory (overrides the config)");
    auto* opt = cmd->add_option("--seed", seed, "stream seed (overrides the config)");
    cmd->parse_complete_callback([this, opt] { seed_given = opt->count() > 0; });
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_runconfig(config);
    if (!out.empty()) c.out_dir = out;
    if (seed_given) c.reseed(seed);
    return c;
  }
};

fs::path ensure_out(const RunConfig& c) {
  fs::path dir(c.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

// Every stage writes the fully-resolved config it actually ran with.
void echo_config(const RunConfig& c, const fs::path& dir) {
  const fs::path p = dir / "config.json";
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << to_json(c).dump(2) << "\n";
}

ImageSet need_train(const RunConfig& c) {
  if (c.data.train_images.empty() || c.data.train_labels.empty())
    throw DataError("config names no training data (data.train_images / data.train_labels)");
  return load_mnist_idx(c.data.train_images, c.data.train_labels);
}

std::optional<ImageSet> maybe_test(const RunConfig& c) {
  if (c.data.test_images.empty() || c.data.test_labels.empty()) return std::nullopt;
  return load_mnist_idx(c.data.test_images, c.data.test_labels);
}

ImageSet need_test(const RunConfig& c) {
  auto t = maybe_test(c);
  if (!t) throw DataError("config names no test data (data.test_images / data.test_labels)");
  return std::move(*t);
}

void check_input_shape(const ArchitectureSpec& spec, const Tensor& images, const std::string& what) {
  if (images.dim(1) != spec.input_chw[0] || images.dim(2) != spec.input_chw[1] ||
      images.dim(3) != spec.input_chw[2])
    throw DataError(what + " is " + std::to_string(images.dim(1)) + "x" +
                    std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                    " but the architecture reads " + std::to_string(spec.input_chw[0]) + "x" +
                    std::to_string(spec.input_chw[1]) + "x" + std::to_string(spec.input_chw[2]));
}

Tensor probe_rows(const Tensor& images, int want) {
  const int n = std::min<int>(static_cast<int>(images.dim(0)), want);
  Tensor out({n, static_cast<int>(images.dim(1)), static_cast<int>(images.dim(2)),
              static_cast<int>(images.dim(3))});
  const int64_t row = images.size() / images.dim(0);
  for (int64_t i = 0; i < n * row; ++i) out[i] = images[i];
  return out;
}

// Test error of whatever a checkpoint holds; a masked network is folded into
// its equivalent plain form first.
double checkpoint_error(const Checkpoint& ck, const ImageSet& test) {
  if (ck.kind == CheckpointKind::Masked) {
    Network plain = compact(ck.masked(), std::vector<PrunedStructure>{});
    return evaluate_error(plain, test);
  }
  return evaluate_error(ck.net, test);
}

std::string join_widths(const std::vector<int>& widths) {
  if (widths.empty()) return "-";
  std::string s;
  for (size_t i = 0; i < widths.size(); ++i) {
    if (i) s += "-";
    s += std::to_string(widths[i]);
  }
  return s;
}

// --- subcommands -------------------------------------------------------------

int cmd_synth(const std::string& out_dir, int train_n, int test_n, uint64_t seed, int side,
              double noise) {
  fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string() + ": " + ec.message());
  SynthOptions opt;
  opt.side = side;
  opt.noise = noise;
  const ImageSet train = synth_digits(train_n, derive_seed(seed, {tag("train")}), opt);
  const ImageSet test = synth_digits(test_n, derive_seed(seed, {tag("test")}), opt);
  const fs::path ti = dir / "train-images-idx3-ubyte", tl = dir / "train-labels-idx1-ubyte";
  const fs::path vi = dir / "t10k-images-idx3-ubyte", vl = dir / "t10k-labels-idx1-ubyte";
  save_mnist_idx(train, ti.string(), tl.string());
  save_mnist_idx(test, vi.string(), vl.string());
  std::cout << "wrote " << train_n << " train / " << test_n << " test images\n"
            << ti.string() << "\n" << tl.string() << "\n" << vi.string() << "\n" << vl.string()
            << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  RunConfig c = args.resolve();
  const fs::path dir = ensure_out(c);
  echo_config(c, dir);
  const ImageSet train = need_train(c);
  const ArchitectureSpec spec = build_architecture(c.arch);
  check_input_shape(spec, train.images, "training data");

  Network net = init_network(spec, derive_seed(c.seed, {tag("init")}));
  train_supervised(net, train, c.pretrain, [](int epoch, double loss) {
    std::cout << "epoch " << (epoch + 1) << "  train loss " << loss << "\n";
  });
  if (auto test = maybe_test(c)) {
    check_input_shape(spec, test->images, "test data");
    std::cout << "test error " << evaluate_error(net, *test) << "%\n";
  }

  Checkpoint ck;
  ck.kind = CheckpointKind::Baseline;
  ck.seed = c.seed;
  ck.net = std::move(net);
  const fs::path p = dir / "baseline.ckpt";
  save_checkpoint(ck, p.string());
  std::cout << "saved " << p.string() << "\n";
  return 0;
}

int cmd_prune(const CommonArgs& args, const std::string& checkpoint, const std::string& resume) {
  RunConfig c = args.resolve();
  const fs::path dir = ensure_out(c);
  echo_config(c, dir);
  const ImageSet train = need_train(c);

  Checkpoint base = load_checkpoint(checkpoint);
  if (base.kind != CheckpointKind::Baseline)
    throw ConfigError("prune starts from a baseline checkpoint, got " +
                      std::string(to_string(base.kind)));
  check_input_shape(base.net.spec, train.images, "training data");

  MaskedNetwork mn;
  Discriminator judge;
  TrainerState state;
  if (resume.empty()) {
    mn = attach_masks(base.net, c.structures, derive_seed(c.seed, {tag("mask")}));
    judge = init_discriminator(base.net.spec.classes, derive_seed(c.seed, {tag("judge")}));
  } else {
    Checkpoint prev = load_checkpoint(resume);
    if (prev.kind != CheckpointKind::Masked)
      throw ConfigError("--resume needs a masked checkpoint, got " +
                        std::string(to_string(prev.kind)));
    if (!(prev.net.spec == base.net.spec))
      throw ConfigError("--resume checkpoint was trained on a different architecture");
    mn = prev.masked();
    judge = std::move(prev.judge);
    state = std::move(prev.state);
  }

  TrainConfig cfg = c.gal;
  if (cfg.max_iterations == 0) {
    const int per_pass = static_cast<int>(train.images.dim(0)) / cfg.batch;
    if (per_pass == 0)
      throw ConfigError("batch " + std::to_string(cfg.batch) + " exceeds the training set (" +
                        std::to_string(train.images.dim(0)) + " images)");
    cfg.max_iterations = static_cast<int64_t>(c.gal_epochs) * per_pass;
  }
  if (state.iteration >= cfg.max_iterations)
    throw ConfigError("resume checkpoint is already at iteration " +
                      std::to_string(state.iteration) + " of " +
                      std::to_string(cfg.max_iterations));

  const fs::path mpath = dir / "metrics.csv";
  std::ofstream metrics(mpath, std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + mpath.string());
  metrics << metrics_csv_header() << "\n";
  const int64_t total = cfg.max_iterations;
  const int64_t stride = std::max<int64_t>(1, (total - state.iteration) / 10);
  MetricsSink sink = [&](const MetricsRow& row) {
    metrics << metrics_csv_row(row) << "\n";
    metrics.flush();
    if (row.iteration % stride == 0 || row.iteration == total)
      std::cout << "iter " << row.iteration << "/" << total << "  data " << row.loss.data
                << "  l1 " << row.loss.mask_l1 << "  zeros " << row.exact_zero_count << "\n";
  };
  GalRun run =
      train_gal(base.net, std::move(mn), std::move(judge), train.images, cfg, sink, std::move(state));

  Checkpoint ck;
  ck.kind = CheckpointKind::Masked;
  ck.iteration = run.state.iteration;
  ck.seed = c.seed;
  ck.net = std::move(run.net.net);
  ck.mask = std::move(run.net.mask);
  ck.dropout_rate = run.net.dropout_rate;
  ck.judge = std::move(run.d);
  ck.state = std::move(run.state);
  ck.state.history.clear();
  const fs::path p = dir / "masked.ckpt";
  save_checkpoint(ck, p.string());
  std::cout << "mask entries " << ck.mask.size() << ", exact zeros " << ck.mask.zeros() << "\n"
            << "saved " << p.string() << " and " << mpath.string() << "\n";
  return 0;
}

int cmd_compact(const CommonArgs& args, const std::string& checkpoint) {
  RunConfig c = args.resolve();
  const fs::path dir = ensure_out(c);
  Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.kind != CheckpointKind::Masked)
    throw ConfigError("compact needs a masked checkpoint, got " + std::string(to_string(ck.kind)));
  MaskedNetwork mn = ck.masked();

  PruneReport report;
  report.threshold = c.prune_threshold;
  report.lambda = c.gal.lambda;
  report.removed = extract_prunable(mn, c.prune_threshold);
  report.cost_before = count_cost(mn.net.spec);
  report.widths_before = trainable_widths(mn.net.spec);

  Network net = compact(mn, report.removed);
  report.cost_after = count_cost(net.spec);
  report.widths_after = trainable_widths(net.spec);

  std::optional<ImageSet> probe_source = maybe_test(c);
  if (!probe_source && !c.data.train_images.empty() && !c.data.train_labels.empty())
    probe_source = load_mnist_idx(c.data.train_images, c.data.train_labels);
  if (probe_source) {
    check_input_shape(net.spec, probe_source->images, "probe data");
    report.equivalence_residual = max_logit_gap(mn, net, probe_rows(probe_source->images, 256));
  }
  if (auto test = maybe_test(c)) report.error_before = evaluate_error(net, *test);

  const fs::path rpath = dir / "prune_report.json";
  std::ofstream rout(rpath, std::ios::trunc);
  if (!rout) throw DataError("cannot write " + rpath.string());
  rout << to_json(report).dump(2) << "\n";

  Checkpoint out;
  out.kind = CheckpointKind::Compact;
  out.seed = c.seed;
  out.net = std::move(net);
  const fs::path p = dir / "compact.ckpt";
  save_checkpoint(out, p.string());
  std::cout << "removed " << report.removed.size() << " structures; flops "
            << format_millions(report.cost_before.flops) << " -> "
            << format_millions(report.cost_after.flops) << " "
            << format_reduction(report.cost_before.flops, report.cost_after.flops) << "\n"
            << "saved " << p.string() << " and " << rpath.string() << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& checkpoint) {
  RunConfig c = args.resolve();
  const fs::path dir = ensure_out(c);
  echo_config(c, dir);
  Checkpoint ck = load_checkpoint(checkpoint);
  if (ck.kind == CheckpointKind::Masked)
    throw ConfigError("finetune needs a plain (baseline or compact) checkpoint; compact it first");
  const ImageSet train = need_train(c);
  const ImageSet test = need_test(c);
  check_input_shape(ck.net.spec, train.images, "training data");
  check_input_shape(ck.net.spec, test.images, "test data");

  const fs::path hpath = dir / "finetune.csv";
  std::ofstream hist(hpath, std::ios::trunc);
  if (!hist) throw DataError("cannot write " + hpath.string());
  hist << "epoch,test_error_percent\n";
  std::vector<double> errors = finetune(ck.net, train, test, c.finetune);
  for (size_t i = 0; i < errors.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.17g", i + 1, errors[i]);
    hist << buf << "\n";
    std::cout << "epoch " << (i + 1) << "  test error " << errors[i] << "%\n";
  }

  const fs::path p = dir / "finetuned.ckpt";
  save_checkpoint(ck, p.string());
  std::cout << "saved " << p.string() << " and " << hpath.string() << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
  RunConfig c = args.resolve();
  Checkpoint ck = load_checkpoint(checkpoint);
  const ImageSet test = need_test(c);
  check_input_shape(ck.net.spec, test.images, "test data");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", checkpoint_error(ck, test));
  std::cout << "test error " << buf << "% (" << test.images.dim(0) << " images, "
            << to_string(ck.kind) << " checkpoint)\n";
  return 0;
}

int cmd_report(const CommonArgs& args, const std::string& checkpoint, const std::string& baseline) {
  RunConfig c = args.resolve();
  Checkpoint ck = load_checkpoint(checkpoint);
  const CostReport cost = count_cost(ck.net.spec);

  std::string flops_pr = "(-)", params_pr = "(-)";
  if (!baseline.empty()) {
    Checkpoint base = load_checkpoint(baseline);
    const CostReport bc = count_cost(base.net.spec);
    flops_pr = format_reduction(bc.flops, cost.flops);
    params_pr = format_reduction(bc.params, cost.params);
  }
  std::string err = "-";
  if (auto test = maybe_test(c)) {
    check_input_shape(ck.net.spec, test->images, "test data");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f%%", checkpoint_error(ck, *test));
    err = buf;
  }
  std::cout << to_string(ck.kind) << "  error " << err << "  flops "
            << format_millions(cost.flops) << " " << flops_pr << "  params "
            << format_millions(cost.params) << " " << params_pr << "  widths "
            << join_widths(trainable_widths(ck.net.spec)) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"structured pruning of small convolutional nets via a masked generator game"};
  app.require_subcommand(1);

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "generate a deterministic digit dataset as IDX files");
  std::string synth_out = ".";
  int synth_train = 12000, synth_test = 2000, synth_side = 28;
  uint64_t synth_seed = 1;
  double synth_noise = 0.04;
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--train", synth_train, "training sample count");
  synth->add_option("--test", synth_test, "test sample count");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--side", synth_side, "image side in pixels");
  synth->add_option("--noise", synth_noise, "pixel noise stddev");
  std::string synth_config_unused;
  synth->add_option("--config", synth_config_unused, "ignored; accepted for flag parity")->group("");

  CommonArgs pretrain_args, prune_args, compact_args, finetune_args, eval_args, report_args;
  std::string prune_ckpt, prune_resume, compact_ckpt, finetune_ckpt, eval_ckpt, report_ckpt;
  std::string report_baseline;

  auto* pretrain = app.add_subcommand("pretrain", "train the baseline with labels, save a checkpoint");
  pretrain_args.attach(pretrain);

  auto* prune = app.add_subcommand("prune", "learn the sparse mask against the baseline (no labels)");
  prune_args.attach(prune);
  prune->add_option("--checkpoint", prune_ckpt, "baseline checkpoint")->required();
  prune->add_option("--resume", prune_resume, "masked checkpoint to continue from");

  auto* compact = app.add_subcommand("compact", "remove zeroed structures, write the compact model");
  compact_args.attach(compact);
  compact->add_option("--checkpoint", compact_ckpt, "masked checkpoint")->required();

  auto* finetune = app.add_subcommand("finetune", "recover accuracy of a compact model with labels");
  finetune_args.attach(finetune);
  finetune->add_option("--checkpoint", finetune_ckpt, "compact checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "test error of any checkpoint");
  eval_args.attach(eval);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint to evaluate")->required();

  auto* report = app.add_subcommand("report", "one-line cost/width/error summary of a checkpoint");
  report_args.attach(report);
  report->add_option("--checkpoint", report_ckpt, "checkpoint to summarize")->required();
  report->add_option("--baseline", report_baseline, "baseline checkpoint for reduction percentages");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed())
      return cmd_synth(synth_out, synth_train, synth_test, synth_seed, synth_side, synth_noise);
    if (pretrain->parsed()) return cmd_pretrain(pretrain_args);
    if (prune->parsed()) return cmd_prune(prune_args, prune_ckpt, prune_resume);
    if (compact->parsed()) return cmd_compact(compact_args, compact_ckpt);
    if (finetune->parsed()) return cmd_finetune(finetune_args, finetune_ckpt);
    if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt);
    if (report->parsed()) return cmd_report(report_args, report_ckpt, report_baseline);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
