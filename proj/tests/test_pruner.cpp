#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "gal/architecture.hpp"
#include "gal/errors.hpp"
#include "gal/network.hpp"
#include "gal/pruner.hpp"
#include "gal/rng.hpp"
#include "oracles.hpp"

using namespace gal;

namespace {

bool same_network(const Network& a, const Network& b) {
  if (!(a.spec == b.spec)) return false;
  if (a.params.size() != b.params.size()) return false;
  for (size_t i = 0; i < a.params.size(); ++i) {
    if (a.params[i].name != b.params[i].name) return false;
    if (!a.params[i].tensor.same_shape(b.params[i].tensor)) return false;
    for (int64_t j = 0; j < a.params[i].tensor.size(); ++j)
      if (a.params[i].tensor[j] != b.params[i].tensor[j]) return false;
  }
  return true;
}

Tensor probes_for(const ArchitectureSpec& spec, int n, Rng& rng) {
  return oracle::random_tensor({n, spec.input_chw[0], spec.input_chw[1], spec.input_chw[2]}, rng);
}

// Random mask values with a forced share of exact zeros, leaving at least one
// survivor per channel window and one surviving branch per module so the net
// stays non-degenerate.
void randomize_mask(SoftMask& mask, double zero_fraction, Rng& rng) {
  for (auto& v : mask.values.values()) {
    v = rng.normal();
    if (rng.uniform() < zero_fraction) v = 0.0;
  }
  for (const auto& s : mask.sites) {
    if (s.kind != StructureKind::Channel) continue;
    bool alive = false;
    for (int e = 0; e < s.count; ++e) alive = alive || mask.values[s.offset + e] != 0.0;
    if (!alive) mask.values[s.offset + rng.below(s.count)] = rng.normal();
  }
  std::map<int, std::pair<int, bool>> modules;  // layer -> (a slot offset, any alive)
  for (const auto& s : mask.sites) {
    if (s.kind != StructureKind::Branch) continue;
    auto [it, fresh] = modules.try_emplace(s.layer, s.offset, false);
    (void)fresh;
    it->second.second = it->second.second || mask.values[s.offset] != 0.0;
    if (mask.values[s.offset] == 0.0) it->second.first = s.offset;
  }
  for (auto& [layer, state] : modules)
    if (!state.second) mask.values[state.first] = rng.normal();
}

}  // namespace

TEST_CASE("extract_prunable lists entries at or below the threshold") {
  Network net = init_network(build_lenet({4, 6, 30}), 5);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 6);
  for (auto& v : mn.mask.values.values()) v = 1.0;
  CHECK(extract_prunable(mn).empty());

  mn.mask.values[0] = 0.0;
  mn.mask.values[2] = 0.0;
  auto listed = extract_prunable(mn, 0.0);
  REQUIRE(listed.size() == 2);
  CHECK(listed[0].index == 0);
  CHECK(listed[1].index == 2);
  CHECK(listed[0].kind == StructureKind::Channel);
  CHECK(listed[0].layer == 2);
  CHECK(listed[0].value == 0.0);

  // the SGD ablation path never reaches exact zeros; it prunes at 1e-4
  mn.mask.values[5] = 8e-5;
  mn.mask.values[7] = -3e-5;
  auto thresholded = extract_prunable(mn, 1e-4);
  CHECK(thresholded.size() == 4);
  CHECK(extract_prunable(mn, 0.0).size() == 2);
  CHECK_THROWS_AS(extract_prunable(mn, -1e-9), ConfigError);
}

TEST_CASE("pruned input channels shrink the producing convolution") {
  // Channels 0 and 3 of the second conv's input disappear, so the first conv
  // keeps 18 of its 20 filters and the survivors' scales fold into the
  // consumer slices.
  Network net = init_network(build_lenet({20, 50, 500}), 11);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 12);
  mn.mask.values[0] = 0.0;
  mn.mask.values[3] = 0.0;
  Network compacted = compact(mn);

  CHECK(std::get<ConvLayer>(compacted.spec.layers[0]).out_channels == 18);
  CHECK(compacted.find("L0.w")->shape() == std::vector<int>{18, 1, 5, 5});
  CHECK(compacted.find("L0.b")->shape() == std::vector<int>{18});
  CHECK(compacted.find("L2.w")->shape() == std::vector<int>{50, 18, 5, 5});
  CHECK(std::get<ConvLayer>(compacted.spec.layers[2]).in_index.empty());

  // surviving filter rows are the original ones; consumer slices carry m
  const Tensor& w0 = *net.find("L0.w");
  const Tensor& c0 = *compacted.find("L0.w");
  for (int64_t j = 0; j < 25; ++j) CHECK(c0[j] == w0[25 + j]);  // old filter 1 is now filter 0
  const Tensor& w2 = *net.find("L2.w");
  const Tensor& c2 = *compacted.find("L2.w");
  const double m1 = mn.mask.values[1];
  for (int64_t j = 0; j < 25; ++j) CHECK(c2[j] == w2[25 + j] * m1);

  Rng rng(13);
  Tensor probes = probes_for(net.spec, 32, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("zero removals keep the architecture and unit-mask weights bitwise") {
  Network net = init_network(build_lenet({6, 10, 40}), 21);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 22);
  for (auto& v : mn.mask.values.values()) v = 1.0;
  Network compacted = compact(mn, std::vector<PrunedStructure>{});
  CHECK(compacted.spec == net.spec);
  CHECK(same_network(compacted, net));
}

TEST_CASE("surviving mask values fold into consumer weights") {
  Network net = init_network(build_lenet({6, 10, 40}), 31);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 32);
  Network compacted = compact(mn, std::vector<PrunedStructure>{});
  CHECK(compacted.spec == net.spec);  // nothing removed, only folded
  Rng rng(33);
  Tensor probes = probes_for(net.spec, 24, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
  // and the fold really changed the weights (mask is not all ones)
  CHECK_FALSE(same_network(compacted, net));
}

TEST_CASE("removing a residual block splices it away at exactly its cost") {
  Network net = init_network(build_minires(3, 8), 41);
  MaskedNetwork mn = attach_masks(net, {.block = true}, 42);
  REQUIRE(mn.mask.size() == 3);
  mn.mask.values[0] = 1.0;
  mn.mask.values[1] = 0.0;  // second block dies
  mn.mask.values[2] = 1.0;
  Network compacted = compact(mn);

  CHECK(compacted.spec.layers.size() == net.spec.layers.size() - 1);
  CostReport before = count_cost(net.spec);
  CostReport after = count_cost(compacted.spec);
  CHECK(before.flops - after.flops == 64 * (8 * 9 * 8 + 8 * 9 * 8));
  // parameters renumber past the splice: the old L4 block is now L3
  CHECK(compacted.find("L3.a.w") != nullptr);
  const Tensor& old_l4 = *net.find("L4.a.w");
  const Tensor& new_l3 = *compacted.find("L3.a.w");
  REQUIRE(old_l4.same_shape(new_l3));
  for (int64_t j = 0; j < old_l4.size(); ++j) CHECK(old_l4[j] == new_l3[j]);

  Rng rng(43);
  Tensor probes = probes_for(net.spec, 32, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("surviving block scale folds into the restoring convolution") {
  Network net = init_network(build_minires(2, 6), 51);
  MaskedNetwork mn = attach_masks(net, {.block = true}, 52);
  mn.mask.values[0] = -1.75;  // negative scales fold exactly: the slot sits before the add
  mn.mask.values[1] = 0.4;
  Network compacted = compact(mn);
  CHECK(compacted.spec == net.spec);
  const Tensor& bw = *net.find("L2.b.w");
  const Tensor& cw = *compacted.find("L2.b.w");
  for (int64_t j = 0; j < bw.size(); ++j) CHECK(cw[j] == bw[j] * -1.75);
  Rng rng(53);
  Tensor probes = probes_for(net.spec, 32, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("removing a branch shrinks the concatenation and remaps consumers") {
  Network net = init_network(build_miniinception(2, 3), 61);
  MaskedNetwork mn = attach_masks(net, {.channel = true, .branch = true}, 62);
  for (auto& v : mn.mask.values.values()) v = 1.0;
  // kill module 1's conv3 branch (branch 1 of layer 3)
  for (const auto& s : mn.mask.sites)
    if (s.kind == StructureKind::Branch && s.layer == 3 && s.branch == 1) mn.mask.values[s.offset] = 0.0;
  Network compacted = compact(mn);

  const auto& m1 = std::get<InceptionModuleLayer>(compacted.spec.layers[3]);
  REQUIRE(m1.branches.size() == 2);
  CHECK(m1.branches[0].variant == BranchVariant::Conv1);
  CHECK(m1.branches[1].variant == BranchVariant::Pool);
  CHECK(compacted.find("L3.br1.w")->shape() == std::vector<int>{4, 6, 1, 1});  // the pool projection
  CHECK(compacted.find("L3.br2.w") == nullptr);
  // module 2 now reads an 8-channel stream with full slices, no selection
  const auto& m2 = std::get<InceptionModuleLayer>(compacted.spec.layers[4]);
  for (const auto& br : m2.branches) CHECK(br.in_index.empty());
  CHECK(compacted.find("L4.br0.w")->shape() == std::vector<int>{4, 8, 1, 1});

  CostReport before = count_cost(net.spec);
  CostReport after = count_cost(compacted.spec);
  CHECK(before.flops > after.flops);
  CHECK(before.params > after.params);

  Rng rng(63);
  Tensor probes = probes_for(net.spec, 32, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("negative scales survive pooled branches and pooled streams") {
  // Directed sign check: negative channel entries ahead of the pooling
  // projection and negative surviving branch slots everywhere.
  Network net = init_network(build_miniinception(2, 3), 71);
  MaskedNetwork mn = attach_masks(net, {.channel = true, .branch = true}, 72);
  Rng vals(73);
  for (auto& v : mn.mask.values.values()) v = -std::fabs(vals.normal()) - 0.1;
  Network compacted = compact(mn, std::vector<PrunedStructure>{});
  Rng rng(74);
  Tensor probes = probes_for(net.spec, 48, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("input selections appear only where the stream is shared") {
  Network net = init_network(build_minires(2, 8), 81);
  MaskedNetwork mn = attach_masks(net, {.channel = true, .block = true}, 82);
  for (auto& v : mn.mask.values.values()) v = 1.0;
  // kill two taps of the first block's input and three head features
  const AttachmentSite* tap = nullptr;
  const AttachmentSite* head = nullptr;
  for (const auto& s : mn.mask.sites) {
    if (s.kind == StructureKind::Channel && s.layer == 2 && !s.inner) tap = &s;
    if (s.kind == StructureKind::Channel && s.layer == 6) head = &s;
  }
  REQUIRE(tap != nullptr);
  REQUIRE(head != nullptr);
  mn.mask.values[tap->offset + 1] = 0.0;
  mn.mask.values[tap->offset + 3] = 0.0;
  mn.mask.values[head->offset + 0] = 0.0;
  mn.mask.values[head->offset + 5] = 0.0;
  Network compacted = compact(mn);

  const auto& block = std::get<ResidualBlockLayer>(compacted.spec.layers[2]);
  CHECK(block.in_index == std::vector<int>{0, 2, 4, 5, 6, 7});
  CHECK(compacted.find("L2.a.w")->shape() == std::vector<int>{8, 6, 3, 3});
  CHECK(compacted.find("L2.b.w")->shape() == std::vector<int>{8, 8, 3, 3});  // restores the full stream
  const auto& headl = std::get<LinearLayer>(compacted.spec.layers[6]);
  // feature groups of 16 for channels {1,2,3,4,6,7}
  REQUIRE(headl.in_index.size() == 6 * 16);
  CHECK(headl.in_index.front() == 16);
  CHECK(headl.in_index.back() == 127);
  CHECK(compacted.find("L6.w")->shape() == std::vector<int>{96, 10});

  Rng rng(83);
  Tensor probes = probes_for(net.spec, 32, rng);
  CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);
}

TEST_CASE("equivalence, monotone cost and idempotence on random masks") {
  Rng rng(91);
  int with_removals = 0, without_removals = 0;
  for (int arch = 0; arch < 3; ++arch) {
    for (int rep = 0; rep < 12; ++rep) {
      ArchitectureSpec spec = arch == 0   ? build_lenet({6, 10, 40})
                              : arch == 1 ? build_minires(2, 6)
                                          : build_miniinception(2, 3);
      StructureKinds kinds = arch == 0   ? StructureKinds{.channel = true}
                             : arch == 1 ? StructureKinds{.channel = true, .block = true}
                                         : StructureKinds{.channel = true, .branch = true};
      Network net = init_network(spec, derive_seed(92, {tag("net"), static_cast<uint64_t>(arch * 100 + rep)}));
      MaskedNetwork mn = attach_masks(net, kinds, derive_seed(93, {tag("mask"), static_cast<uint64_t>(rep)}));
      const double zero_fraction = rep == 0 ? 0.0 : 0.35;
      randomize_mask(mn.mask, zero_fraction, rng);

      // A draw can still orphan a consumer window behind a removed branch;
      // compact reports that as degenerate. Revive one zero and retry: the
      // zero count strictly decreases, so this terminates.
      Network compacted;
      for (;;) {
        try {
          compacted = compact(mn, extract_prunable(mn));
          break;
        } catch (const ConfigError&) {
          std::vector<int64_t> zeros;
          for (int64_t i = 0; i < mn.mask.values.size(); ++i)
            if (mn.mask.values[i] == 0.0) zeros.push_back(i);
          REQUIRE(!zeros.empty());
          mn.mask.values[zeros[static_cast<size_t>(rng.below(static_cast<int64_t>(zeros.size())))]] =
              rng.normal();
        }
      }
      auto removals = extract_prunable(mn);

      Tensor probes = probes_for(spec, 10, rng);
      CHECK(max_logit_gap(mn, compacted, probes) <= 1e-6);

      CostReport before = count_cost(spec);
      CostReport after = count_cost(compacted.spec);
      CHECK(after.flops <= before.flops);
      CHECK(after.params <= before.params);
      if (removals.empty()) {
        CHECK(after.flops == before.flops);
        CHECK(after.params == before.params);
        ++without_removals;
      } else {
        CHECK(after.flops < before.flops);
        CHECK(after.params < before.params);
        ++with_removals;
      }

      MaskedNetwork again;
      again.net = compacted;
      Network twice = compact(again, std::vector<PrunedStructure>{});
      CHECK(same_network(twice, compacted));
    }
  }
  CHECK(with_removals > 0);
  CHECK(without_removals > 0);
}

TEST_CASE("scaling a mask entry and dividing the outgoing weights is invariant") {
  for (double c : {2.0, -0.5}) {
    CAPTURE(c);
    SUBCASE("channel entry: consumer slice divided") {
      Network net = init_network(build_lenet({6, 10, 40}), 101);
      MaskedNetwork mn = attach_masks(net, {.channel = true}, 102);
      Network base = compact(mn, std::vector<PrunedStructure>{});

      const AttachmentSite& s = mn.mask.sites[0];  // second conv's input window
      const int ch = 2;
      mn.mask.values[s.offset + ch] *= c;
      Tensor& w = *mn.net.find("L2.w");
      const int in = w.dim(1);
      const int64_t k = static_cast<int64_t>(w.dim(2)) * w.dim(3);
      for (int o = 0; o < w.dim(0); ++o)
        for (int64_t t = 0; t < k; ++t) w[(static_cast<int64_t>(o) * in + ch) * k + t] /= c;

      Network scaled = compact(mn, std::vector<PrunedStructure>{});
      Rng rng(103);
      Tensor probes = probes_for(net.spec, 24, rng);
      Tensor a = forward_eval(base, probes);
      Tensor b = forward_eval(scaled, probes);
      for (int64_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-6);
    }
    SUBCASE("block slot: restoring conv divided") {
      Network net = init_network(build_minires(2, 6), 104);
      MaskedNetwork mn = attach_masks(net, {.block = true}, 105);
      Network base = compact(mn, std::vector<PrunedStructure>{});

      mn.mask.values[0] *= c;
      for (auto& v : mn.net.find("L2.b.w")->values()) v /= c;
      for (auto& v : mn.net.find("L2.b.b")->values()) v /= c;

      Network scaled = compact(mn, std::vector<PrunedStructure>{});
      Rng rng(106);
      Tensor probes = probes_for(net.spec, 24, rng);
      Tensor a = forward_eval(base, probes);
      Tensor b = forward_eval(scaled, probes);
      for (int64_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) <= 1e-6);
    }
  }
}

TEST_CASE("degenerate removals raise errors that name the layer") {
  SUBCASE("whole channel window") {
    Network net = init_network(build_lenet({6, 10, 40}), 111);
    MaskedNetwork mn = attach_masks(net, {.channel = true}, 112);
    const AttachmentSite& s = mn.mask.sites[0];
    for (int e = 0; e < s.count; ++e) mn.mask.values[s.offset + e] = 0.0;
    try {
      compact(mn);
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      CHECK(std::string(err.what()).find("L2") != std::string::npos);
    }
  }
  SUBCASE("every branch of a module") {
    Network net = init_network(build_miniinception(1, 3), 113);
    MaskedNetwork mn = attach_masks(net, {.branch = true}, 114);
    for (auto& v : mn.mask.values.values()) v = 0.0;
    try {
      compact(mn);
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      CHECK(std::string(err.what()).find("L3") != std::string::npos);
    }
  }
  SUBCASE("every mid channel of a block") {
    Network net = init_network(build_minires(1, 6), 115);
    MaskedNetwork mn = attach_masks(net, {.channel = true}, 116);
    for (const auto& s : mn.mask.sites)
      if (s.inner)
        for (int e = 0; e < s.count; ++e) mn.mask.values[s.offset + e] = 0.0;
    try {
      compact(mn);
      FAIL("expected ConfigError");
    } catch (const ConfigError& err) {
      CHECK(std::string(err.what()).find("L2") != std::string::npos);
    }
  }
}

TEST_CASE("removal lists are validated against the mask windows") {
  Network net = init_network(build_lenet({6, 10, 40}), 121);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 122);
  PrunedStructure bogus{StructureKind::Block, 2, -1, false, 0, 0.0};
  CHECK_THROWS_AS(compact(mn, {bogus}), ConfigError);
  PrunedStructure outside{StructureKind::Channel, 2, -1, false, 99, 0.0};
  CHECK_THROWS_AS(compact(mn, {outside}), ConfigError);
}

TEST_CASE("sub-threshold entries are removed as if exactly zero") {
  Network net = init_network(build_lenet({6, 10, 40}), 131);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 132);
  for (auto& v : mn.mask.values.values()) v = 1.0;
  mn.mask.values[1] = 7e-5;   // an SGD-trained mask hovers near zero
  mn.mask.values[4] = -4e-5;
  Network compacted = compact(mn, 1e-4);
  CHECK(std::get<ConvLayer>(compacted.spec.layers[0]).out_channels == 4);
  // the dropped contribution is bounded by the threshold, not exact
  Rng rng(133);
  Tensor probes = probes_for(net.spec, 32, rng);
  double gap = max_logit_gap(mn, compacted, probes);
  CHECK(gap > 0.0);
  CHECK(gap < 0.1);
}

TEST_CASE("prune reports serialize with schema version and accounting") {
  Network net = init_network(build_lenet({20, 50, 500}), 141);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 142);
  mn.mask.values[0] = 0.0;
  PruneReport report;
  report.threshold = 0.0;
  report.lambda = 0.05;
  report.removed = extract_prunable(mn);
  report.cost_before = count_cost(net.spec);
  Network compacted = compact(mn);
  report.cost_after = count_cost(compacted.spec);
  report.widths_before = trainable_widths(net.spec);
  report.widths_after = trainable_widths(compacted.spec);
  Rng rng(143);
  report.equivalence_residual = max_logit_gap(mn, compacted, probes_for(net.spec, 16, rng));

  nlohmann::json j = to_json(report);
  CHECK(j["version"] == 1);
  CHECK(j["lambda"] == 0.05);
  CHECK(j["removed"].size() == 1);
  CHECK(j["removed"][0]["kind"] == "channel");
  CHECK(j["removed"][0]["layer"] == 2);
  CHECK(j["cost_before"]["flops"] == 2293000);
  CHECK(j["cost_before"]["flops_pretty"] == "2.29M");
  CHECK(j["widths_after"] == nlohmann::json({19, 50, 500}));
  CHECK(j["error_before_percent"].is_null());
  CHECK(j["equivalence_residual"].is_number());
  CHECK(j["flops_reduction"].get<std::string>().back() == ')');
}

TEST_CASE("finetune trains with labels and reports the error after each epoch") {
  // Tiny separable task: class = whether the bright block sits left or right.
  const int n = 256;
  Rng rng(151);
  ImageSet train, test;
  auto fill = [&](ImageSet& set, int count) {
    set.images = Tensor({count, 1, 10, 10});
    set.labels.resize(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int cls = static_cast<int>(rng.below(2));
      set.labels[static_cast<size_t>(i)] = cls;
      for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) {
          const bool hot = cls == 0 ? x < 5 : x >= 5;
          set.images[(static_cast<int64_t>(i) * 100) + y * 10 + x] = (hot ? 0.9 : 0.1) + 0.05 * rng.normal();
        }
    }
  };
  fill(train, n);
  fill(test, 128);

  ArchitectureSpec spec;
  spec.input_chw = {1, 10, 10};
  spec.classes = 2;
  spec.layers = {ConvLayer{4, 3, 3, {}}, ReluLayer{}, MaxPool2Layer{}, FlattenLayer{}, LinearLayer{2, {}}};
  Network net = init_network(spec, 152);

  FinetuneConfig cfg;
  cfg.eta.base = 0.01;
  cfg.batch = 32;
  cfg.epochs = 4;
  cfg.seed = 153;
  const double before = evaluate_error(net, test);
  std::vector<double> history = finetune(net, train, test, cfg);
  REQUIRE(history.size() == 4);
  CHECK(history.back() < before);
  CHECK(history.back() < 5.0);
  CHECK(history.back() == evaluate_error(net, test));

  FinetuneConfig none = cfg;
  none.epochs = 0;
  Network untouched = init_network(spec, 152);
  CHECK(finetune(untouched, train, test, none).empty());
  CHECK(evaluate_error(untouched, test) == before);
}
