#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "gal/architecture.hpp"
#include "gal/errors.hpp"
#include "gal/network.hpp"
#include "oracles.hpp"

using namespace gal;

TEST_CASE("lenet cost accounting matches hand-computed integers") {
  ArchitectureSpec spec = build_lenet({20, 50, 500});
  CostReport cost = count_cost(spec);
  // conv1 24*24*20*25, conv2 8*8*50*25*20, fc1 800*500, fc2 500*10
  CHECK(cost.per_layer[0].flops == 288000);
  CHECK(cost.per_layer[2].flops == 1600000);
  CHECK(cost.per_layer[5].flops == 400000);
  CHECK(cost.per_layer[7].flops == 5000);
  CHECK(cost.flops == 2293000);
  CHECK(cost.weight_params == 500 + 25000 + 400000 + 5000);
  CHECK(cost.bias_params == 20 + 50 + 500 + 10);
  CHECK(cost.params == 431080);
  CHECK(format_millions(cost.flops) == "2.29M");
  CHECK(format_millions(cost.weight_params) == "0.43M");
  CHECK(trainable_widths(spec) == std::vector<int>{20, 50, 500});
}

TEST_CASE("pruned lenet cost accounting") {
  // Widths 4-13-121 with every mask entry kept: conv1 keeps 4 filters, conv2
  // reads 4 and keeps 13, fc1 reads 13*16 and keeps 121, fc2 reads 121.
  ArchitectureSpec spec = build_lenet({20, 50, 500});
  auto& conv1 = std::get<ConvLayer>(spec.layers[0]);
  auto& conv2 = std::get<ConvLayer>(spec.layers[2]);
  auto& fc1 = std::get<LinearLayer>(spec.layers[5]);
  auto& fc2 = std::get<LinearLayer>(spec.layers[7]);
  conv1.out_channels = 4;
  conv2.out_channels = 13;
  fc1.out_features = 121;
  fc2.out_features = 10;
  CostReport cost = count_cost(spec);
  CHECK(cost.per_layer[0].flops == 24 * 24 * 4 * 25);
  CHECK(cost.per_layer[2].flops == 8 * 8 * 13 * 25 * 4);
  CHECK(cost.per_layer[5].flops == 13 * 16 * 121);
  CHECK(cost.per_layer[7].flops == 121 * 10);
  CHECK(cost.flops == 167178);
  CHECK(cost.weight_params == 100 + 1300 + 25168 + 1210);
  CHECK(cost.params == 27778 + 4 + 13 + 121 + 10);
  CHECK(format_millions(cost.flops) == "0.17M");
  CHECK(format_millions(cost.weight_params + cost.bias_params) == "0.03M");
  CHECK(format_reduction(2293000, cost.flops) == "(92.7%)");
}

TEST_CASE("minires and miniinception shapes, costs and widths") {
  ArchitectureSpec res = build_minires(2, 8);
  ShapePlan plan = validate(res);
  CHECK(plan.out[0] == FlowShape{true, 8, 8, 8, 0});
  CHECK(plan.out[3] == FlowShape{true, 8, 8, 8, 0});  // blocks preserve shape
  CHECK(plan.out.back() == FlowShape{false, 0, 0, 0, 10});
  CostReport rc = count_cost(res);
  // stem 8*8*8*9, each block 8*8*(8*9*8 + 8*9*8), head 128*10
  CHECK(rc.per_layer[0].flops == 8 * 8 * 8 * 9);
  CHECK(rc.per_layer[2].flops == 64 * (8 * 9 * 8 + 8 * 9 * 8));
  CHECK(rc.flops == 4608 + 2 * 73728 + 1280);
  CHECK(trainable_widths(res) == std::vector<int>{8, 8, 8});

  ArchitectureSpec inc = build_miniinception(2, 3);
  ShapePlan iplan = validate(inc);
  CHECK(iplan.out[1] == FlowShape{true, 6, 8, 8, 0});
  CHECK(iplan.out[2] == FlowShape{true, 6, 4, 4, 0});  // stem pool precedes the modules
  CHECK(iplan.out[3] == FlowShape{true, 12, 4, 4, 0});
  CHECK(iplan.out[4] == FlowShape{true, 12, 4, 4, 0});
  CostReport ic = count_cost(inc);
  // module1 at 4x4: conv1 16*4*6; conv3 16*(4*6 + 4*9*4); pool-proj 16*4*6
  CHECK(ic.per_layer[3].flops == 16 * 4 * 6 + 16 * (4 * 6 + 4 * 9 * 4) + 16 * 4 * 6);
  // module2 reads 12 channels
  CHECK(ic.per_layer[4].flops == 16 * 4 * 12 + 16 * (4 * 12 + 4 * 9 * 4) + 16 * 4 * 12);
  CHECK(trainable_widths(inc) == std::vector<int>{6, 12, 12});
}

TEST_CASE("removing a block or branch removes exactly its cost") {
  ArchitectureSpec res = build_minires(3, 8);
  CostReport before = count_cost(res);
  ArchitectureSpec fewer = res;
  fewer.layers.erase(fewer.layers.begin() + 3);
  CostReport after = count_cost(fewer);
  CHECK(before.flops - after.flops == 73728);

  ArchitectureSpec inc = build_miniinception(1, 3);
  CostReport ib = count_cost(inc);
  auto& module = std::get<InceptionModuleLayer>(inc.layers[3]);
  module.branches.erase(module.branches.begin() + 1);  // drop the conv3 branch
  // Concat width shrinks 12 -> 8; the head linear reads 8*16 features now.
  CostReport ia = count_cost(inc);
  CHECK(ib.per_layer[3].flops - ia.per_layer[3].flops == 16 * (4 * 6 + 4 * 9 * 4));
  CHECK(ib.per_layer.back().flops == 12 * 16 * 10);
  CHECK(ia.per_layer.back().flops == 8 * 16 * 10);
}

TEST_CASE("architecture validation rejects malformed stacks") {
  ArchitectureSpec spec = build_lenet({20, 50, 500});
  SUBCASE("linear before flatten") {
    spec.layers[4] = ReluLayer{};
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }
  SUBCASE("odd pooling input") {
    spec.input_chw = {1, 27, 27};  // conv -> 23x23, pooling must reject
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }
  SUBCASE("kernel larger than input") {
    std::get<ConvLayer>(spec.layers[0]).kh = 30;
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }
  SUBCASE("wrong class width at the output") {
    std::get<LinearLayer>(spec.layers[7]).out_features = 9;
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }
  SUBCASE("bad in_index") {
    std::get<ConvLayer>(spec.layers[2]).in_index = {3, 3};
    CHECK_THROWS_AS(validate(spec), ConfigError);
    std::get<ConvLayer>(spec.layers[2]).in_index = {19, 20};
    CHECK_THROWS_AS(validate(spec), ConfigError);
  }
}

TEST_CASE("architecture json round-trips and rejects junk") {
  for (const ArchitectureSpec& spec :
       {build_lenet({20, 50, 500}), build_minires(2, 8), build_miniinception(2, 4)}) {
    nlohmann::json j = to_json(spec);
    ArchitectureSpec back = architecture_from_json(j);
    CHECK(back == spec);
    CHECK(to_json(back) == j);
  }
  // Selections survive the trip.
  ArchitectureSpec spec = build_lenet({20, 50, 500});
  std::get<ConvLayer>(spec.layers[2]).in_index = {0, 3, 7};
  std::get<LinearLayer>(spec.layers[5]).in_index = {1, 2, 40};
  CHECK(architecture_from_json(to_json(spec)) == spec);

  nlohmann::json j = to_json(spec);
  SUBCASE("unknown top-level key") {
    j["extra"] = 1;
    CHECK_THROWS_WITH_AS(architecture_from_json(j), doctest::Contains("unknown key 'extra'"), ConfigError);
  }
  SUBCASE("unknown layer key") {
    j["layers"][0]["stride"] = 2;
    CHECK_THROWS_WITH_AS(architecture_from_json(j), doctest::Contains("unknown key 'stride'"), ConfigError);
  }
  SUBCASE("unknown layer type") {
    j["layers"][1]["type"] = "avgpool";
    CHECK_THROWS_AS(architecture_from_json(j), ConfigError);
  }
  SUBCASE("non-integer width") {
    j["layers"][0]["out"] = 20.5;
    CHECK_THROWS_AS(architecture_from_json(j), ConfigError);
  }
  SUBCASE("inconsistent architecture still validates semantically") {
    j["layers"][7]["out"] = 9;  // classes stays 10
    CHECK_THROWS_AS(architecture_from_json(j), ConfigError);
  }
}

TEST_CASE("init_network allocates the canonical layout") {
  Network net = init_network(build_lenet({20, 50, 500}), 7);
  REQUIRE(net.params.size() == 8);
  CHECK(net.params[0].name == "L0.w");
  CHECK(net.params[0].tensor.shape() == std::vector<int>{20, 1, 5, 5});
  CHECK(net.params[3].name == "L2.b");
  CHECK(net.params[4].tensor.shape() == std::vector<int>{800, 500});
  CHECK(net.params[6].tensor.shape() == std::vector<int>{500, 10});
  CHECK(net.param_count() == 431080);
  // biases zero, weights He-scaled
  for (auto v : net.find("L0.b")->values()) CHECK(v == 0.0);
  double ss = 0;
  for (auto v : net.find("L2.w")->values()) ss += v * v;
  const double want_var = 2.0 / (25.0 * 20.0);
  CHECK(ss / 25000.0 == doctest::Approx(want_var).epsilon(0.1));
  // deterministic in the seed
  Network again = init_network(build_lenet({20, 50, 500}), 7);
  CHECK(std::memcmp(again.params[2].tensor.data(), net.params[2].tensor.data(),
                    sizeof(double) * static_cast<size_t>(net.params[2].tensor.size())) == 0);
  Network other = init_network(build_lenet({20, 50, 500}), 8);
  CHECK(other.params[2].tensor[0] != net.params[2].tensor[0]);

  Network res = init_network(build_minires(1, 8), 7);
  REQUIRE(res.params.size() == 8);
  CHECK(res.params[2].name == "L2.a.w");
  CHECK(res.params[4].name == "L2.b.w");
  CHECK(res.params[4].tensor.shape() == std::vector<int>{8, 8, 3, 3});

  Network inc = init_network(build_miniinception(1, 3), 7);
  CHECK(inc.find("L3.br1.r.w") != nullptr);
  CHECK(inc.find("L3.br1.r.w")->shape() == std::vector<int>{4, 6, 1, 1});
  CHECK(inc.find("L3.br2.w")->shape() == std::vector<int>{4, 6, 1, 1});
}

TEST_CASE("attach_masks enumerates sites in forward order") {
  SUBCASE("lenet channels: input-side slots for every layer but the first") {
    Network net = init_network(build_lenet({20, 50, 500}), 3);
    MaskedNetwork mn = attach_masks(net, {.channel = true}, 11);
    CHECK(mn.mask.size() == 570);
    REQUIRE(mn.mask.sites.size() == 3);
    const auto& s0 = mn.mask.sites[0];
    CHECK(s0.layer == 2);
    CHECK(s0.count == 20);
    CHECK(s0.group_size == 144);  // pooled 12x12 planes
    CHECK(s0.mode == CompactionMode::FullProducer);
    CHECK(s0.producer_layer == 0);
    const auto& s1 = mn.mask.sites[1];
    CHECK(s1.layer == 5);
    CHECK(s1.offset == 20);
    CHECK(s1.count == 50);
    CHECK(s1.group_size == 16);  // one pre-flatten channel per entry
    CHECK(s1.producer_layer == 2);
    const auto& s2 = mn.mask.sites[2];
    CHECK(s2.layer == 7);
    CHECK(s2.offset == 70);
    CHECK(s2.count == 500);
    CHECK(s2.group_size == 1);
    CHECK(s2.producer_layer == 5);
    // masks start from a unit normal
    double mean = 0;
    for (int64_t i = 0; i < mn.mask.values.size(); ++i) mean += mn.mask.values[i];
    CHECK(std::fabs(mean / 570) < 0.15);
  }

  SUBCASE("lenet with block/branch kinds has no slots") {
    Network net = init_network(build_lenet({20, 50, 500}), 3);
    MaskedNetwork mn = attach_masks(net, {.block = true, .branch = true}, 11);
    CHECK(mn.mask.size() == 0);
    CHECK(mn.mask.sites.empty());
  }

  SUBCASE("minires channel+block") {
    Network net = init_network(build_minires(2, 8), 3);
    MaskedNetwork mn = attach_masks(net, {.channel = true, .block = true}, 11);
    // per block: stream tap (8, select) + mid (8, full) + block slot; head tap 8
    CHECK(mn.mask.size() == 2 * (8 + 8 + 1) + 8);
    REQUIRE(mn.mask.sites.size() == 7);
    CHECK(mn.mask.sites[0].mode == CompactionMode::InputSelect);
    CHECK(mn.mask.sites[0].layer == 2);
    CHECK(mn.mask.sites[1].inner);
    CHECK(mn.mask.sites[1].mode == CompactionMode::FullProducer);
    CHECK(mn.mask.sites[2].kind == StructureKind::Block);
    CHECK(mn.mask.sites[2].count == 1);
    const auto& head = mn.mask.sites.back();
    CHECK(head.kind == StructureKind::Channel);
    CHECK(head.mode == CompactionMode::InputSelect);
    CHECK(head.count == 8);
    CHECK(head.group_size == 16);  // pooled 4x4
  }

  SUBCASE("miniinception channel+branch") {
    Network net = init_network(build_miniinception(2, 3), 3);
    MaskedNetwork mn = attach_masks(net, {.channel = true, .branch = true}, 11);
    // module1: taps 6+6+4(inner)+6, slots 3; module2: 12+12+4+12, slots 3; head 12
    CHECK(mn.mask.size() == (6 + 6 + 4 + 6 + 3) + (12 + 12 + 4 + 12 + 3) + 12);
    int branch_slots = 0;
    for (const auto& s : mn.mask.sites)
      if (s.kind == StructureKind::Branch) {
        ++branch_slots;
        CHECK(s.count == 1);
      }
    CHECK(branch_slots == 6);
  }

  SUBCASE("compacted networks are rejected") {
    Network net = init_network(build_lenet({20, 50, 500}), 3);
    std::get<ConvLayer>(net.spec.layers[2]).in_index = {0, 1};
    CHECK_THROWS_AS(attach_masks(net, {.channel = true}, 1), ConfigError);
  }
}

TEST_CASE("masked forward with a unit mask is bitwise the plain forward") {
  Rng rng(77);
  for (int arch = 0; arch < 3; ++arch) {
    ArchitectureSpec spec = arch == 0   ? build_lenet({6, 10, 40})
                            : arch == 1 ? build_minires(2, 6)
                                        : build_miniinception(2, 3);
    Network net = init_network(spec, 21);
    MaskedNetwork mn = attach_masks(net, {.channel = true, .block = true, .branch = true}, 22);
    for (auto& v : mn.mask.values.values()) v = 1.0;
    Tensor batch = oracle::random_tensor({3, spec.input_chw[0], spec.input_chw[1], spec.input_chw[2]}, rng);
    Tensor plain = forward_eval(net, batch);
    Tensor masked = forward_eval(mn, batch);
    REQUIRE(plain.same_shape(masked));
    for (int64_t i = 0; i < plain.size(); ++i) {
      REQUIRE(plain[i] == masked[i]);
    }
  }
}

TEST_CASE("zero block mask makes the block an exact identity") {
  Network net = init_network(build_minires(2, 6), 31);
  MaskedNetwork mn = attach_masks(net, {.block = true}, 32);
  REQUIRE(mn.mask.size() == 2);
  mn.mask.values[0] = 0.0;  // kill block L2
  mn.mask.values[1] = 1.0;
  Rng rng(33);
  Tensor batch = oracle::random_tensor({2, 1, 10, 10}, rng);

  // Reference: the same network with block L2 spliced out entirely.
  Network spliced = net;
  spliced.spec.layers.erase(spliced.spec.layers.begin() + 2);
  for (auto it = spliced.params.begin(); it != spliced.params.end();) {
    if (it->name.rfind("L2.", 0) == 0) it = spliced.params.erase(it);
    else ++it;
  }
  for (auto& p : spliced.params) {
    if (p.name.rfind("L3.", 0) == 0) p.name = "L2." + p.name.substr(3);
    else if (p.name.rfind("L6.", 0) == 0) p.name = "L5." + p.name.substr(3);
  }
  Tensor a = forward_eval(mn, batch);
  Tensor b = forward_eval(spliced, batch);
  for (int64_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);
}

TEST_CASE("zeroed channel entries silence exactly their structures") {
  Network net = init_network(build_lenet({6, 10, 40}), 41);
  MaskedNetwork mn = attach_masks(net, {.channel = true}, 42);
  // Zero out conv2-input channel 2: conv1 filter 2 must stop mattering.
  for (auto& v : mn.mask.values.values()) v = 1.0;
  mn.mask.values[2] = 0.0;
  Rng rng(43);
  Tensor batch = oracle::random_tensor({2, 1, 28, 28}, rng);
  Tensor base = forward_eval(mn, batch);
  // Scrambling the silenced filter changes nothing.
  Tensor* w1 = mn.net.find("L0.w");
  for (int i = 0; i < 25; ++i) w1->at(2, 0, i / 5, i % 5) = rng.normal() * 10;
  Tensor after = forward_eval(mn, batch);
  for (int64_t i = 0; i < base.size(); ++i) REQUIRE(base[i] == after[i]);
  // Scrambling a live filter does change the output.
  for (int i = 0; i < 25; ++i) w1->at(1, 0, i / 5, i % 5) = rng.normal() * 10;
  Tensor moved = forward_eval(mn, batch);
  bool changed = false;
  for (int64_t i = 0; i < base.size(); ++i) changed = changed || moved[i] != base[i];
  CHECK(changed);
}

TEST_CASE("mask gradients flow through sites and match finite differences") {
  Network net = init_network(build_minires(1, 4), 51);
  MaskedNetwork mn = attach_masks(net, {.channel = true, .block = true}, 52);
  REQUIRE(mn.mask.size() == 4 + 4 + 1 + 4);
  Rng rng(53);
  Tensor batch = oracle::random_tensor({2, 1, 10, 10}, rng);
  Tensor probe_w = oracle::random_tensor({2, 10}, rng);

  Graph g;
  ForwardHandles h = build_forward(g, mn, g.constant(batch, "x"), false, nullptr, false, true);
  ValueId loss = g.sum(g.mul(h.logits, g.constant(probe_w, "pw")));
  g.backward(loss);

  auto eval = [&](const Tensor& probe) {
    MaskedNetwork tmp = mn;
    tmp.mask.values = probe;
    Graph ge(false);
    ForwardHandles he = build_forward(ge, tmp, ge.constant(batch, "x"), false, nullptr, false, false);
    double acc = 0;
    const Tensor& out = ge.value(he.logits);
    for (int64_t i = 0; i < out.size(); ++i) acc += out[i] * probe_w[i];
    return acc;
  };
  auto fd = oracle::fd_gradient(eval, mn.mask.values);
  REQUIRE(mn.mask.values.has_grad());
  for (size_t i = 0; i < fd.size(); ++i) {
    INFO("mask slot ", i);
    CHECK(oracle::rel_err(mn.mask.values.grad()[i], fd[i]) < 1e-5);
  }
}

TEST_CASE("forward rejects mismatched batches and missing parameters") {
  Network net = init_network(build_lenet({6, 10, 40}), 61);
  Rng rng(62);
  Tensor bad = oracle::random_tensor({2, 1, 10, 10}, rng);
  CHECK_THROWS_AS(forward_eval(net, bad), ConfigError);
  Network broken = net;
  broken.params.erase(broken.params.begin());
  Tensor ok = oracle::random_tensor({1, 1, 28, 28}, rng);
  CHECK_THROWS_AS(forward_eval(broken, ok), ConfigError);
}
