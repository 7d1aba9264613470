#include "gal/architecture.hpp"

#include <cstdio>
#include <numeric>
#include <set>

#include "gal/errors.hpp"

namespace gal {
namespace {

using nlohmann::json;

void check_in_index(const std::vector<int>& idx, int axis, const std::string& where) {
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= axis)
      throw ConfigError(where + ": in_index entry " + std::to_string(idx[i]) +
                        " outside input width " + std::to_string(axis));
    if (i && idx[i] <= idx[i - 1]) throw ConfigError(where + ": in_index must be strictly increasing");
  }
}

int selected(const std::vector<int>& idx, int axis, const std::string& where) {
  if (idx.empty()) return axis;
  check_in_index(idx, axis, where);
  return static_cast<int>(idx.size());
}

void require_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

int get_int(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
  if (!j[key].is_number_integer()) throw ConfigError(where + ": '" + key + "' must be an integer");
  return j[key].get<int>();
}

std::vector<int> get_index(const json& j, const std::string& where) {
  std::vector<int> idx;
  if (!j.contains("in_index")) return idx;
  if (!j["in_index"].is_array()) throw ConfigError(where + ": 'in_index' must be an array");
  for (const auto& v : j["in_index"]) {
    if (!v.is_number_integer()) throw ConfigError(where + ": 'in_index' entries must be integers");
    idx.push_back(v.get<int>());
  }
  return idx;
}

}  // namespace

ShapePlan validate(const ArchitectureSpec& spec) {
  if (spec.classes < 2) throw ConfigError("architecture: classes must be >= 2");
  for (int d : spec.input_chw)
    if (d <= 0) throw ConfigError("architecture: input extents must be positive");
  if (spec.layers.empty()) throw ConfigError("architecture: no layers");

  ShapePlan plan;
  FlowShape s;
  s.spatial = true;
  s.c = spec.input_chw[0];
  s.h = spec.input_chw[1];
  s.w = spec.input_chw[2];

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i);
    plan.in.push_back(s);
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            if (!s.spatial) throw ConfigError(where + ": conv on flattened input");
            if (layer.out_channels < 1 || layer.kh < 1 || layer.kw < 1)
              throw ConfigError(where + ": conv extents must be positive");
            selected(layer.in_index, s.c, where);
            if (s.h < layer.kh || s.w < layer.kw)
              throw ConfigError(where + ": kernel " + std::to_string(layer.kh) + "x" +
                                std::to_string(layer.kw) + " exceeds input " + std::to_string(s.h) +
                                "x" + std::to_string(s.w));
            s.c = layer.out_channels;
            s.h = s.h - layer.kh + 1;
            s.w = s.w - layer.kw + 1;
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            if (s.spatial) throw ConfigError(where + ": linear before flatten");
            if (layer.out_features < 1) throw ConfigError(where + ": linear width must be positive");
            selected(layer.in_index, s.f, where);
            s.f = layer.out_features;
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            // shape preserved
          } else if constexpr (std::is_same_v<T, MaxPool2Layer>) {
            if (!s.spatial) throw ConfigError(where + ": maxpool2 on flattened input");
            if (s.h % 2 || s.w % 2)
              throw ConfigError(where + ": maxpool2 needs even extents, got " + std::to_string(s.h) +
                                "x" + std::to_string(s.w));
            s.h /= 2;
            s.w /= 2;
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            if (!s.spatial) throw ConfigError(where + ": flatten applied twice");
            s.f = s.c * s.h * s.w;
            s.spatial = false;
            s.c = s.h = s.w = 0;
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            if (!s.spatial) throw ConfigError(where + ": residual block on flattened input");
            if (layer.mid_channels < 1) throw ConfigError(where + ": block width must be positive");
            selected(layer.in_index, s.c, where);
            // padded 3x3 convs preserve shape; output width equals input width
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            if (!s.spatial) throw ConfigError(where + ": inception module on flattened input");
            if (layer.branches.empty()) throw ConfigError(where + ": inception module with no branches");
            int total = 0;
            for (size_t b = 0; b < layer.branches.size(); ++b) {
              const auto& br = layer.branches[b];
              const std::string bw = where + " branch " + std::to_string(b);
              if (br.out_channels < 1) throw ConfigError(bw + ": branch width must be positive");
              if (br.variant == BranchVariant::Conv3 && br.mid_channels < 1)
                throw ConfigError(bw + ": reducer width must be positive");
              selected(br.in_index, s.c, bw);
              total += br.out_channels;
            }
            s.c = total;
          }
        },
        spec.layers[i]);
    plan.out.push_back(s);
  }

  if (s.spatial || s.f != spec.classes)
    throw ConfigError("architecture: final output is " +
                      (s.spatial ? ("[" + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
                                    std::to_string(s.w) + "]")
                                 : ("[" + std::to_string(s.f) + "]")) +
                      ", expected [" + std::to_string(spec.classes) + "]");
  return plan;
}

CostReport count_cost(const ArchitectureSpec& spec) {
  ShapePlan plan = validate(spec);
  CostReport report;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const FlowShape& in = plan.in[i];
    const FlowShape& out = plan.out[i];
    LayerCost cost;
    cost.name = "L" + std::to_string(i);
    int64_t weights = 0, biases = 0;
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            const int64_t cin = layer.in_index.empty() ? in.c : static_cast<int64_t>(layer.in_index.size());
            cost.name += ".conv";
            cost.flops = static_cast<int64_t>(out.h) * out.w * out.c * layer.kh * layer.kw * cin;
            weights = static_cast<int64_t>(out.c) * cin * layer.kh * layer.kw;
            biases = out.c;
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            const int64_t fin = layer.in_index.empty() ? in.f : static_cast<int64_t>(layer.in_index.size());
            cost.name += ".linear";
            cost.flops = fin * out.f;
            weights = fin * out.f;
            biases = out.f;
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            const int64_t cin = layer.in_index.empty() ? in.c : static_cast<int64_t>(layer.in_index.size());
            const int64_t mid = layer.mid_channels;
            cost.name += ".resblock";
            cost.flops = static_cast<int64_t>(in.h) * in.w * (mid * 9 * cin + static_cast<int64_t>(in.c) * 9 * mid);
            weights = mid * 9 * cin + static_cast<int64_t>(in.c) * 9 * mid;
            biases = mid + in.c;
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            cost.name += ".inception";
            for (const auto& br : layer.branches) {
              const int64_t cin = br.in_index.empty() ? in.c : static_cast<int64_t>(br.in_index.size());
              const int64_t area = static_cast<int64_t>(in.h) * in.w;
              switch (br.variant) {
                case BranchVariant::Conv1:
                case BranchVariant::Pool:
                  cost.flops += area * br.out_channels * cin;
                  weights += static_cast<int64_t>(br.out_channels) * cin;
                  biases += br.out_channels;
                  break;
                case BranchVariant::Conv3:
                  cost.flops += area * (br.mid_channels * cin + static_cast<int64_t>(br.out_channels) * 9 * br.mid_channels);
                  weights += static_cast<int64_t>(br.mid_channels) * cin +
                             static_cast<int64_t>(br.out_channels) * 9 * br.mid_channels;
                  biases += br.mid_channels + br.out_channels;
                  break;
              }
            }
          } else {
            cost.name += std::is_same_v<T, ReluLayer>       ? ".relu"
                         : std::is_same_v<T, MaxPool2Layer> ? ".maxpool2"
                                                            : ".flatten";
          }
        },
        spec.layers[i]);
    cost.params = weights + biases;
    report.flops += cost.flops;
    report.weight_params += weights;
    report.bias_params += biases;
    report.per_layer.push_back(std::move(cost));
  }
  report.params = report.weight_params + report.bias_params;
  return report;
}

std::vector<int> trainable_widths(const ArchitectureSpec& spec) {
  std::vector<int> widths;
  int last_linear = -1;
  for (size_t i = 0; i < spec.layers.size(); ++i)
    if (std::holds_alternative<LinearLayer>(spec.layers[i])) last_linear = static_cast<int>(i);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) widths.push_back(layer.out_channels);
          else if constexpr (std::is_same_v<T, LinearLayer>) {
            if (static_cast<int>(i) != last_linear) widths.push_back(layer.out_features);
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) widths.push_back(layer.mid_channels);
          else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            int total = 0;
            for (const auto& br : layer.branches) total += br.out_channels;
            widths.push_back(total);
          }
        },
        spec.layers[i]);
  }
  return widths;
}

std::string format_millions(int64_t count) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(count) / 1e6);
  return buf;
}

std::string format_reduction(int64_t base, int64_t now) {
  char buf[32];
  const double pct = base == 0 ? 0.0 : 100.0 * static_cast<double>(base - now) / static_cast<double>(base);
  std::snprintf(buf, sizeof buf, "(%.1f%%)", pct);
  return buf;
}

json to_json(const ArchitectureSpec& spec) {
  json layers = json::array();
  for (const auto& desc : spec.layers) {
    json j;
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            j = {{"type", "conv"}, {"out", layer.out_channels}, {"kh", layer.kh}, {"kw", layer.kw}};
            if (!layer.in_index.empty()) j["in_index"] = layer.in_index;
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            j = {{"type", "linear"}, {"out", layer.out_features}};
            if (!layer.in_index.empty()) j["in_index"] = layer.in_index;
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            j = {{"type", "relu"}};
          } else if constexpr (std::is_same_v<T, MaxPool2Layer>) {
            j = {{"type", "maxpool2"}};
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            j = {{"type", "flatten"}};
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            j = {{"type", "resblock"}, {"mid", layer.mid_channels}};
            if (!layer.in_index.empty()) j["in_index"] = layer.in_index;
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            json branches = json::array();
            for (const auto& br : layer.branches) {
              json bj;
              switch (br.variant) {
                case BranchVariant::Conv1: bj = {{"variant", "conv1"}, {"out", br.out_channels}}; break;
                case BranchVariant::Conv3:
                  bj = {{"variant", "conv3"}, {"mid", br.mid_channels}, {"out", br.out_channels}};
                  break;
                case BranchVariant::Pool: bj = {{"variant", "pool"}, {"out", br.out_channels}}; break;
              }
              if (!br.in_index.empty()) bj["in_index"] = br.in_index;
              branches.push_back(std::move(bj));
            }
            j = {{"type", "inception"}, {"branches", std::move(branches)}};
          }
        },
        desc);
    layers.push_back(std::move(j));
  }
  return json{{"version", 1},
              {"input", {spec.input_chw[0], spec.input_chw[1], spec.input_chw[2]}},
              {"classes", spec.classes},
              {"layers", std::move(layers)}};
}

ArchitectureSpec architecture_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("architecture json: not an object");
  require_keys(j, {"version", "input", "classes", "layers"}, "architecture json");
  if (get_int(j, "version", "architecture json") != 1)
    throw ConfigError("architecture json: unsupported version");
  ArchitectureSpec spec;
  if (!j.contains("input") || !j["input"].is_array() || j["input"].size() != 3)
    throw ConfigError("architecture json: 'input' must be [c,h,w]");
  for (int i = 0; i < 3; ++i) {
    if (!j["input"][static_cast<size_t>(i)].is_number_integer())
      throw ConfigError("architecture json: 'input' entries must be integers");
    spec.input_chw[static_cast<size_t>(i)] = j["input"][static_cast<size_t>(i)].get<int>();
  }
  spec.classes = get_int(j, "classes", "architecture json");
  if (!j.contains("layers") || !j["layers"].is_array())
    throw ConfigError("architecture json: 'layers' must be an array");

  for (size_t i = 0; i < j["layers"].size(); ++i) {
    const json& lj = j["layers"][i];
    const std::string where = "architecture json layer " + std::to_string(i);
    if (!lj.is_object() || !lj.contains("type") || !lj["type"].is_string())
      throw ConfigError(where + ": missing 'type'");
    const std::string type = lj["type"].get<std::string>();
    if (type == "conv") {
      require_keys(lj, {"type", "out", "kh", "kw", "in_index"}, where);
      ConvLayer layer;
      layer.out_channels = get_int(lj, "out", where);
      layer.kh = get_int(lj, "kh", where);
      layer.kw = get_int(lj, "kw", where);
      layer.in_index = get_index(lj, where);
      spec.layers.emplace_back(std::move(layer));
    } else if (type == "linear") {
      require_keys(lj, {"type", "out", "in_index"}, where);
      LinearLayer layer;
      layer.out_features = get_int(lj, "out", where);
      layer.in_index = get_index(lj, where);
      spec.layers.emplace_back(std::move(layer));
    } else if (type == "relu") {
      require_keys(lj, {"type"}, where);
      spec.layers.emplace_back(ReluLayer{});
    } else if (type == "maxpool2") {
      require_keys(lj, {"type"}, where);
      spec.layers.emplace_back(MaxPool2Layer{});
    } else if (type == "flatten") {
      require_keys(lj, {"type"}, where);
      spec.layers.emplace_back(FlattenLayer{});
    } else if (type == "resblock") {
      require_keys(lj, {"type", "mid", "in_index"}, where);
      ResidualBlockLayer layer;
      layer.mid_channels = get_int(lj, "mid", where);
      layer.in_index = get_index(lj, where);
      spec.layers.emplace_back(std::move(layer));
    } else if (type == "inception") {
      require_keys(lj, {"type", "branches"}, where);
      if (!lj.contains("branches") || !lj["branches"].is_array())
        throw ConfigError(where + ": 'branches' must be an array");
      InceptionModuleLayer layer;
      for (size_t b = 0; b < lj["branches"].size(); ++b) {
        const json& bj = lj["branches"][b];
        const std::string bw = where + " branch " + std::to_string(b);
        if (!bj.is_object() || !bj.contains("variant") || !bj["variant"].is_string())
          throw ConfigError(bw + ": missing 'variant'");
        InceptionBranch br;
        const std::string variant = bj["variant"].get<std::string>();
        if (variant == "conv1") {
          require_keys(bj, {"variant", "out", "in_index"}, bw);
          br.variant = BranchVariant::Conv1;
        } else if (variant == "conv3") {
          require_keys(bj, {"variant", "mid", "out", "in_index"}, bw);
          br.variant = BranchVariant::Conv3;
          br.mid_channels = get_int(bj, "mid", bw);
        } else if (variant == "pool") {
          require_keys(bj, {"variant", "out", "in_index"}, bw);
          br.variant = BranchVariant::Pool;
        } else {
          throw ConfigError(bw + ": unknown variant '" + variant + "'");
        }
        br.out_channels = get_int(bj, "out", bw);
        br.in_index = get_index(bj, bw);
        layer.branches.push_back(std::move(br));
      }
      spec.layers.emplace_back(std::move(layer));
    } else {
      throw ConfigError(where + ": unknown type '" + type + "'");
    }
  }
  validate(spec);
  return spec;
}

ArchitectureSpec build_lenet(const std::array<int, 3>& filters, int classes) {
  ArchitectureSpec spec;
  spec.input_chw = {1, 28, 28};
  spec.classes = classes;
  spec.layers = {ConvLayer{filters[0], 5, 5, {}}, MaxPool2Layer{}, ConvLayer{filters[1], 5, 5, {}},
                 MaxPool2Layer{}, FlattenLayer{}, LinearLayer{filters[2], {}},
                 ReluLayer{},     LinearLayer{classes, {}}};
  validate(spec);
  return spec;
}

ArchitectureSpec build_minires(int blocks, int width) {
  if (blocks < 1) throw ConfigError("build_minires: need at least one block");
  ArchitectureSpec spec;
  spec.input_chw = {1, 10, 10};
  spec.classes = 10;
  spec.layers = {ConvLayer{width, 3, 3, {}}, ReluLayer{}};
  for (int b = 0; b < blocks; ++b) spec.layers.emplace_back(ResidualBlockLayer{width, {}});
  spec.layers.emplace_back(MaxPool2Layer{});
  spec.layers.emplace_back(FlattenLayer{});
  spec.layers.emplace_back(LinearLayer{10, {}});
  validate(spec);
  return spec;
}

ArchitectureSpec build_miniinception(int modules, int branches) {
  if (modules < 1) throw ConfigError("build_miniinception: need at least one module");
  if (branches < 1) throw ConfigError("build_miniinception: need at least one branch");
  ArchitectureSpec spec;
  spec.input_chw = {1, 10, 10};
  spec.classes = 10;
  // Pooling sits between the stem and the modules, so module outputs flow
  // into convolutions (or the head linear) only. Surviving branch scales can
  // then always be folded into consumer weights exactly; a max-pool between a
  // branch and its consumer would commute with negative scales incorrectly.
  spec.layers = {ConvLayer{6, 3, 3, {}}, ReluLayer{}, MaxPool2Layer{}};
  for (int m = 0; m < modules; ++m) {
    InceptionModuleLayer module;
    for (int b = 0; b < branches; ++b) {
      InceptionBranch br;
      switch (b % 3) {
        case 0: br.variant = BranchVariant::Conv1; break;
        case 1: br.variant = BranchVariant::Conv3; br.mid_channels = 4; break;
        case 2: br.variant = BranchVariant::Pool; break;
      }
      br.out_channels = 4;
      module.branches.push_back(std::move(br));
    }
    spec.layers.emplace_back(std::move(module));
  }
  spec.layers.emplace_back(FlattenLayer{});
  spec.layers.emplace_back(LinearLayer{10, {}});
  validate(spec);
  return spec;
}

}  // namespace gal
