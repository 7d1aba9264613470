#include "gal/network.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "gal/errors.hpp"

namespace gal {
namespace {

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  int64_t fan_in = 0;  // 0: bias (zero-initialized)
};

int eff(const std::vector<int>& idx, int full) {
  return idx.empty() ? full : static_cast<int>(idx.size());
}

// Canonical parameter order: layers ascending, each piece weight-then-bias,
// composite pieces in forward order.
std::vector<ParamSpec> param_layout(const ArchitectureSpec& spec) {
  ShapePlan plan = validate(spec);
  std::vector<ParamSpec> out;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const FlowShape& in = plan.in[i];
    const std::string base = "L" + std::to_string(i);
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            const int cin = eff(layer.in_index, in.c);
            out.push_back({base + ".w", {layer.out_channels, cin, layer.kh, layer.kw},
                           static_cast<int64_t>(cin) * layer.kh * layer.kw});
            out.push_back({base + ".b", {layer.out_channels}, 0});
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            const int fin = eff(layer.in_index, in.f);
            out.push_back({base + ".w", {fin, layer.out_features}, fin});
            out.push_back({base + ".b", {layer.out_features}, 0});
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            const int cin = eff(layer.in_index, in.c);
            out.push_back({base + ".a.w", {layer.mid_channels, cin, 3, 3}, static_cast<int64_t>(cin) * 9});
            out.push_back({base + ".a.b", {layer.mid_channels}, 0});
            out.push_back({base + ".b.w", {in.c, layer.mid_channels, 3, 3},
                           static_cast<int64_t>(layer.mid_channels) * 9});
            out.push_back({base + ".b.b", {in.c}, 0});
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            for (size_t b = 0; b < layer.branches.size(); ++b) {
              const auto& br = layer.branches[b];
              const std::string bb = base + ".br" + std::to_string(b);
              const int cin = eff(br.in_index, in.c);
              if (br.variant == BranchVariant::Conv3) {
                out.push_back({bb + ".r.w", {br.mid_channels, cin, 1, 1}, cin});
                out.push_back({bb + ".r.b", {br.mid_channels}, 0});
                out.push_back({bb + ".w", {br.out_channels, br.mid_channels, 3, 3},
                               static_cast<int64_t>(br.mid_channels) * 9});
                out.push_back({bb + ".b", {br.out_channels}, 0});
              } else {
                out.push_back({bb + ".w", {br.out_channels, cin, 1, 1}, cin});
                out.push_back({bb + ".b", {br.out_channels}, 0});
              }
            }
          }
        },
        spec.layers[i]);
  }
  return out;
}

int last_toplevel_relu(const ArchitectureSpec& spec) {
  int last = -1;
  for (size_t i = 0; i < spec.layers.size(); ++i)
    if (std::holds_alternative<ReluLayer>(spec.layers[i])) last = static_cast<int>(i);
  return last;
}

struct SiteKey {
  int layer;
  int branch;
  bool inner;
  StructureKind kind;
  bool operator<(const SiteKey& o) const {
    return std::tie(layer, branch, inner, kind) < std::tie(o.layer, o.branch, o.inner, o.kind);
  }
};

std::map<SiteKey, const AttachmentSite*> index_sites(const SoftMask& mask) {
  std::map<SiteKey, const AttachmentSite*> out;
  for (const auto& site : mask.sites)
    out.emplace(SiteKey{site.layer, site.branch, site.inner, site.kind}, &site);
  return out;
}

}  // namespace

Tensor* Network::find(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

const Tensor* Network::find(const std::string& name) const {
  return const_cast<Network*>(this)->find(name);
}

int64_t Network::param_count() const {
  int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

const char* to_string(StructureKind kind) {
  switch (kind) {
    case StructureKind::Channel: return "channel";
    case StructureKind::Block: return "block";
    default: return "branch";
  }
}

Network init_network(const ArchitectureSpec& spec, uint64_t seed) {
  Network net;
  net.spec = spec;
  const auto layout = param_layout(spec);
  for (size_t i = 0; i < layout.size(); ++i) {
    const auto& ps = layout[i];
    Tensor t(ps.shape);
    if (ps.fan_in > 0) {
      Rng rng(derive_seed(seed, {tag("init"), static_cast<uint64_t>(i)}));
      const double stddev = std::sqrt(2.0 / static_cast<double>(ps.fan_in));
      for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    }
    net.params.push_back({ps.name, std::move(t)});
  }
  return net;
}

int SoftMask::zeros(double threshold) const {
  int n = 0;
  for (int64_t i = 0; i < values.size(); ++i)
    if (std::fabs(values[i]) <= threshold) ++n;
  return n;
}

MaskedNetwork attach_masks(const Network& baseline, const StructureKinds& kinds, uint64_t seed) {
  ShapePlan plan = validate(baseline.spec);
  for (const auto& layer : baseline.spec.layers) {
    const bool selected = std::visit(
        [](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, LinearLayer> ||
                        std::is_same_v<T, ResidualBlockLayer>)
            return !l.in_index.empty();
          else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            for (const auto& br : l.branches)
              if (!br.in_index.empty()) return true;
            return false;
          } else
            return false;
        },
        layer);
    if (selected) throw ConfigError("attach_masks: network is already compacted (has input selections)");
  }

  MaskedNetwork mn;
  mn.net = baseline;

  enum class Origin { Image, Private, Shared };
  Origin origin = Origin::Image;
  int producer = -1;
  // Feature-space grouping carried across flatten: entries gate whole
  // pre-flatten channels until a linear layer rewrites the feature space.
  int feat_groups = 0, feat_group_size = 1;

  std::vector<AttachmentSite> sites;
  int offset = 0;
  auto add_site = [&](AttachmentSite site) {
    site.offset = offset;
    offset += site.count;
    sites.push_back(site);
  };

  const auto& layers = baseline.spec.layers;
  for (size_t i = 0; i < layers.size(); ++i) {
    const FlowShape& in = plan.in[i];
    const int li = static_cast<int>(i);
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            if (kinds.channel && origin != Origin::Image) {
              AttachmentSite s;
              s.kind = StructureKind::Channel;
              s.mode = origin == Origin::Private ? CompactionMode::FullProducer : CompactionMode::InputSelect;
              s.layer = li;
              s.count = in.c;
              s.group_size = in.h * in.w;
              s.producer_layer = origin == Origin::Private ? producer : -1;
              add_site(s);
            }
            origin = Origin::Private;
            producer = li;
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            if (kinds.channel && origin != Origin::Image) {
              AttachmentSite s;
              s.kind = StructureKind::Channel;
              s.mode = origin == Origin::Private ? CompactionMode::FullProducer : CompactionMode::InputSelect;
              s.layer = li;
              s.count = feat_groups;
              s.group_size = feat_group_size;
              s.producer_layer = origin == Origin::Private ? producer : -1;
              add_site(s);
            }
            origin = Origin::Private;
            producer = li;
            feat_groups = layer.out_features;
            feat_group_size = 1;
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            if (kinds.channel && origin != Origin::Image) {
              // The stream also rides the shortcut, so only the block's input
              // taps can be narrowed.
              AttachmentSite s;
              s.kind = StructureKind::Channel;
              s.mode = CompactionMode::InputSelect;
              s.layer = li;
              s.count = in.c;
              s.group_size = in.h * in.w;
              add_site(s);
            }
            if (kinds.channel) {
              AttachmentSite s;
              s.kind = StructureKind::Channel;
              s.mode = CompactionMode::FullProducer;
              s.layer = li;
              s.inner = true;
              s.count = layer.mid_channels;
              s.group_size = in.h * in.w;
              add_site(s);
            }
            if (kinds.block) {
              AttachmentSite s;
              s.kind = StructureKind::Block;
              s.layer = li;
              s.count = 1;
              add_site(s);
            }
            origin = Origin::Shared;
            producer = -1;
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            for (size_t b = 0; b < layer.branches.size(); ++b) {
              const auto& br = layer.branches[b];
              if (kinds.channel && origin != Origin::Image) {
                AttachmentSite s;
                s.kind = StructureKind::Channel;
                s.mode = CompactionMode::InputSelect;  // the stream feeds every branch
                s.layer = li;
                s.branch = static_cast<int>(b);
                s.count = in.c;
                s.group_size = in.h * in.w;
                add_site(s);
              }
              if (kinds.channel && br.variant == BranchVariant::Conv3) {
                AttachmentSite s;
                s.kind = StructureKind::Channel;
                s.mode = CompactionMode::FullProducer;
                s.layer = li;
                s.branch = static_cast<int>(b);
                s.inner = true;
                s.count = br.mid_channels;
                s.group_size = in.h * in.w;
                add_site(s);
              }
              if (kinds.branch) {
                AttachmentSite s;
                s.kind = StructureKind::Branch;
                s.layer = li;
                s.branch = static_cast<int>(b);
                s.count = 1;
                add_site(s);
              }
            }
            origin = Origin::Shared;
            producer = -1;
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            // Features now gate whole pre-flatten channels.
            feat_groups = in.c;
            feat_group_size = in.h * in.w;
          }
          // relu / maxpool2 are transparent to provenance; pooling shrinks the
          // per-channel plane, which the flatten grouping picks up later.
        },
        layers[i]);
  }

  mn.mask.sites = std::move(sites);
  if (offset > 0) {
    mn.mask.values = Tensor({offset});
    Rng rng(derive_seed(seed, {tag("mask")}));
    for (auto& v : mn.mask.values.values()) v = rng.normal();
  }
  return mn;
}

ForwardHandles build_forward(Graph& g, Network& net, ValueId input, const ForwardOptions& opt) {
  ShapePlan plan = validate(net.spec);
  const auto& in_shape = g.shape(input);
  if (in_shape.size() != 4 || in_shape[1] != net.spec.input_chw[0] ||
      in_shape[2] != net.spec.input_chw[1] || in_shape[3] != net.spec.input_chw[2])
    throw ConfigError("forward: batch shape " + shape_to_string(in_shape) + " does not match input [" +
                      std::to_string(net.spec.input_chw[0]) + "," + std::to_string(net.spec.input_chw[1]) +
                      "," + std::to_string(net.spec.input_chw[2]) + "]");
  if (opt.noise_active && opt.dropout_rate > 0 && !opt.noise_rng)
    throw ConfigError("forward: noise requested without a random stream");

  ForwardHandles handles;
  std::map<SiteKey, const AttachmentSite*> sites;
  if (opt.mask && opt.mask->size() > 0) {
    sites = index_sites(*opt.mask);
    handles.mask_leaf = g.leaf(const_cast<Tensor&>(opt.mask->values), opt.mask_trainable, "mask");
  }
  auto site_at = [&](int layer, int branch, bool inner, StructureKind kind) -> const AttachmentSite* {
    auto it = sites.find(SiteKey{layer, branch, inner, kind});
    return it == sites.end() ? nullptr : it->second;
  };
  auto bind = [&](const std::string& name) {
    Tensor* t = net.find(name);
    if (!t) throw ConfigError("forward: parameter '" + name + "' missing from network");
    return g.leaf(*t, opt.params_trainable, name);
  };
  auto apply_channel_site = [&](ValueId x, const AttachmentSite* s) {
    if (!s) return x;
    return g.scale_groups(x, handles.mask_leaf, s->offset, s->count, s->group_size);
  };

  const int dropout_layer = last_toplevel_relu(net.spec);
  ValueId x = input;
  for (size_t i = 0; i < net.spec.layers.size(); ++i) {
    const int li = static_cast<int>(i);
    const std::string base = "L" + std::to_string(i);
    std::visit(
        [&](const auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            ValueId h = apply_channel_site(x, site_at(li, -1, false, StructureKind::Channel));
            if (!layer.in_index.empty()) h = g.gather_features(h, layer.in_index);
            x = g.conv2d(h, bind(base + ".w"), bind(base + ".b"));
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            ValueId h = apply_channel_site(x, site_at(li, -1, false, StructureKind::Channel));
            if (!layer.in_index.empty()) h = g.gather_features(h, layer.in_index);
            x = g.linear(h, bind(base + ".w"), bind(base + ".b"));
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            x = g.relu(x);
            if (li == dropout_layer && opt.noise_active && opt.dropout_rate > 0)
              x = g.dropout_noise(x, opt.dropout_rate, true, *opt.noise_rng);
          } else if constexpr (std::is_same_v<T, MaxPool2Layer>) {
            x = g.maxpool2(x);
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            x = g.flatten(x);
          } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
            ValueId z = x;
            ValueId h = apply_channel_site(z, site_at(li, -1, false, StructureKind::Channel));
            if (!layer.in_index.empty()) h = g.gather_features(h, layer.in_index);
            h = g.relu(g.conv2d(g.pad2d(h, 1), bind(base + ".a.w"), bind(base + ".a.b")));
            h = apply_channel_site(h, site_at(li, -1, true, StructureKind::Channel));
            h = g.conv2d(g.pad2d(h, 1), bind(base + ".b.w"), bind(base + ".b.b"));
            if (const AttachmentSite* s = site_at(li, -1, false, StructureKind::Block))
              h = g.scale_all(h, handles.mask_leaf, s->offset);
            x = g.add(h, z);
          } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
            std::vector<ValueId> parts;
            for (size_t b = 0; b < layer.branches.size(); ++b) {
              const auto& br = layer.branches[b];
              const int bi = static_cast<int>(b);
              const std::string bb = base + ".br" + std::to_string(b);
              ValueId h = apply_channel_site(x, site_at(li, bi, false, StructureKind::Channel));
              if (!br.in_index.empty()) h = g.gather_features(h, br.in_index);
              switch (br.variant) {
                case BranchVariant::Conv1:
                  h = g.relu(g.conv2d(h, bind(bb + ".w"), bind(bb + ".b")));
                  break;
                case BranchVariant::Conv3:
                  h = g.relu(g.conv2d(h, bind(bb + ".r.w"), bind(bb + ".r.b")));
                  h = apply_channel_site(h, site_at(li, bi, true, StructureKind::Channel));
                  h = g.relu(g.conv2d(g.pad2d(h, 1), bind(bb + ".w"), bind(bb + ".b")));
                  break;
                case BranchVariant::Pool:
                  // Projection first, pooling second: the branch then consumes the
                  // stream through a conv, so per-channel scales on the module input
                  // fold into the projection weights exactly, whatever their sign.
                  h = g.relu(g.conv2d(h, bind(bb + ".w"), bind(bb + ".b")));
                  h = g.maxpool3(g.pad2d(h, 1));
                  break;
              }
              if (const AttachmentSite* s = site_at(li, bi, false, StructureKind::Branch))
                h = g.scale_all(h, handles.mask_leaf, s->offset);
              parts.push_back(h);
            }
            x = g.concat_channels(parts);
          }
        },
        net.spec.layers[i]);
  }
  handles.logits = x;
  return handles;
}

ForwardHandles build_forward(Graph& g, MaskedNetwork& mn, ValueId input, bool noise_active,
                             Rng* noise_rng, bool params_trainable, bool mask_trainable) {
  ForwardOptions opt;
  opt.mask = &mn.mask;
  opt.dropout_rate = mn.dropout_rate;
  opt.noise_active = noise_active;
  opt.noise_rng = noise_rng;
  opt.params_trainable = params_trainable;
  opt.mask_trainable = mask_trainable;
  return build_forward(g, mn.net, input, opt);
}

namespace {

Tensor forward_eval_impl(const Network& net, const SoftMask* mask, const Tensor& batch) {
  const int N = batch.dim(0);
  const int chunk = 256;
  Tensor logits({N, net.spec.classes});
  // Leaves are bound read-only (nothing is trainable here), so the const_cast
  // never leads to a write.
  Network& mutable_net = const_cast<Network&>(net);
  for (int begin = 0; begin < N; begin += chunk) {
    const int n = std::min(chunk, N - begin);
    Tensor part({n, batch.dim(1), batch.dim(2), batch.dim(3)});
    std::copy(batch.data() + static_cast<int64_t>(begin) * batch.size() / N,
              batch.data() + static_cast<int64_t>(begin + n) * batch.size() / N, part.data());
    Graph g(false);
    ForwardOptions opt;
    opt.mask = mask;
    ForwardHandles h = build_forward(g, mutable_net, g.constant(std::move(part), "batch"), opt);
    const Tensor& out = g.value(h.logits);
    std::copy(out.values().begin(), out.values().end(),
              logits.data() + static_cast<int64_t>(begin) * net.spec.classes);
  }
  return logits;
}

}  // namespace

Tensor forward_eval(const Network& net, const Tensor& batch) {
  return forward_eval_impl(net, nullptr, batch);
}

Tensor forward_eval(const MaskedNetwork& mn, const Tensor& batch) {
  return forward_eval_impl(mn.net, &mn.mask, batch);
}

}  // namespace gal
