#include "gal/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <tuple>

#include "gal/errors.hpp"

namespace gal {
namespace {

using SiteKey = std::tuple<int, int, bool, StructureKind>;

SiteKey key_of(const AttachmentSite& s) { return {s.layer, s.branch, s.inner, s.kind}; }

std::string site_name(int layer, int branch) {
  std::string n = "L" + std::to_string(layer);
  if (branch >= 0) n += " branch " + std::to_string(branch);
  return n;
}

// --- tensor surgery -------------------------------------------------------

// Conv weight [out,in,kh,kw]: keep the listed input slices, scaling each.
Tensor conv_take_inputs(const Tensor& w, const std::vector<int>& ids, const std::vector<double>& scale) {
  const int out = w.dim(0), in = w.dim(1);
  const int64_t k = static_cast<int64_t>(w.dim(2)) * w.dim(3);
  Tensor r({out, static_cast<int>(ids.size()), w.dim(2), w.dim(3)});
  for (int o = 0; o < out; ++o)
    for (size_t j = 0; j < ids.size(); ++j) {
      const double* src = w.data() + (static_cast<int64_t>(o) * in + ids[j]) * k;
      double* dst = r.data() + (static_cast<int64_t>(o) * static_cast<int64_t>(ids.size()) + static_cast<int64_t>(j)) * k;
      for (int64_t t = 0; t < k; ++t) dst[t] = src[t] * scale[j];
    }
  return r;
}

// Conv weight: keep the listed filters (axis 0).
Tensor conv_take_filters(const Tensor& w, const std::vector<int>& ids) {
  const int64_t block = w.size() / w.dim(0);
  std::vector<int> shape = w.shape();
  shape[0] = static_cast<int>(ids.size());
  Tensor r(shape);
  for (size_t j = 0; j < ids.size(); ++j)
    std::memcpy(r.data() + static_cast<int64_t>(j) * block, w.data() + static_cast<int64_t>(ids[j]) * block,
                sizeof(double) * static_cast<size_t>(block));
  return r;
}

// Linear weight [fin,out]: keep the listed feature rows, scaling each.
Tensor linear_take_rows(const Tensor& w, const std::vector<int>& rows, const std::vector<double>& scale) {
  const int out = w.dim(1);
  Tensor r({static_cast<int>(rows.size()), out});
  for (size_t j = 0; j < rows.size(); ++j) {
    const double* src = w.data() + static_cast<int64_t>(rows[j]) * out;
    double* dst = r.data() + static_cast<int64_t>(j) * out;
    for (int o = 0; o < out; ++o) dst[o] = src[o] * scale[j];
  }
  return r;
}

// Linear weight: keep the listed output columns.
Tensor linear_take_cols(const Tensor& w, const std::vector<int>& ids) {
  const int fin = w.dim(0), out = w.dim(1);
  Tensor r({fin, static_cast<int>(ids.size())});
  for (int f = 0; f < fin; ++f)
    for (size_t j = 0; j < ids.size(); ++j)
      r[static_cast<int64_t>(f) * static_cast<int64_t>(ids.size()) + static_cast<int64_t>(j)] =
          w[static_cast<int64_t>(f) * out + ids[j]];
  return r;
}

Tensor take_entries(const Tensor& v, const std::vector<int>& ids) {
  Tensor r({static_cast<int>(ids.size())});
  for (size_t j = 0; j < ids.size(); ++j) r[static_cast<int64_t>(j)] = v[ids[j]];
  return r;
}

void scale_tensor(Tensor& t, double s) {
  for (auto& v : t.values()) v *= s;
}

// --- the walk --------------------------------------------------------------

// Output slot for one original layer: its rewritten descriptor plus parameter
// pieces (suffix, tensor) in canonical order. Dropped layers keep == false.
struct NewLayer {
  bool keep = true;
  LayerDesc desc;
  std::vector<std::pair<std::string, Tensor>> pieces;
};

struct Walker {
  const MaskedNetwork& mn;
  ShapePlan plan;
  std::map<SiteKey, const AttachmentSite*> sites;
  std::map<SiteKey, std::set<int>> removed;
  std::vector<NewLayer> out;

  // Stream between layers, in the walked spec's own channel/feature ids:
  // which ids are physically present and the scale still owed on each.
  std::vector<int> live;
  std::vector<double> carry;
  int flat_group = 1;  // features per id once flattened

  explicit Walker(const MaskedNetwork& m) : mn(m), plan(validate(m.net.spec)) {
    for (const auto& s : mn.mask.sites) sites.emplace(key_of(s), &s);
  }

  const AttachmentSite* site(int layer, int branch, bool inner, StructureKind kind) const {
    auto it = sites.find({layer, branch, inner, kind});
    return it == sites.end() ? nullptr : it->second;
  }
  bool is_removed(const AttachmentSite* s, int index) const {
    if (!s) return false;
    auto it = removed.find(key_of(*s));
    return it != removed.end() && it->second.count(index) > 0;
  }
  double mask_at(const AttachmentSite* s, int index) const { return mn.mask.values[s->offset + index]; }

  bool live_is_identity(int width) const {
    if (static_cast<int>(live.size()) != width) return false;
    for (size_t p = 0; p < live.size(); ++p)
      if (live[p] != static_cast<int>(p)) return false;
    return true;
  }
  bool carry_is_unit() const {
    for (double c : carry) if (c != 1.0) return false;
    return true;
  }

  const Tensor& param(const std::string& name) const {
    const Tensor* t = mn.net.find(name);
    if (!t) throw ConfigError("compact: parameter '" + name + "' missing from network");
    return *t;
  }

  // A consumer reading the stream through a weighted input: which ids it
  // keeps, the scale folded into each kept slice, and the input selection
  // (positions into the compact stream; empty when it reads all of it).
  struct Narrow {
    std::vector<int> ids;
    std::vector<double> scale;
    std::vector<int> in_index;
  };
  Narrow narrow(const AttachmentSite* s) const {
    Narrow r;
    for (size_t p = 0; p < live.size(); ++p) {
      const int c = live[p];
      if (is_removed(s, c)) continue;
      r.ids.push_back(c);
      r.scale.push_back(carry[p] * (s ? mask_at(s, c) : 1.0));
      r.in_index.push_back(static_cast<int>(p));
    }
    if (r.in_index.size() == live.size()) r.in_index.clear();
    return r;
  }

  void reset_stream(int width) {
    live.resize(static_cast<size_t>(width));
    for (int c = 0; c < width; ++c) live[static_cast<size_t>(c)] = c;
    carry.assign(static_cast<size_t>(width), 1.0);
    flat_group = 1;
  }

  // Layers whose input selection predates this pass (an already-compacted
  // network) can only be walked when nothing here touches them.
  void require_untouched(int li, bool has_any_site, int expected_groups) const {
    if (has_any_site || !carry_is_unit() || !live_is_identity(expected_groups))
      throw ConfigError("compact: " + site_name(li, -1) +
                        " already carries an input selection; re-masking a compacted network is unsupported");
  }

  void shrink_producer(int pl, const std::vector<int>& kept) {
    NewLayer& nl = out[static_cast<size_t>(pl)];
    std::visit(
        [&](auto& layer) {
          using T = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            nl.pieces[0].second = conv_take_filters(nl.pieces[0].second, kept);
            nl.pieces[1].second = take_entries(nl.pieces[1].second, kept);
            layer.out_channels = static_cast<int>(kept.size());
          } else if constexpr (std::is_same_v<T, LinearLayer>) {
            nl.pieces[0].second = linear_take_cols(nl.pieces[0].second, kept);
            nl.pieces[1].second = take_entries(nl.pieces[1].second, kept);
            layer.out_features = static_cast<int>(kept.size());
          } else {
            throw ConfigError("compact: L" + std::to_string(pl) + " cannot shed output units");
          }
        },
        nl.desc);
  }

  void conv_layer(int li, const ConvLayer& L) {
    NewLayer nl;
    const AttachmentSite* s = site(li, -1, false, StructureKind::Channel);
    if (!L.in_index.empty()) {
      require_untouched(li, s != nullptr, plan.in[static_cast<size_t>(li)].c);
      nl.desc = L;
      nl.pieces = {{".w", param("L" + std::to_string(li) + ".w")}, {".b", param("L" + std::to_string(li) + ".b")}};
      out.push_back(std::move(nl));
      reset_stream(L.out_channels);
      return;
    }
    Narrow nr = narrow(s);
    if (nr.ids.empty())
      throw ConfigError("compact: " + site_name(li, -1) + ": every input channel removed (degenerate network)");
    ConvLayer d = L;
    Tensor w = conv_take_inputs(param("L" + std::to_string(li) + ".w"), nr.ids, nr.scale);
    if (s && s->mode == CompactionMode::FullProducer) {
      shrink_producer(s->producer_layer, nr.ids);
      d.in_index.clear();
    } else {
      d.in_index = nr.in_index;
    }
    nl.desc = d;
    nl.pieces = {{".w", std::move(w)}, {".b", param("L" + std::to_string(li) + ".b")}};
    out.push_back(std::move(nl));
    reset_stream(L.out_channels);
  }

  void linear_layer(int li, const LinearLayer& L) {
    NewLayer nl;
    const AttachmentSite* s = site(li, -1, false, StructureKind::Channel);
    if (!L.in_index.empty()) {
      require_untouched(li, s != nullptr, plan.in[static_cast<size_t>(li)].f / flat_group);
      nl.desc = L;
      nl.pieces = {{".w", param("L" + std::to_string(li) + ".w")}, {".b", param("L" + std::to_string(li) + ".b")}};
      out.push_back(std::move(nl));
      reset_stream(L.out_features);
      return;
    }
    Narrow nr = narrow(s);
    if (nr.ids.empty())
      throw ConfigError("compact: " + site_name(li, -1) + ": every input feature removed (degenerate network)");
    const int g = flat_group;
    std::vector<int> rows;
    std::vector<double> rscale;
    rows.reserve(nr.ids.size() * static_cast<size_t>(g));
    for (size_t j = 0; j < nr.ids.size(); ++j)
      for (int t = 0; t < g; ++t) {
        rows.push_back(nr.ids[j] * g + t);
        rscale.push_back(nr.scale[j]);
      }
    LinearLayer d = L;
    Tensor w = linear_take_rows(param("L" + std::to_string(li) + ".w"), rows, rscale);
    if (s && s->mode == CompactionMode::FullProducer) {
      shrink_producer(s->producer_layer, nr.ids);
      d.in_index.clear();
    } else if (!nr.in_index.empty()) {
      d.in_index.clear();
      for (int p : nr.in_index)
        for (int t = 0; t < g; ++t) d.in_index.push_back(p * g + t);
    } else {
      d.in_index.clear();
    }
    nl.desc = d;
    nl.pieces = {{".w", std::move(w)}, {".b", param("L" + std::to_string(li) + ".b")}};
    out.push_back(std::move(nl));
    reset_stream(L.out_features);
  }

  void block_layer(int li, const ResidualBlockLayer& L) {
    const AttachmentSite* slot = site(li, -1, false, StructureKind::Block);
    if (is_removed(slot, 0)) {
      out.push_back(NewLayer{false, ResidualBlockLayer{}, {}});
      return;  // spliced to identity; the stream passes through untouched
    }
    const std::string base = "L" + std::to_string(li);
    const AttachmentSite* in_s = site(li, -1, false, StructureKind::Channel);
    const AttachmentSite* mid_s = site(li, -1, true, StructureKind::Channel);
    NewLayer nl;
    if (!L.in_index.empty()) {
      require_untouched(li, in_s || mid_s || slot, plan.in[static_cast<size_t>(li)].c);
      nl.desc = L;
      nl.pieces = {{".a.w", param(base + ".a.w")},
                   {".a.b", param(base + ".a.b")},
                   {".b.w", param(base + ".b.w")},
                   {".b.b", param(base + ".b.b")}};
      out.push_back(std::move(nl));
      return;
    }
    if (!carry_is_unit())
      throw ConfigError("compact: " + site_name(li, -1) +
                        ": a pending branch scale cannot cross a residual shortcut");
    Narrow nr = narrow(in_s);
    if (nr.ids.empty())
      throw ConfigError("compact: " + site_name(li, -1) + ": every input tap removed (degenerate network)");
    std::vector<int> mids;
    std::vector<double> mscale;
    for (int c = 0; c < L.mid_channels; ++c) {
      if (is_removed(mid_s, c)) continue;
      mids.push_back(c);
      mscale.push_back(mid_s ? mask_at(mid_s, c) : 1.0);
    }
    if (mids.empty())
      throw ConfigError("compact: " + site_name(li, -1) + ": every mid channel removed (degenerate network)");

    Tensor aw = conv_take_inputs(param(base + ".a.w"), nr.ids, nr.scale);
    aw = conv_take_filters(aw, mids);
    Tensor ab = take_entries(param(base + ".a.b"), mids);
    Tensor bw = conv_take_inputs(param(base + ".b.w"), mids, mscale);
    Tensor bb = param(base + ".b.b");
    const double s = slot ? mask_at(slot, 0) : 1.0;
    scale_tensor(bw, s);
    scale_tensor(bb, s);
    if (!live_is_identity(plan.in[static_cast<size_t>(li)].c)) {
      // the narrowed stream also rides the shortcut, so the restoring conv
      // keeps only the live output channels
      bw = conv_take_filters(bw, live);
      bb = take_entries(bb, live);
    }
    ResidualBlockLayer d;
    d.mid_channels = static_cast<int>(mids.size());
    d.in_index = nr.in_index;
    nl.desc = d;
    nl.pieces = {{".a.w", std::move(aw)}, {".a.b", std::move(ab)}, {".b.w", std::move(bw)}, {".b.b", std::move(bb)}};
    out.push_back(std::move(nl));
    // live/carry unchanged: the block preserves the stream
  }

  void module_layer(int li, const InceptionModuleLayer& L) {
    const std::string base = "L" + std::to_string(li);
    std::vector<int> offs(L.branches.size() + 1, 0);
    for (size_t b = 0; b < L.branches.size(); ++b)
      offs[b + 1] = offs[b] + L.branches[b].out_channels;

    InceptionModuleLayer d;
    NewLayer nl;
    std::vector<int> new_live;
    std::vector<double> new_carry;
    for (size_t b = 0; b < L.branches.size(); ++b) {
      const int bi = static_cast<int>(b);
      const auto& br = L.branches[b];
      const AttachmentSite* slot = site(li, bi, false, StructureKind::Branch);
      if (is_removed(slot, 0)) continue;
      const AttachmentSite* in_s = site(li, bi, false, StructureKind::Channel);
      const AttachmentSite* mid_s = site(li, bi, true, StructureKind::Channel);
      const std::string ob = base + ".br" + std::to_string(b);
      const std::string nb = ".br" + std::to_string(d.branches.size());
      InceptionBranch nd = br;
      if (!br.in_index.empty()) {
        require_untouched(li, in_s || mid_s || slot, plan.in[static_cast<size_t>(li)].c);
        if (br.variant == BranchVariant::Conv3) {
          nl.pieces.push_back({nb + ".r.w", param(ob + ".r.w")});
          nl.pieces.push_back({nb + ".r.b", param(ob + ".r.b")});
        }
        nl.pieces.push_back({nb + ".w", param(ob + ".w")});
        nl.pieces.push_back({nb + ".b", param(ob + ".b")});
        d.branches.push_back(std::move(nd));
      } else {
        Narrow nr = narrow(in_s);
        if (nr.ids.empty())
          throw ConfigError("compact: " + site_name(li, bi) + ": every input channel removed (degenerate network)");
        nd.in_index = nr.in_index;
        if (br.variant == BranchVariant::Conv3) {
          std::vector<int> mids;
          std::vector<double> mscale;
          for (int c = 0; c < br.mid_channels; ++c) {
            if (is_removed(mid_s, c)) continue;
            mids.push_back(c);
            mscale.push_back(mid_s ? mask_at(mid_s, c) : 1.0);
          }
          if (mids.empty())
            throw ConfigError("compact: " + site_name(li, bi) + ": every mid channel removed (degenerate network)");
          Tensor rw = conv_take_inputs(param(ob + ".r.w"), nr.ids, nr.scale);
          rw = conv_take_filters(rw, mids);
          nl.pieces.push_back({nb + ".r.w", std::move(rw)});
          nl.pieces.push_back({nb + ".r.b", take_entries(param(ob + ".r.b"), mids)});
          nl.pieces.push_back({nb + ".w", conv_take_inputs(param(ob + ".w"), mids, mscale)});
          nl.pieces.push_back({nb + ".b", param(ob + ".b")});
          nd.mid_channels = static_cast<int>(mids.size());
        } else {
          nl.pieces.push_back({nb + ".w", conv_take_inputs(param(ob + ".w"), nr.ids, nr.scale)});
          nl.pieces.push_back({nb + ".b", param(ob + ".b")});
        }
        d.branches.push_back(std::move(nd));
      }
      const double s = slot ? mask_at(slot, 0) : 1.0;
      for (int c = 0; c < br.out_channels; ++c) {
        new_live.push_back(offs[b] + c);
        new_carry.push_back(s);
      }
    }
    if (d.branches.empty())
      throw ConfigError("compact: " + site_name(li, -1) + ": every branch removed (degenerate network)");
    nl.desc = std::move(d);
    out.push_back(std::move(nl));
    live = std::move(new_live);
    carry = std::move(new_carry);
  }

  void run() {
    reset_stream(mn.net.spec.input_chw[0]);
    const auto& layers = mn.net.spec.layers;
    for (size_t i = 0; i < layers.size(); ++i) {
      const int li = static_cast<int>(i);
      std::visit(
          [&](const auto& layer) {
            using T = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
              conv_layer(li, layer);
            } else if constexpr (std::is_same_v<T, LinearLayer>) {
              linear_layer(li, layer);
            } else if constexpr (std::is_same_v<T, ResidualBlockLayer>) {
              block_layer(li, layer);
            } else if constexpr (std::is_same_v<T, InceptionModuleLayer>) {
              module_layer(li, layer);
            } else if constexpr (std::is_same_v<T, FlattenLayer>) {
              flat_group = plan.in[i].h * plan.in[i].w;
              out.push_back(NewLayer{true, layer, {}});
            } else {
              // relu / maxpool commute with the pending scales only when
              // they are nonnegative; zero and positive carries pass through
              for (double c : carry)
                if (c < 0.0)
                  throw ConfigError("compact: " + site_name(li, -1) +
                                    ": a negative branch scale cannot cross an activation or pooling layer");
              out.push_back(NewLayer{true, layer, {}});
            }
          },
          layers[i]);
    }
  }

  Network build() const {
    Network net;
    net.spec.input_chw = mn.net.spec.input_chw;
    net.spec.classes = mn.net.spec.classes;
    int k = 0;
    for (const auto& nl : out) {
      if (!nl.keep) continue;
      net.spec.layers.push_back(nl.desc);
      for (const auto& piece : nl.pieces)
        net.params.push_back({"L" + std::to_string(k) + piece.first, piece.second});
      ++k;
    }
    validate(net.spec);
    return net;
  }
};

}  // namespace

std::vector<PrunedStructure> extract_prunable(const MaskedNetwork& net, double threshold) {
  if (threshold < 0) throw ConfigError("extract_prunable: threshold must be nonnegative");
  std::vector<PrunedStructure> out;
  for (const auto& s : net.mask.sites)
    for (int e = 0; e < s.count; ++e) {
      const double v = net.mask.values[s.offset + e];
      if (std::fabs(v) <= threshold) out.push_back({s.kind, s.layer, s.branch, s.inner, e, v});
    }
  return out;
}

Network compact(const MaskedNetwork& net, const std::vector<PrunedStructure>& removals) {
  Walker w(net);
  for (const auto& r : removals) {
    auto it = w.sites.find({r.layer, r.branch, r.inner, r.kind});
    if (it == w.sites.end())
      throw ConfigError("compact: removal of " + std::string(to_string(r.kind)) + " at " +
                        site_name(r.layer, r.branch) + " matches no mask window");
    if (r.index < 0 || r.index >= it->second->count)
      throw ConfigError("compact: removal index " + std::to_string(r.index) + " outside window at " +
                        site_name(r.layer, r.branch));
    w.removed[key_of(*it->second)].insert(r.index);
  }
  w.run();
  return w.build();
}

Network compact(const MaskedNetwork& net, double threshold) {
  return compact(net, extract_prunable(net, threshold));
}

double max_logit_gap(const MaskedNetwork& masked, const Network& compacted, const Tensor& probes) {
  Tensor a = forward_eval(masked, probes);
  Tensor b = forward_eval(compacted, probes);
  if (!a.same_shape(b))
    throw ConfigError("equivalence probe: logit shapes differ (" + a.shape_string() + " vs " + b.shape_string() + ")");
  double gap = 0;
  for (int64_t i = 0; i < a.size(); ++i) gap = std::max(gap, std::fabs(a[i] - b[i]));
  return gap;
}

nlohmann::json to_json(const PruneReport& report) {
  auto cost = [](const CostReport& c) {
    return nlohmann::json{{"flops", c.flops},
                          {"weight_params", c.weight_params},
                          {"bias_params", c.bias_params},
                          {"params", c.params},
                          {"flops_pretty", format_millions(c.flops)},
                          {"params_pretty", format_millions(c.params)}};
  };
  auto pct = [](double v) { return v < 0 ? nlohmann::json() : nlohmann::json(v); };
  nlohmann::json removed = nlohmann::json::array();
  for (const auto& r : report.removed)
    removed.push_back({{"kind", to_string(r.kind)},
                       {"layer", r.layer},
                       {"branch", r.branch},
                       {"inner", r.inner},
                       {"index", r.index},
                       {"value", r.value}});
  return nlohmann::json{{"version", 1},
                        {"threshold", report.threshold},
                        {"lambda", report.lambda},
                        {"removed", std::move(removed)},
                        {"cost_before", cost(report.cost_before)},
                        {"cost_after", cost(report.cost_after)},
                        {"flops_reduction", format_reduction(report.cost_before.flops, report.cost_after.flops)},
                        {"params_reduction", format_reduction(report.cost_before.params, report.cost_after.params)},
                        {"widths_before", report.widths_before},
                        {"widths_after", report.widths_after},
                        {"error_before_percent", pct(report.error_before)},
                        {"error_after_percent", pct(report.error_after)},
                        {"equivalence_residual", pct(report.equivalence_residual)}};
}

std::vector<double> finetune(Network& net, const ImageSet& train, const ImageSet& test,
                             const FinetuneConfig& cfg) {
  SupervisedConfig sc;
  sc.eta = cfg.eta;
  sc.weight_decay = cfg.weight_decay;
  sc.momentum = cfg.momentum;
  sc.batch = cfg.batch;
  sc.epochs = cfg.epochs;
  sc.seed = cfg.seed;
  std::vector<double> history;
  if (cfg.epochs == 0) return history;
  train_supervised(net, train, sc, [&](int, double) { history.push_back(evaluate_error(net, test)); });
  return history;
}

}  // namespace gal
