#include "gal/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include <json.hpp>

#include "gal/errors.hpp"

namespace gal {

namespace {

constexpr char kMagic[8] = {'G', 'A', 'L', 'C', 'K', 'P', 'T', '1'};

// --- little-endian byte building --------------------------------------------

struct Builder {
  std::string bytes;
  void u8(uint8_t v) { bytes.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
  void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes.append(s);
  }
  void tensor(const Tensor& t) {
    u32(static_cast<uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) i64(t.dim(d));
    for (int64_t i = 0; i < t.size(); ++i) f64(t[i]);
  }
  void params(const std::vector<Parameter>& ps) {
    u32(static_cast<uint32_t>(ps.size()));
    for (const auto& p : ps) {
      str(p.name);
      tensor(p.tensor);
    }
  }
};

struct Cursor {
  const unsigned char* p;
  size_t n;
  size_t at = 0;
  std::string where;

  void need(size_t k) const {
    if (at + k > n) throw DataError(where + ": truncated");
  }
  uint8_t u8() {
    need(1);
    return p[at++];
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[at + static_cast<size_t>(i)]) << (8 * i);
    at += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[at + static_cast<size_t>(i)]) << (8 * i);
    at += 8;
    return v;
  }
  int32_t i32() { return static_cast<int32_t>(u32()); }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + at), len);
    at += len;
    return s;
  }
  Tensor tensor() {
    const uint32_t rank = u32();
    if (rank > 8) throw DataError(where + ": tensor rank " + std::to_string(rank));
    std::vector<int> shape;
    int64_t total = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const int64_t dim = i64();
      if (dim <= 0 || dim > (1 << 28)) throw DataError(where + ": tensor dimension " + std::to_string(dim));
      shape.push_back(static_cast<int>(dim));
      total *= dim;
    }
    Tensor t(shape);
    for (int64_t i = 0; i < total; ++i) t[i] = f64();
    return t;
  }
  std::vector<Parameter> params() {
    const uint32_t count = u32();
    std::vector<Parameter> ps;
    ps.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
      Parameter q;
      q.name = str();
      q.tensor = tensor();
      ps.push_back(std::move(q));
    }
    return ps;
  }
  void done() const {
    if (at != n) throw DataError(where + ": trailing bytes");
  }
};

void check_against_layout(const std::vector<Parameter>& got, const std::vector<Parameter>& want,
                          const std::string& where) {
  if (got.size() != want.size())
    throw DataError(where + ": " + std::to_string(got.size()) + " parameters, architecture needs " +
                    std::to_string(want.size()));
  for (size_t i = 0; i < got.size(); ++i) {
    if (got[i].name != want[i].name)
      throw DataError(where + ": parameter " + std::to_string(i) + " is '" + got[i].name +
                      "', architecture needs '" + want[i].name + "'");
    if (!got[i].tensor.same_shape(want[i].tensor))
      throw DataError(where + ": parameter '" + got[i].name + "' has shape " +
                      got[i].tensor.shape_string() + ", architecture needs " +
                      want[i].tensor.shape_string());
  }
}

StructureKind structure_kind_from_u8(uint8_t v, const std::string& where) {
  if (v > 2) throw DataError(where + ": structure kind " + std::to_string(v));
  return static_cast<StructureKind>(v);
}

}  // namespace

const char* to_string(CheckpointKind kind) {
  switch (kind) {
    case CheckpointKind::Baseline: return "baseline";
    case CheckpointKind::Masked: return "masked";
    default: return "compact";
  }
}

CheckpointKind checkpoint_kind_from(const std::string& name) {
  if (name == "baseline") return CheckpointKind::Baseline;
  if (name == "masked") return CheckpointKind::Masked;
  if (name == "compact") return CheckpointKind::Compact;
  throw DataError("unknown checkpoint kind '" + name + "'");
}

MaskedNetwork Checkpoint::masked() const {
  if (kind != CheckpointKind::Masked)
    throw ConfigError(std::string("checkpoint holds a ") + to_string(kind) +
                      " network, not a masked one");
  MaskedNetwork mn;
  mn.net = net;
  mn.mask = mask;
  mn.dropout_rate = dropout_rate;
  return mn;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const bool masked = ck.kind == CheckpointKind::Masked;
  if (masked && ck.mask.size() == 0)
    throw ConfigError("masked checkpoint without mask slots");
  if (ck.iteration < 0) throw ConfigError("checkpoint with negative iteration");

  std::vector<std::pair<std::string, std::string>> sections;

  nlohmann::json meta{{"version", 1},
                      {"kind", to_string(ck.kind)},
                      {"iteration", ck.iteration},
                      {"seed", ck.seed},
                      {"dropout", ck.dropout_rate}};
  sections.emplace_back("meta", meta.dump());
  sections.emplace_back("arch", to_json(ck.net.spec).dump());
  {
    Builder b;
    b.params(ck.net.params);
    sections.emplace_back("params", std::move(b.bytes));
  }
  if (masked) {
    Builder b;
    b.tensor(ck.mask.values);
    b.u32(static_cast<uint32_t>(ck.mask.sites.size()));
    for (const auto& s : ck.mask.sites) {
      b.u8(static_cast<uint8_t>(s.kind));
      b.u8(static_cast<uint8_t>(s.mode));
      b.i32(s.layer);
      b.i32(s.branch);
      b.u8(s.inner ? 1 : 0);
      b.i32(s.offset);
      b.i32(s.count);
      b.i32(s.group_size);
      b.i32(s.producer_layer);
    }
    sections.emplace_back("mask", std::move(b.bytes));

    Builder j;
    j.i32(ck.judge.in_features);
    j.params(ck.judge.params);
    sections.emplace_back("judge", std::move(j.bytes));

    Builder o;
    o.u32(static_cast<uint32_t>(ck.state.g_velocity.size()));
    for (const auto& t : ck.state.g_velocity) o.tensor(t);
    o.f64(ck.state.fista.alpha);
    o.i64(ck.state.fista.k);
    const bool has_prev = ck.state.fista.m_prev.size() > 0;
    o.u8(has_prev ? 1 : 0);
    if (has_prev) o.tensor(ck.state.fista.m_prev);
    const bool has_mv = ck.state.mask_velocity.size() > 0;
    o.u8(has_mv ? 1 : 0);
    if (has_mv) o.tensor(ck.state.mask_velocity);
    sections.emplace_back("opt", std::move(o.bytes));
  }

  Builder file;
  file.bytes.append(kMagic, sizeof kMagic);
  file.u32(static_cast<uint32_t>(sections.size()));
  for (auto& [name, payload] : sections) {
    file.str(name);
    file.u64(payload.size());
    file.bytes.append(payload);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(file.bytes.data(), static_cast<std::streamsize>(file.bytes.size()));
  if (!out.good()) throw DataError("cannot write " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Cursor top{reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), 0, path};
  top.need(sizeof kMagic);
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw DataError(path + ": not a checkpoint (bad magic)");
  top.at = sizeof kMagic;

  const uint32_t section_count = top.u32();
  std::map<std::string, std::pair<size_t, size_t>> sections;  // name -> (offset, size)
  for (uint32_t i = 0; i < section_count; ++i) {
    const std::string name = top.str();
    const uint64_t len = top.u64();
    top.need(len);
    if (!sections.emplace(name, std::make_pair(top.at, static_cast<size_t>(len))).second)
      throw DataError(path + ": duplicate section '" + name + "'");
    top.at += len;
  }
  top.done();

  auto section = [&](const std::string& name) -> Cursor {
    auto it = sections.find(name);
    if (it == sections.end()) throw DataError(path + ": missing section '" + name + "'");
    const auto [offset, size] = it->second;
    sections.erase(it);
    return Cursor{reinterpret_cast<const unsigned char*>(bytes.data()) + offset, size, 0,
                  path + " [" + name + "]"};
  };

  Checkpoint ck;
  {
    Cursor c = section("meta");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(c.p), c.n));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " [meta]: " + e.what());
    }
    for (const auto& [key, value] : meta.items()) {
      (void)value;
      if (key != "version" && key != "kind" && key != "iteration" && key != "seed" && key != "dropout")
        throw DataError(path + " [meta]: unknown key '" + key + "'");
    }
    if (!meta.contains("version") || meta["version"] != 1)
      throw DataError(path + " [meta]: unsupported version");
    ck.kind = checkpoint_kind_from(meta.at("kind").get<std::string>());
    ck.iteration = meta.at("iteration").get<int64_t>();
    if (ck.iteration < 0) throw DataError(path + " [meta]: negative iteration");
    ck.seed = meta.at("seed").get<uint64_t>();
    ck.dropout_rate = meta.at("dropout").get<double>();
  }
  {
    Cursor c = section("arch");
    nlohmann::json arch;
    try {
      arch = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(c.p), c.n));
      ck.net.spec = architecture_from_json(arch);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " [arch]: " + e.what());
    } catch (const ConfigError& e) {
      throw DataError(path + " [arch]: " + e.what());
    }
  }
  {
    Cursor c = section("params");
    ck.net.params = c.params();
    c.done();
    check_against_layout(ck.net.params, init_network(ck.net.spec, 0).params, path + " [params]");
  }

  if (ck.kind == CheckpointKind::Masked) {
    {
      Cursor c = section("mask");
      ck.mask.values = c.tensor();
      if (ck.mask.values.rank() != 1) throw DataError(path + " [mask]: values must be rank 1");
      const uint32_t nsites = c.u32();
      for (uint32_t i = 0; i < nsites; ++i) {
        AttachmentSite s;
        s.kind = structure_kind_from_u8(c.u8(), c.where);
        const uint8_t mode = c.u8();
        if (mode > 1) throw DataError(c.where + ": compaction mode " + std::to_string(mode));
        s.mode = static_cast<CompactionMode>(mode);
        s.layer = c.i32();
        s.branch = c.i32();
        s.inner = c.u8() != 0;
        s.offset = c.i32();
        s.count = c.i32();
        s.group_size = c.i32();
        s.producer_layer = c.i32();
        if (s.offset < 0 || s.count <= 0 || s.offset + s.count > ck.mask.size() || s.group_size <= 0 ||
            s.layer < 0 || static_cast<size_t>(s.layer) >= ck.net.spec.layers.size())
          throw DataError(c.where + ": site " + std::to_string(i) + " out of range");
        ck.mask.sites.push_back(s);
      }
      c.done();
    }
    {
      Cursor c = section("judge");
      ck.judge.in_features = c.i32();
      if (ck.judge.in_features <= 0) throw DataError(c.where + ": nonpositive feature width");
      ck.judge.params = c.params();
      c.done();
      check_against_layout(ck.judge.params, init_discriminator(ck.judge.in_features, 0).params,
                           path + " [judge]");
    }
    {
      Cursor c = section("opt");
      const uint32_t nv = c.u32();
      if (nv != 0 && nv != ck.net.params.size())
        throw DataError(c.where + ": " + std::to_string(nv) + " velocity tensors for " +
                        std::to_string(ck.net.params.size()) + " parameters");
      for (uint32_t i = 0; i < nv; ++i) {
        Tensor t = c.tensor();
        if (!t.same_shape(ck.net.params[i].tensor))
          throw DataError(c.where + ": velocity " + std::to_string(i) + " shape mismatch");
        ck.state.g_velocity.push_back(std::move(t));
      }
      ck.state.fista.alpha = c.f64();
      ck.state.fista.k = c.i64();
      if (c.u8()) {
        ck.state.fista.m_prev = c.tensor();
        if (!ck.state.fista.m_prev.same_shape(ck.mask.values))
          throw DataError(c.where + ": proximal history shape mismatch");
      }
      if (c.u8()) {
        ck.state.mask_velocity = c.tensor();
        if (!ck.state.mask_velocity.same_shape(ck.mask.values))
          throw DataError(c.where + ": mask velocity shape mismatch");
      }
      c.done();
    }
    ck.state.iteration = ck.iteration;
  }

  if (!sections.empty())
    throw DataError(path + ": unknown section '" + sections.begin()->first + "'");
  return ck;
}

}  // namespace gal
