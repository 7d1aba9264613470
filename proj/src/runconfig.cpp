#include "gal/runconfig.hpp"

#include <fstream>
#include <set>

#include "gal/errors.hpp"

namespace gal {

namespace {

// Wraps one JSON object and tracks key consumption, so a typo'd or misplaced
// key is an error instead of a silent default.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.insert(key);
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  // Returns the child object (marking it consumed), or null if absent.
  const nlohmann::json* child(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      (void)value;
      if (!seen_.count(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void parse_eta(const nlohmann::json& j, const std::string& where, EtaSchedule& eta) {
  StrictObject o(j, where);
  o.field("base", eta.base);
  o.field("decay", eta.decay);
  o.field("every_epochs", eta.every_epochs);
  o.finish();
  if (!(eta.base > 0)) throw ConfigError(where + ".base: must be positive");
  if (!(eta.decay > 0)) throw ConfigError(where + ".decay: must be positive");
  if (eta.every_epochs <= 0) throw ConfigError(where + ".every_epochs: must be positive");
}

template <typename Cfg>
void parse_supervised(const nlohmann::json& j, const std::string& where, Cfg& cfg) {
  StrictObject o(j, where);
  if (const auto* eta = o.child("eta")) parse_eta(*eta, where + ".eta", cfg.eta);
  o.field("weight_decay", cfg.weight_decay);
  o.field("momentum", cfg.momentum);
  o.field("batch", cfg.batch);
  o.field("epochs", cfg.epochs);
  o.finish();
  if (cfg.weight_decay < 0) throw ConfigError(where + ".weight_decay: negative");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError(where + ".momentum: outside [0,1)");
  if (cfg.batch <= 0) throw ConfigError(where + ".batch: must be positive");
  if (cfg.epochs < 0) throw ConfigError(where + ".epochs: negative");
}

DRegKind d_reg_from(const std::string& name, const std::string& where) {
  if (name == "neg-l1") return DRegKind::NegL1;
  if (name == "neg-l2") return DRegKind::NegL2;
  if (name == "adversarial") return DRegKind::Adversarial;
  throw ConfigError(where + ": unknown judge regularizer '" + name +
                    "' (want neg-l1, neg-l2 or adversarial)");
}

MaskOptimizer mask_opt_from(const std::string& name, const std::string& where) {
  if (name == "fista") return MaskOptimizer::Fista;
  if (name == "sgd") return MaskOptimizer::Sgd;
  throw ConfigError(where + ": unknown mask optimizer '" + name + "' (want fista or sgd)");
}

}  // namespace

ArchitectureSpec build_architecture(const ArchChoice& arch) {
  if (arch.name == "lenet") return build_lenet(arch.lenet_filters);
  if (arch.name == "minires") return build_minires(arch.blocks, arch.width);
  if (arch.name == "miniinception") return build_miniinception(arch.modules, arch.branches);
  throw ConfigError("unknown architecture '" + arch.name +
                    "' (want lenet, minires or miniinception)");
}

void RunConfig::reseed(uint64_t s) {
  seed = s;
  gal.seed = s;
  pretrain.seed = s;
  finetune.seed = s;
}

RunConfig runconfig_from_json(const nlohmann::json& j) {
  RunConfig c;
  StrictObject o(j, "config");
  o.field("seed", c.seed);
  o.field("out_dir", c.out_dir);

  if (const auto* arch = o.child("arch")) {
    StrictObject a(*arch, "config.arch");
    a.field("name", c.arch.name);
    if (c.arch.name == "lenet") {
      a.field("filters", c.arch.lenet_filters);
    } else if (c.arch.name == "minires") {
      a.field("blocks", c.arch.blocks);
      a.field("width", c.arch.width);
    } else if (c.arch.name == "miniinception") {
      a.field("modules", c.arch.modules);
      a.field("branches", c.arch.branches);
    }
    a.finish();  // wrong-architecture keys surface here
  }

  if (const auto* data = o.child("data")) {
    StrictObject d(*data, "config.data");
    d.field("train_images", c.data.train_images);
    d.field("train_labels", c.data.train_labels);
    d.field("test_images", c.data.test_images);
    d.field("test_labels", c.data.test_labels);
    d.finish();
  }

  if (const auto* st = o.child("structures")) {
    StrictObject s(*st, "config.structures");
    s.field("channel", c.structures.channel);
    s.field("block", c.structures.block);
    s.field("branch", c.structures.branch);
    s.finish();
  }

  if (const auto* gal = o.child("gal")) {
    StrictObject g(*gal, "config.gal");
    g.field("lambda", c.gal.lambda);
    if (const auto* eta = g.child("eta")) parse_eta(*eta, "config.gal.eta", c.gal.eta);
    g.field("weight_decay", c.gal.weight_decay);
    g.field("momentum", c.gal.momentum);
    g.field("batch", c.gal.batch);
    g.field("d_steps", c.gal.d_steps);
    g.field("g_steps", c.gal.g_steps);
    g.field("epochs", c.gal_epochs);
    g.field("max_iterations", c.gal.max_iterations);
    g.field("dropout", c.gal.dropout);
    std::string reg = to_string(c.gal.d_reg);
    g.field("d_reg", reg);
    c.gal.d_reg = d_reg_from(reg, "config.gal.d_reg");
    g.field("d_reg_coeff", c.gal.d_reg_coeff);
    std::string opt = to_string(c.gal.mask_opt);
    g.field("mask_opt", opt);
    c.gal.mask_opt = mask_opt_from(opt, "config.gal.mask_opt");
    g.finish();
  }

  if (const auto* pre = o.child("pretrain")) parse_supervised(*pre, "config.pretrain", c.pretrain);
  if (const auto* ft = o.child("finetune")) parse_supervised(*ft, "config.finetune", c.finetune);
  o.field("prune_threshold", c.prune_threshold);
  o.finish();

  if (c.gal_epochs <= 0 && c.gal.max_iterations <= 0)
    throw ConfigError("config.gal: epochs or max_iterations must be positive");
  if (c.prune_threshold < 0) throw ConfigError("config.prune_threshold: negative");
  if (!c.structures.any()) throw ConfigError("config.structures: no structure kind enabled");
  try {
    c.gal.check();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config.gal: ") + e.what());
  }
  build_architecture(c.arch);  // rejects bad names and sizes up front
  c.reseed(c.seed);
  return c;
}

RunConfig load_runconfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  try {
    return runconfig_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json arch{{"name", c.arch.name}};
  if (c.arch.name == "lenet") {
    arch["filters"] = c.arch.lenet_filters;
  } else if (c.arch.name == "minires") {
    arch["blocks"] = c.arch.blocks;
    arch["width"] = c.arch.width;
  } else {
    arch["modules"] = c.arch.modules;
    arch["branches"] = c.arch.branches;
  }
  auto eta = [](const EtaSchedule& e) {
    return nlohmann::json{{"base", e.base}, {"decay", e.decay}, {"every_epochs", e.every_epochs}};
  };
  auto supervised = [&eta](const auto& s) {
    return nlohmann::json{{"eta", eta(s.eta)},
                          {"weight_decay", s.weight_decay},
                          {"momentum", s.momentum},
                          {"batch", s.batch},
                          {"epochs", s.epochs}};
  };
  return nlohmann::json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"arch", std::move(arch)},
      {"data",
       {{"train_images", c.data.train_images},
        {"train_labels", c.data.train_labels},
        {"test_images", c.data.test_images},
        {"test_labels", c.data.test_labels}}},
      {"structures",
       {{"channel", c.structures.channel},
        {"block", c.structures.block},
        {"branch", c.structures.branch}}},
      {"gal",
       {{"lambda", c.gal.lambda},
        {"eta", eta(c.gal.eta)},
        {"weight_decay", c.gal.weight_decay},
        {"momentum", c.gal.momentum},
        {"batch", c.gal.batch},
        {"d_steps", c.gal.d_steps},
        {"g_steps", c.gal.g_steps},
        {"epochs", c.gal_epochs},
        {"max_iterations", c.gal.max_iterations},
        {"dropout", c.gal.dropout},
        {"d_reg", to_string(c.gal.d_reg)},
        {"d_reg_coeff", c.gal.d_reg_coeff},
        {"mask_opt", to_string(c.gal.mask_opt)}}},
      {"pretrain", supervised(c.pretrain)},
      {"finetune", supervised(c.finetune)},
      {"prune_threshold", c.prune_threshold}};
}

}  // namespace gal
