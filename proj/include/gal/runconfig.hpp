#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "gal/architecture.hpp"
#include "gal/network.hpp"
#include "gal/pruner.hpp"
#include "gal/trainer.hpp"

namespace gal {

struct ArchChoice {
  std::string name = "lenet";  // lenet | minires | miniinception
  std::array<int, 3> lenet_filters{20, 50, 500};
  int blocks = 3, width = 8;      // minires
  int modules = 2, branches = 3;  // miniinception
};

ArchitectureSpec build_architecture(const ArchChoice& arch);

struct DataPaths {
  std::string train_images, train_labels, test_images, test_labels;
};

// File form of a whole run: architecture, data, structure kinds and the
// per-stage hyperparameters, with every default pre-filled so the parsed
// struct is always complete. One seed feeds every stage's streams.
struct RunConfig {
  uint64_t seed = 1;
  std::string out_dir = ".";
  ArchChoice arch;
  DataPaths data;
  StructureKinds structures{true, false, false};
  TrainConfig gal;            // mask learning; gal.seed mirrors the top-level seed
  int gal_epochs = 30;        // used when gal.max_iterations == 0
  SupervisedConfig pretrain;  // label-consuming baseline training
  FinetuneConfig finetune;    // label-consuming recovery after compaction
  double prune_threshold = 0.0;

  RunConfig() { pretrain.epochs = 10; }
  void reseed(uint64_t s);  // rewrites seed and every per-stage copy
};

// Strict parse: any unknown key at any level raises ConfigError naming it,
// as do type and range violations. Absent keys keep their defaults.
RunConfig runconfig_from_json(const nlohmann::json& j);
RunConfig load_runconfig(const std::string& path);

// Fully-resolved echo (defaults included); parsing it back reproduces the
// config bit for bit, which is what makes a run reproducible from its echo.
nlohmann::json to_json(const RunConfig& config);

}  // namespace gal
