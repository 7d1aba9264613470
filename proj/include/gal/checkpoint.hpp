#pragma once

#include <cstdint>
#include <string>

#include "gal/discriminator.hpp"
#include "gal/network.hpp"
#include "gal/trainer.hpp"

namespace gal {

enum class CheckpointKind { Baseline, Masked, Compact };
const char* to_string(CheckpointKind kind);
CheckpointKind checkpoint_kind_from(const std::string& name);

// Everything a pipeline stage hands to the next one, in a single file:
// a plain network (baseline or compact), or a masked network mid-optimization
// together with the judge and the optimizer state. Streams are derived from
// (seed, counter) everywhere, so `seed` plus `iteration` pin the randomness
// and a resumed run replays bitwise.
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::Baseline;
  int64_t iteration = 0;  // completed mask-learning iterations (Masked only)
  uint64_t seed = 0;      // run seed the stage's streams derive from
  Network net;
  // Masked only:
  SoftMask mask;
  double dropout_rate = 0.1;
  Discriminator judge;
  TrainerState state;  // velocities and the proximal sequence; history is not persisted

  MaskedNetwork masked() const;  // ConfigError unless kind == Masked
};

// Single-file binary container: magic "GALCKPT1", then length-prefixed named
// sections (meta/arch/params, plus mask/judge/opt for Masked). All integers
// little-endian fixed width; parameters stored as raw 64-bit doubles, so a
// load→save round-trip is byte-identical.
void save_checkpoint(const Checkpoint& ck, const std::string& path);
// Strict: bad magic, unknown or missing sections, truncation, trailing bytes,
// or parameters that do not match the architecture all raise DataError.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gal
