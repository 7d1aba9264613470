#pragma once

#include <cstdint>
#include <vector>

#include "gal/rng.hpp"
#include "gal/tensor.hpp"

namespace gal {

// Images with optional labels. The mask-learning path only ever touches the
// images; labels exist for pretraining, fine-tuning and error evaluation.
struct ImageSet {
  Tensor images;            // [N, C, H, W]
  std::vector<int> labels;  // empty, or one class index per image
};

// Deterministic mini-batch schedule over an image tensor. Each pass visits
// floor(N/batch) full batches of a per-pass shuffle; the sample order for any
// global batch index is a pure function of (seed, index), so a run can be
// replayed or resumed from the iteration counter alone.
class BatchSchedule {
 public:
  // `images` must outlive the schedule.
  BatchSchedule(const Tensor& images, int batch, uint64_t seed);

  int batch_size() const { return batch_; }
  int batches_per_pass() const { return per_pass_; }

  // Sample rows making up global batch `index` (0-based, monotone across
  // passes). Label lookups go through this so the image path stays label-free.
  const std::vector<int>& rows(int64_t index) const;
  // Copies those rows into a [batch, C, H, W] tensor.
  Tensor batch(int64_t index) const;

 private:
  const Tensor* images_;
  int batch_;
  int per_pass_;
  uint64_t seed_;
  mutable int64_t cached_pass_ = -1;
  mutable std::vector<int> order_;
  mutable std::vector<int> window_;
};

}  // namespace gal
