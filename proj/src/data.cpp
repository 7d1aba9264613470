#include "gal/data.hpp"

#include <cstring>
#include <numeric>

#include "gal/errors.hpp"

namespace gal {

BatchSchedule::BatchSchedule(const Tensor& images, int batch, uint64_t seed)
    : images_(&images), batch_(batch), seed_(seed) {
  if (images.rank() != 4) throw DataError("batch schedule: images must be [N,C,H,W], got " + images.shape_string());
  if (batch < 1) throw ConfigError("batch schedule: batch size must be positive");
  per_pass_ = images.dim(0) / batch;
  if (per_pass_ < 1)
    throw ConfigError("batch schedule: batch size " + std::to_string(batch) + " exceeds dataset size " +
                      std::to_string(images.dim(0)));
}

const std::vector<int>& BatchSchedule::rows(int64_t index) const {
  if (index < 0) throw std::invalid_argument("batch schedule: negative batch index");
  const int64_t pass = index / per_pass_;
  if (pass != cached_pass_) {
    order_.resize(static_cast<size_t>(images_->dim(0)));
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(derive_seed(seed_, {tag("pass"), static_cast<uint64_t>(pass)}));
    rng.shuffle(order_);
    cached_pass_ = pass;
  }
  const int slot = static_cast<int>(index % per_pass_);
  window_.assign(order_.begin() + static_cast<ptrdiff_t>(slot) * batch_,
                 order_.begin() + static_cast<ptrdiff_t>(slot + 1) * batch_);
  return window_;
}

Tensor BatchSchedule::batch(int64_t index) const {
  const std::vector<int>& picks = rows(index);
  const int64_t sample = images_->size() / images_->dim(0);
  Tensor out({batch_, images_->dim(1), images_->dim(2), images_->dim(3)});
  for (int i = 0; i < batch_; ++i)
    std::memcpy(out.data() + i * sample, images_->data() + picks[static_cast<size_t>(i)] * sample,
                sizeof(double) * static_cast<size_t>(sample));
  return out;
}

}  // namespace gal
