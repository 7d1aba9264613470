#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace gal {

// Dense row-major tensor of doubles with an optional gradient buffer of the
// same shape. Shapes are validated on construction: every extent must be
// positive and their product must equal the number of stored values.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t size() const { return static_cast<int64_t>(values_.size()); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](int64_t i) { return values_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return values_[static_cast<size_t>(i)]; }

  // Rank-checked element access, used mostly by tests and reference loops.
  double& at(int i);
  double& at(int i, int j);
  double& at(int i, int j, int k);
  double& at(int i, int j, int k, int l);
  double at(int i) const { return const_cast<Tensor*>(this)->at(i); }
  double at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }
  double at(int i, int j, int k) const { return const_cast<Tensor*>(this)->at(i, j, k); }
  double at(int i, int j, int k, int l) const { return const_cast<Tensor*>(this)->at(i, j, k, l); }

  bool has_grad() const { return !grad_.empty(); }
  std::span<double> grad();              // allocates zeros on first use
  std::span<const double> grad() const;  // requires has_grad()
  void zero_grad();
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;
  // Throws std::domain_error mentioning `name` if any value is NaN/inf.
  void require_finite(const std::string& name) const;

  std::string shape_string() const;

 private:
  std::vector<int> shape_;
  std::vector<double> values_;
  std::vector<double> grad_;
};

int64_t shape_product(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace gal
