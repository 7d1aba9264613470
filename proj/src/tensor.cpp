#include "gal/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace gal {

int64_t shape_product(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  values_.assign(static_cast<size_t>(shape_product(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_product(shape_) != static_cast<int64_t>(values_.size()))
    throw std::invalid_argument("tensor value count " + std::to_string(values_.size()) +
                                " does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  for (auto& x : t.values_) x = v;
  return t;
}

double& Tensor::at(int i) {
  if (rank() != 1) throw std::invalid_argument("rank-1 access on tensor " + shape_string());
  return values_[static_cast<size_t>(i)];
}

double& Tensor::at(int i, int j) {
  if (rank() != 2) throw std::invalid_argument("rank-2 access on tensor " + shape_string());
  return values_[static_cast<size_t>(i) * shape_[1] + j];
}

double& Tensor::at(int i, int j, int k) {
  if (rank() != 3) throw std::invalid_argument("rank-3 access on tensor " + shape_string());
  return values_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
}

double& Tensor::at(int i, int j, int k, int l) {
  if (rank() != 4) throw std::invalid_argument("rank-4 access on tensor " + shape_string());
  return values_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

std::span<double> Tensor::grad() {
  if (grad_.empty()) grad_.assign(values_.size(), 0.0);
  return grad_;
}

std::span<const double> Tensor::grad() const {
  if (grad_.empty()) throw std::logic_error("gradient read before any backward pass");
  return grad_;
}

void Tensor::zero_grad() {
  grad_.assign(values_.size(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::require_finite(const std::string& name) const {
  if (!all_finite()) throw std::domain_error("non-finite values in " + name);
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

}  // namespace gal
