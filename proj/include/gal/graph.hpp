#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gal/rng.hpp"
#include "gal/tensor.hpp"

namespace gal {

using ValueId = int32_t;

// Reverse-mode tape. Nodes are appended in creation order; backward() walks
// them in reverse. Values are dense double tensors.
//
// Conventions that tests rely on:
//  * conv2d / linear / maxpool2 use one accumulator per output element with a
//    pinned summation order (conv: channel, then kernel row, then kernel
//    column; linear: input feature ascending), so their outputs equal a naive
//    reference loop bit for bit.
//  * backward() REPLACES the grad buffer of each bound trainable tensor (it
//    does not accumulate across separate backward calls).
//  * Reductions and parallel splits are independent of worker count.
class Graph {
 public:
  explicit Graph(bool track_gradients = true) : track_(track_gradients) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracking() const { return track_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  // Binds an external tensor. The tensor must outlive the graph and stay
  // finite; trainable leaves receive their gradient on backward().
  ValueId leaf(Tensor& bound, bool trainable, std::string name);
  // Copies a value into the graph (inputs, feature batches, ...).
  ValueId constant(Tensor value, std::string name = "const");

  const Tensor& value(ValueId id) const;
  const std::vector<int>& shape(ValueId id) const { return value(id).shape(); }
  // Gradient of a node after backward(); empty span when it was not reached.
  std::span<const double> grad(ValueId id) const;

  // --- operators -----------------------------------------------------------
  // x:[N,C,H,W] w:[K,C,kh,kw] b:[K] -> [N,K,H-kh+1,W-kw+1]; valid, stride 1.
  ValueId conv2d(ValueId x, ValueId w, ValueId b);
  // x:[N,F] w:[F,O] b:[O] -> [N,O].
  ValueId linear(ValueId x, ValueId w, ValueId b);
  ValueId relu(ValueId x);
  // 2x2 / stride 2; requires even spatial extents. Ties keep the first max in
  // row-major window order.
  ValueId maxpool2(ValueId x);
  // 3x3 / stride 1 (valid); shape-preserving when preceded by pad2d(x, 1).
  ValueId maxpool3(ValueId x);
  // Zero padding of the two trailing spatial dims by p on every side.
  ValueId pad2d(ValueId x, int p);
  // Inverted-dropout noise. active=false returns x unchanged (same id) and
  // consumes no randomness; active=true draws one uniform per element from rng
  // in row-major order and scales kept elements by 1/(1-rate).
  ValueId dropout_noise(ValueId x, double rate, bool active, Rng& rng);
  ValueId sigmoid(ValueId x);
  ValueId log(ValueId x);
  ValueId clamp(ValueId x, double lo, double hi);
  ValueId add(ValueId a, ValueId b);
  ValueId sub(ValueId a, ValueId b);
  ValueId mul(ValueId a, ValueId b);
  // a*x + b, scalar coefficients.
  ValueId affine(ValueId x, double a, double b);
  ValueId sum(ValueId x);
  ValueId mean(ValueId x);
  // Σ x², as one fused node.
  ValueId sum_squares(ValueId x);
  // Views each sample of x (any rank >= 2, leading dim = batch) as n_groups
  // consecutive groups of group_size elements and scales group g by
  // m[offset+g]. Used for channel masks (group = one channel's H*W plane or a
  // flattened-feature group) and per-feature masks (group_size 1).
  ValueId scale_groups(ValueId x, ValueId m, int offset, int n_groups, int group_size);
  // Scales the whole tensor by m[index] (block / branch masks).
  ValueId scale_all(ValueId x, ValueId m, int index);
  // Concatenates rank-4 tensors along the channel axis.
  ValueId concat_channels(const std::vector<ValueId>& parts);
  // [N,C,H,W] -> [N,C*H*W].
  ValueId flatten(ValueId x);
  // Selects axis-1 slices (channels of rank-4, features of rank-2) listed in
  // idx; idx must be strictly increasing and in range.
  ValueId gather_features(ValueId x, const std::vector<int>& idx);
  // Mean negative log-likelihood with a fused, shift-stable log-softmax.
  // logits:[N,K]; labels holds N class indices.
  ValueId cross_entropy(ValueId logits, const std::vector<int>& labels);

  // Seeds d(loss)/d(loss)=1 and runs the tape backwards. loss must be scalar
  // and finite. Trainable bound leaves that the loss does not reach get a zero
  // gradient and a one-line warning on stderr.
  void backward(ValueId loss);

 private:
  struct Node {
    Tensor value;            // owned value; empty when bound
    Tensor* bound = nullptr; // external storage for leaves
    bool trainable = false;
    bool needs_grad = false;
    std::vector<double> grad;
    std::function<void()> backprop;
    std::string name;
  };

  ValueId push(Node n);
  const Tensor& val(ValueId id) const { return nodes_[static_cast<size_t>(id)].bound ? *nodes_[static_cast<size_t>(id)].bound : nodes_[static_cast<size_t>(id)].value; }
  std::vector<double>& grad_buf(ValueId id);
  bool wants(ValueId id) const { return track_ && nodes_[static_cast<size_t>(id)].needs_grad; }
  void check_id(ValueId id) const;

  bool track_;
  bool ran_backward_ = false;
  std::vector<Node> nodes_;
};

// v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v.
void sgd_momentum_step(Tensor& param, std::span<const double> grad, Tensor& velocity,
                       double lr, double momentum, double weight_decay);

}  // namespace gal
