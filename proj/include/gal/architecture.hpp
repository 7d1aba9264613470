#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

namespace gal {

// Layer descriptors. Convolutions are valid-only / stride 1; composite layers
// (residual blocks, inception modules) add their own zero padding internally
// so they preserve spatial shape.
//
// `in_index`, when non-empty, restricts the layer to the listed input channels
// (features for linear layers); it must be strictly increasing. Compaction
// uses it for inputs that tap a shared stream, where the producing side cannot
// be shrunk.

struct ConvLayer {
  int out_channels = 0;
  int kh = 0, kw = 0;
  std::vector<int> in_index;
  bool operator==(const ConvLayer&) const = default;
};

struct LinearLayer {
  int out_features = 0;
  std::vector<int> in_index;
  bool operator==(const LinearLayer&) const = default;
};

struct ReluLayer {
  bool operator==(const ReluLayer&) const = default;
};
struct MaxPool2Layer {
  bool operator==(const MaxPool2Layer&) const = default;
};
struct FlattenLayer {
  bool operator==(const FlattenLayer&) const = default;
};

// out = conv_b(relu(conv_a(pad(x)))) + x, both convs 3x3; conv_b restores the
// stream width so the sum is well-formed. The block's mask slot scales the
// conv_b output before the addition.
struct ResidualBlockLayer {
  int mid_channels = 0;
  std::vector<int> in_index;  // input selection of conv_a
  bool operator==(const ResidualBlockLayer&) const = default;
};

enum class BranchVariant { Conv1, Conv3, Pool };

struct InceptionBranch {
  BranchVariant variant = BranchVariant::Conv1;
  int mid_channels = 0;  // Conv3 only: width of the 1x1 reducer
  int out_channels = 0;
  std::vector<int> in_index;
  bool operator==(const InceptionBranch&) const = default;
};

// Parallel branches concatenated along channels. Each branch's mask slot
// scales its output before concatenation.
struct InceptionModuleLayer {
  std::vector<InceptionBranch> branches;
  bool operator==(const InceptionModuleLayer&) const = default;
};

using LayerDesc = std::variant<ConvLayer, LinearLayer, ReluLayer, MaxPool2Layer, FlattenLayer,
                               ResidualBlockLayer, InceptionModuleLayer>;

struct ArchitectureSpec {
  std::array<int, 3> input_chw{1, 28, 28};
  int classes = 10;
  std::vector<LayerDesc> layers;
  bool operator==(const ArchitectureSpec&) const = default;
};

// Shape of the tensor flowing between layers: spatial [C,H,W] until a flatten,
// features [F] afterwards.
struct FlowShape {
  bool spatial = true;
  int c = 0, h = 0, w = 0;
  int f = 0;
  int64_t elements() const { return spatial ? static_cast<int64_t>(c) * h * w : f; }
  bool operator==(const FlowShape&) const = default;
};

// Per-layer shapes computed by validate(): in[i] feeds layers[i], out[i] is
// its result; out.back() must be [classes].
struct ShapePlan {
  std::vector<FlowShape> in, out;
};

// Validates layer compatibility end to end and returns the flow shapes.
// Throws ConfigError with the offending layer index in the message.
ShapePlan validate(const ArchitectureSpec& spec);

struct LayerCost {
  std::string name;
  int64_t flops = 0;   // multiply-accumulates
  int64_t params = 0;  // weights + biases
};

struct CostReport {
  int64_t flops = 0;
  int64_t weight_params = 0;
  int64_t bias_params = 0;
  int64_t params = 0;  // weight_params + bias_params
  std::vector<LayerCost> per_layer;
};

// Exact integer accounting. Convolution: outH*outW*outC*kh*kw*inC; linear:
// in*out; pooling, padding, activations, concatenation and the residual add
// are free by convention. Parameters count weights and biases.
CostReport count_cost(const ArchitectureSpec& spec);

// Trainable widths in layer order (conv out-channels and hidden linear
// out-features; the classifier layer is excluded), e.g. {20,50,500}.
std::vector<int> trainable_widths(const ArchitectureSpec& spec);

// "2.29M" style formatting used by cost reports: millions, two decimals.
std::string format_millions(int64_t count);
// "(92.6%)" style reduction of `now` relative to `base`, one decimal.
std::string format_reduction(int64_t base, int64_t now);

nlohmann::json to_json(const ArchitectureSpec& spec);
// Strict: unknown keys, missing fields, or invalid values raise ConfigError.
ArchitectureSpec architecture_from_json(const nlohmann::json& j);

// Stock architectures.
// 28x28 grayscale in: conv(f1,5x5), pool, conv(f2,5x5), pool, flatten,
// linear(f3), relu, linear(classes).
ArchitectureSpec build_lenet(const std::array<int, 3>& filters, int classes = 10);
// 10x10 grayscale in: conv(width,3x3), relu, `blocks` residual blocks, pool,
// flatten, linear(10).
ArchitectureSpec build_minires(int blocks, int width);
// 10x10 grayscale in: conv(6,3x3), relu, pool, `modules` inception modules of
// `branches` branches (variants cycling 1x1 / 1x1+3x3 / 1x1+pool, 4 channels
// each), flatten, linear(10).
ArchitectureSpec build_miniinception(int modules, int branches);

}  // namespace gal
