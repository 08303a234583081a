// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "foldkit/tensor.hpp"

namespace foldkit {

/// Fully connected layer; weight is [out x in].
struct Dense {
  Tensor weight;
  Tensor bias;

  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

/// 2-D convolution, NCHW activations, weight [c_out x c_in x kh x kw].
struct Conv2D {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
};

/// Per-channel normalization, evaluated with running statistics at inference.
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = 1e-5;

  std::size_t channels() const { return gamma.size(); }
};

struct ReLU {};

/// Non-overlapping average pooling with a square window (stride == window).
struct AvgPool {
  std::size_t window = 2;
};

/// [B, C, H, W] -> [B, C*H*W], channel-major.
struct Flatten {};

struct Block;

/// output = main(x) + shortcut(x); an empty shortcut is the identity.
struct Residual {
  std::vector<Block> main;
  std::vector<Block> shortcut;
};

enum class BlockKind { Dense, Conv2D, BatchNorm, ReLU, AvgPool, Flatten, Residual };

struct Block {
  std::variant<Dense, Conv2D, BatchNorm, ReLU, AvgPool, Flatten, Residual> op;

  BlockKind kind() const { return static_cast<BlockKind>(op.index()); }
  template <class T> T& as() { return std::get<T>(op); }
  template <class T> const T& as() const { return std::get<T>(op); }
  template <class T> bool is() const { return std::holds_alternative<T>(op); }
};

const char* to_string(BlockKind kind);

enum class Branch { None, Main, Shortcut };

/// Address of a block: a top-level index, optionally descending one level into
/// a residual branch.
struct BlockRef {
  std::size_t top = 0;
  Branch branch = Branch::None;
  std::size_t inner = 0;

  friend bool operator==(const BlockRef&, const BlockRef&) = default;
  friend auto operator<=>(const BlockRef&, const BlockRef&) = default;
};

std::string to_string(const BlockRef& ref);

struct Network {
  std::vector<Block> blocks;
  Shape input_shape;  // per-sample, e.g. {16} or {C, H, W}
  std::size_t class_count = 0;

  Block& at(const BlockRef& ref);
  const Block& at(const BlockRef& ref) const;
};

/// Per-sample output shape of every top-level block given the network input
/// shape; throws a Shape error naming the first offending block.
std::vector<Shape> infer_shapes(const Network& net);

/// Shape of a per-sample tensor after running `blocks` on `in`.
Shape infer_block_shapes(const std::vector<Block>& blocks, const Shape& in,
                         const std::string& where, std::vector<Shape>* outputs = nullptr);

/// Checks structural invariants (shapes, positive running variance, finite
/// values, logits width == class_count).
void validate(const Network& net);

/// Visit every trainable tensor (weights, biases, gamma, beta). Both networks
/// must share the same structure when using the paired form.
void for_each_parameter(Network& net, const std::function<void(Tensor&)>& fn);
void for_each_parameter_pair(Network& a, const Network& b,
                             const std::function<void(Tensor&, const Tensor&)>& fn);
/// Same as for_each_parameter but marks which tensors are weights (subject to
/// decay) versus biases/affine parameters.
void for_each_parameter_tagged(Network& net, const std::function<void(Tensor&, bool is_weight)>& fn);

/// Copy of `net` with every trainable tensor zeroed (used as a gradient buffer).
Network zeros_like(const Network& net);

std::size_t parameter_count(const Network& net);

/// Convenience constructors with zero-initialized parameters.
Block make_dense(std::size_t in, std::size_t out);
Block make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                std::size_t stride = 1, std::size_t padding = 0);
Block make_batchnorm(std::size_t channels, double epsilon = 1e-5);
Block make_relu();
Block make_avgpool(std::size_t window);
Block make_flatten();
Block make_residual(std::vector<Block> main, std::vector<Block> shortcut = {});

}  // namespace foldkit
