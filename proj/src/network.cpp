// SPDX-License-Identifier: Apache-2.0
#include "foldkit/network.hpp"

#include <cmath>

#include "foldkit/error.hpp"

namespace foldkit {

const char* to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::Dense: return "dense";
    case BlockKind::Conv2D: return "conv2d";
    case BlockKind::BatchNorm: return "batchnorm";
    case BlockKind::ReLU: return "relu";
    case BlockKind::AvgPool: return "avgpool";
    case BlockKind::Flatten: return "flatten";
    case BlockKind::Residual: return "residual";
  }
  return "?";
}

std::string to_string(const BlockRef& ref) {
  std::string s = "block " + std::to_string(ref.top);
  if (ref.branch == Branch::Main) s += ".main[" + std::to_string(ref.inner) + "]";
  if (ref.branch == Branch::Shortcut) s += ".shortcut[" + std::to_string(ref.inner) + "]";
  return s;
}

Block& Network::at(const BlockRef& ref) {
  return const_cast<Block&>(std::as_const(*this).at(ref));
}

const Block& Network::at(const BlockRef& ref) const {
  if (ref.top >= blocks.size()) fail(ErrorKind::Value, "no " + to_string(ref));
  const Block& top = blocks[ref.top];
  if (ref.branch == Branch::None) return top;
  if (!top.is<Residual>()) fail(ErrorKind::Value, to_string(ref) + ": not a residual block");
  const auto& branch = ref.branch == Branch::Main ? top.as<Residual>().main : top.as<Residual>().shortcut;
  if (ref.inner >= branch.size()) fail(ErrorKind::Value, "no " + to_string(ref));
  return branch[ref.inner];
}

namespace {

[[noreturn]] void shape_fail(const std::string& where, std::size_t index, const std::string& what) {
  fail(ErrorKind::Shape, where + " block " + std::to_string(index) + ": " + what);
}

Shape infer_one(const Block& block, const Shape& in, const std::string& where, std::size_t i) {
  switch (block.kind()) {
    case BlockKind::Dense: {
      const auto& d = block.as<Dense>();
      if (d.weight.rank() != 2 || d.bias.size() != d.out_features()) shape_fail(where, i, "malformed dense parameters");
      if (in.size() != 1 || in[0] != d.in_features()) {
        shape_fail(where, i, "dense expects [" + std::to_string(d.in_features()) + "], got " + shape_string(in));
      }
      return {d.out_features()};
    }
    case BlockKind::Conv2D: {
      const auto& c = block.as<Conv2D>();
      if (c.weight.rank() != 4 || c.bias.size() != c.out_channels() || c.stride == 0) {
        shape_fail(where, i, "malformed conv parameters");
      }
      if (in.size() != 3 || in[0] != c.in_channels()) {
        shape_fail(where, i, "conv expects " + std::to_string(c.in_channels()) + " input channels, got " + shape_string(in));
      }
      if (in[1] + 2 * c.padding < c.weight.dim(2) || in[2] + 2 * c.padding < c.weight.dim(3)) {
        shape_fail(where, i, "conv kernel larger than padded input " + shape_string(in));
      }
      const std::size_t oh = (in[1] + 2 * c.padding - c.weight.dim(2)) / c.stride + 1;
      const std::size_t ow = (in[2] + 2 * c.padding - c.weight.dim(3)) / c.stride + 1;
      return {c.out_channels(), oh, ow};
    }
    case BlockKind::BatchNorm: {
      const auto& bn = block.as<BatchNorm>();
      const std::size_t ch = bn.channels();
      if (bn.beta.size() != ch || bn.running_mean.size() != ch || bn.running_var.size() != ch) {
        shape_fail(where, i, "batchnorm parameter lengths disagree");
      }
      if ((in.size() != 1 && in.size() != 3) || in[0] != ch) {
        shape_fail(where, i, "batchnorm over " + std::to_string(ch) + " channels given " + shape_string(in));
      }
      return in;
    }
    case BlockKind::ReLU:
      return in;
    case BlockKind::AvgPool: {
      const auto w = block.as<AvgPool>().window;
      if (in.size() != 3 || w == 0 || in[1] < w || in[2] < w) {
        shape_fail(where, i, "avgpool window " + std::to_string(w) + " on " + shape_string(in));
      }
      return {in[0], in[1] / w, in[2] / w};
    }
    case BlockKind::Flatten:
      return {element_count(in)};
    case BlockKind::Residual: {
      const auto& r = block.as<Residual>();
      const std::string sub = where + " block " + std::to_string(i);
      const Shape main_out = infer_block_shapes(r.main, in, sub + " main");
      const Shape short_out = infer_block_shapes(r.shortcut, in, sub + " shortcut");
      if (main_out != short_out) {
        shape_fail(where, i, "residual main path gives " + shape_string(main_out) + " but shortcut gives " +
                                 shape_string(short_out));
      }
      for (const auto& b : r.main) {
        if (b.is<Residual>()) shape_fail(where, i, "nested residual blocks are not supported");
      }
      for (const auto& b : r.shortcut) {
        if (b.is<Residual>()) shape_fail(where, i, "nested residual blocks are not supported");
      }
      return main_out;
    }
  }
  shape_fail(where, i, "unknown block kind");
}

}  // namespace

Shape infer_block_shapes(const std::vector<Block>& blocks, const Shape& in, const std::string& where,
                         std::vector<Shape>* outputs) {
  Shape cur = in;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    cur = infer_one(blocks[i], cur, where, i);
    if (outputs) outputs->push_back(cur);
  }
  return cur;
}

std::vector<Shape> infer_shapes(const Network& net) {
  std::vector<Shape> out;
  infer_block_shapes(net.blocks, net.input_shape, "network", &out);
  return out;
}

namespace {

void validate_blocks(const std::vector<Block>& blocks, const std::string& where) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const Block& b = blocks[i];
    auto finite = [&](const Tensor& t, const char* name) {
      if (!t.all_finite()) fail(ErrorKind::Value, where + " block " + std::to_string(i) + ": non-finite " + name);
    };
    switch (b.kind()) {
      case BlockKind::Dense:
        finite(b.as<Dense>().weight, "weight");
        finite(b.as<Dense>().bias, "bias");
        break;
      case BlockKind::Conv2D:
        finite(b.as<Conv2D>().weight, "weight");
        finite(b.as<Conv2D>().bias, "bias");
        break;
      case BlockKind::BatchNorm: {
        const auto& bn = b.as<BatchNorm>();
        finite(bn.gamma, "gamma");
        finite(bn.beta, "beta");
        finite(bn.running_mean, "running_mean");
        finite(bn.running_var, "running_var");
        for (double v : bn.running_var.values) {
          if (!(v > 0.0)) fail(ErrorKind::Value, where + " block " + std::to_string(i) + ": running_var must be > 0");
        }
        if (!(bn.epsilon >= 0.0)) fail(ErrorKind::Value, where + " block " + std::to_string(i) + ": negative epsilon");
        break;
      }
      case BlockKind::Residual:
        validate_blocks(b.as<Residual>().main, where + " block " + std::to_string(i) + " main");
        validate_blocks(b.as<Residual>().shortcut, where + " block " + std::to_string(i) + " shortcut");
        break;
      default:
        break;
    }
  }
}

template <class Fn>
void visit_params(std::vector<Block>& blocks, Fn&& fn) {
  for (auto& b : blocks) {
    switch (b.kind()) {
      case BlockKind::Dense:
        fn(b.template as<Dense>().weight, true);
        fn(b.template as<Dense>().bias, false);
        break;
      case BlockKind::Conv2D:
        fn(b.template as<Conv2D>().weight, true);
        fn(b.template as<Conv2D>().bias, false);
        break;
      case BlockKind::BatchNorm:
        fn(b.template as<BatchNorm>().gamma, false);
        fn(b.template as<BatchNorm>().beta, false);
        break;
      case BlockKind::Residual:
        visit_params(b.template as<Residual>().main, fn);
        visit_params(b.template as<Residual>().shortcut, fn);
        break;
      default:
        break;
    }
  }
}

}  // namespace

void validate(const Network& net) {
  const auto shapes = infer_shapes(net);
  const Shape last = shapes.empty() ? net.input_shape : shapes.back();
  if (last.size() != 1 || last[0] != net.class_count) {
    fail(ErrorKind::Shape, "network output " + shape_string(last) + " does not match class_count " +
                               std::to_string(net.class_count));
  }
  validate_blocks(net.blocks, "network");
}

void for_each_parameter(Network& net, const std::function<void(Tensor&)>& fn) {
  visit_params(net.blocks, [&](Tensor& t, bool) { fn(t); });
}

void for_each_parameter_tagged(Network& net, const std::function<void(Tensor&, bool)>& fn) {
  visit_params(net.blocks, fn);
}

void for_each_parameter_pair(Network& a, const Network& b,
                             const std::function<void(Tensor&, const Tensor&)>& fn) {
  std::vector<const Tensor*> theirs;
  Network& bm = const_cast<Network&>(b);
  visit_params(bm.blocks, [&](Tensor& t, bool) { theirs.push_back(&t); });
  std::size_t i = 0;
  visit_params(a.blocks, [&](Tensor& t, bool) {
    if (i >= theirs.size() || theirs[i]->shape != t.shape) {
      fail(ErrorKind::Shape, "parameter structure mismatch");
    }
    fn(t, *theirs[i++]);
  });
  if (i != theirs.size()) fail(ErrorKind::Shape, "parameter structure mismatch");
}

Network zeros_like(const Network& net) {
  Network z = net;
  for_each_parameter(z, [](Tensor& t) { std::fill(t.values.begin(), t.values.end(), 0.0); });
  return z;
}

std::size_t parameter_count(const Network& net) {
  std::size_t n = 0;
  Network copy = net;
  for_each_parameter(copy, [&](Tensor& t) { n += t.size(); });
  return n;
}

Block make_dense(std::size_t in, std::size_t out) {
  return Block{Dense{Tensor({out, in}), Tensor({out})}};
}

Block make_conv(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                std::size_t padding) {
  return Block{Conv2D{Tensor({out_channels, in_channels, kernel, kernel}), Tensor({out_channels}), stride, padding}};
}

Block make_batchnorm(std::size_t channels, double epsilon) {
  return Block{BatchNorm{Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0),
                         Tensor({channels}, 1.0), epsilon}};
}

Block make_relu() { return Block{ReLU{}}; }
Block make_avgpool(std::size_t window) { return Block{AvgPool{window}}; }
Block make_flatten() { return Block{Flatten{}}; }
Block make_residual(std::vector<Block> main, std::vector<Block> shortcut) {
  return Block{Residual{std::move(main), std::move(shortcut)}};
}

}  // namespace foldkit
