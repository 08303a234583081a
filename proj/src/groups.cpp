// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <map>
#include <numeric>

#include "foldkit/error.hpp"
#include "foldkit/folding.hpp"

namespace foldkit {

namespace {

struct Axis {
  std::size_t channels = 0;
  std::vector<ProducerRef> producers;
  std::vector<BlockRef> batchnorms;
  std::vector<ConsumerRef> consumers;
  bool pinned = false;  // touches the network input or output
  bool residual = false;
};

class Walker {
 public:
  explicit Walker(const Network& net) {
    axes_.push_back({});
    parent_.push_back(0);
    const Shape& in = net.input_shape;
    axes_[0].channels = in.empty() ? 0 : in[0];
    axes_[0].pinned = true;
    State s{0, in, 1, std::nullopt};
    s = walk(net.blocks, s, 0, Branch::None);
    axes_[find(s.axis)].pinned = true;
  }

  std::vector<FoldableGroup> groups() {
    std::map<std::size_t, Axis> merged;
    for (std::size_t i = 0; i < axes_.size(); ++i) {
      Axis& dst = merged[find(i)];
      const Axis& src = axes_[i];
      if (dst.channels == 0) dst.channels = src.channels;
      dst.pinned = dst.pinned || src.pinned;
      dst.residual = dst.residual || src.residual;
      dst.producers.insert(dst.producers.end(), src.producers.begin(), src.producers.end());
      dst.batchnorms.insert(dst.batchnorms.end(), src.batchnorms.begin(), src.batchnorms.end());
      dst.consumers.insert(dst.consumers.end(), src.consumers.begin(), src.consumers.end());
    }
    std::vector<FoldableGroup> out;
    for (auto& [root, ax] : merged) {
      if (ax.pinned || ax.producers.empty()) continue;
      FoldableGroup g;
      g.channels = ax.channels;
      g.residual = ax.residual;
      g.producers = std::move(ax.producers);
      g.batchnorms = std::move(ax.batchnorms);
      g.consumers = std::move(ax.consumers);
      auto by_ref = [](const auto& a, const auto& b) { return a.block < b.block; };
      std::sort(g.producers.begin(), g.producers.end(), by_ref);
      std::sort(g.consumers.begin(), g.consumers.end(), by_ref);
      std::sort(g.batchnorms.begin(), g.batchnorms.end());
      out.push_back(std::move(g));
    }
    std::sort(out.begin(), out.end(),
              [](const FoldableGroup& a, const FoldableGroup& b) { return a.producers.front().block < b.producers.front().block; });
    return out;
  }

 private:
  struct State {
    std::size_t axis;
    Shape shape;          // per-sample
    std::size_t spatial;  // > 1 after Flatten of a spatial map
    std::optional<std::size_t> producer;  // index into axes_[axis].producers of the block just run
  };

  std::size_t find(std::size_t a) {
    while (parent_[a] != a) a = parent_[a] = parent_[parent_[a]];
    return a;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (axes_[a].channels != axes_[b].channels) {
      fail(ErrorKind::Topology, "residual branches disagree on channel count");
    }
    parent_[std::max(a, b)] = std::min(a, b);
  }

  std::size_t new_axis(std::size_t channels) {
    axes_.push_back({});
    axes_.back().channels = channels;
    parent_.push_back(parent_.size());
    return axes_.size() - 1;
  }

  State walk(const std::vector<Block>& blocks, State s, std::size_t top, Branch branch) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Block& b = blocks[i];
      const BlockRef ref = branch == Branch::None ? BlockRef{i, Branch::None, 0} : BlockRef{top, branch, i};
      const Shape out = infer_block_shapes(std::vector<Block>{b}, s.shape, to_string(ref));
      std::optional<std::size_t> producer;
      switch (b.kind()) {
        case BlockKind::Dense:
        case BlockKind::Conv2D: {
          axes_[s.axis].consumers.push_back({ref, b.is<Dense>() ? s.spatial : 1});
          const std::size_t ax = new_axis(out[0]);
          axes_[ax].producers.push_back({ref, std::nullopt});
          s.axis = ax;
          s.spatial = 1;
          producer = 0;
          break;
        }
        case BlockKind::BatchNorm:
          axes_[s.axis].batchnorms.push_back(ref);
          if (s.producer) axes_[s.axis].producers[*s.producer].batchnorm = ref;
          break;
        case BlockKind::Flatten:
          if (s.shape.size() > 1) s.spatial *= element_count(s.shape) / s.shape[0];
          break;
        case BlockKind::Residual: {
          if (branch != Branch::None) fail(ErrorKind::Topology, to_string(ref) + ": nested residual");
          const auto& r = b.as<Residual>();
          State main = walk(r.main, s, i, Branch::Main);
          State shortcut = r.shortcut.empty() ? s : walk(r.shortcut, s, i, Branch::Shortcut);
          if (main.spatial != shortcut.spatial) fail(ErrorKind::Topology, to_string(ref) + ": branch layouts differ");
          unite(main.axis, shortcut.axis);
          axes_[find(main.axis)].residual = true;
          s.axis = find(main.axis);
          s.spatial = main.spatial;
          break;
        }
        default:
          break;
      }
      s.shape = out;
      s.producer = producer;
    }
    return s;
  }

  std::vector<Axis> axes_;
  std::vector<std::size_t> parent_;
};

}  // namespace

std::vector<FoldableGroup> discover_groups(const Network& net) {
  infer_shapes(net);
  return Walker(net).groups();
}

}  // namespace foldkit
