// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "foldkit/error.hpp"
#include "foldkit/folding.hpp"
#include "foldkit/kernels.hpp"

namespace foldkit {

namespace {

Tensor concat(const Tensor& a, const Tensor& b) {
  Tensor t({a.size() + b.size()});
  std::copy(a.values.begin(), a.values.end(), t.values.begin());
  std::copy(b.values.begin(), b.values.end(), t.values.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return t;
}

// Producer weight viewed as [out x in x inner] (inner = kernel area, 1 for dense).
struct WeightDims {
  std::size_t out, in, inner;
};

WeightDims dims_of(const Tensor& w) {
  if (w.rank() == 2) return {w.dim(0), w.dim(1), 1};
  return {w.dim(0), w.dim(1), w.dim(2) * w.dim(3)};
}

// Input-axis split for Dense after Flatten: columns [0, in/2) belong to A.
Tensor join_weight(const Tensor& a, const Tensor& b, bool doubled_in, bool classifier) {
  const WeightDims d = dims_of(a);
  const std::size_t in = doubled_in ? 2 * d.in : d.in;
  const std::size_t out = classifier ? d.out : 2 * d.out;
  Shape s = a.shape;
  s[0] = out;
  s[1] = in;
  Tensor w(s);
  auto at = [&](std::size_t o, std::size_t i, std::size_t k) -> double& { return w[(o * in + i) * d.inner + k]; };
  for (std::size_t o = 0; o < d.out; ++o)
    for (std::size_t i = 0; i < d.in; ++i)
      for (std::size_t k = 0; k < d.inner; ++k) {
        const double va = a[(o * d.in + i) * d.inner + k];
        const double vb = b[(o * d.in + i) * d.inner + k];
        if (classifier) {
          if (doubled_in) {
            at(o, i, k) = 0.5 * va;
            at(o, d.in + i, k) = 0.5 * vb;
          } else {
            at(o, i, k) = 0.5 * (va + vb);
          }
        } else if (doubled_in) {
          at(o, i, k) = va;
          at(d.out + o, d.in + i, k) = vb;
        } else {
          at(o, i, k) = va;
          at(d.out + o, i, k) = vb;
        }
      }
  return w;
}

Tensor join_bias(const Tensor& a, const Tensor& b, bool classifier) {
  if (!classifier) return concat(a, b);
  Tensor t(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) t[i] = 0.5 * (a[i] + b[i]);
  return t;
}

struct Joiner {
  BlockRef classifier;

  std::vector<Block> join(const std::vector<Block>& a, const std::vector<Block>& b, bool& doubled, std::size_t top,
                          Branch branch) {
    if (a.size() != b.size()) fail(ErrorKind::Topology, "networks differ in block count");
    std::vector<Block> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const BlockRef ref = branch == Branch::None ? BlockRef{i, Branch::None, 0} : BlockRef{top, branch, i};
      const Block& x = a[i];
      const Block& y = b[i];
      if (x.kind() != y.kind()) fail(ErrorKind::Topology, to_string(ref) + ": block kinds differ");
      const bool is_classifier = ref == classifier;
      switch (x.kind()) {
        case BlockKind::Dense: {
          const auto& da = x.as<Dense>();
          const auto& db = y.as<Dense>();
          if (da.weight.shape != db.weight.shape) fail(ErrorKind::Topology, to_string(ref) + ": shapes differ");
          out.push_back(Block{Dense{join_weight(da.weight, db.weight, doubled, is_classifier),
                                    join_bias(da.bias, db.bias, is_classifier)}});
          doubled = !is_classifier;
          break;
        }
        case BlockKind::Conv2D: {
          const auto& ca = x.as<Conv2D>();
          const auto& cb = y.as<Conv2D>();
          if (ca.weight.shape != cb.weight.shape || ca.stride != cb.stride || ca.padding != cb.padding) {
            fail(ErrorKind::Topology, to_string(ref) + ": shapes differ");
          }
          out.push_back(Block{Conv2D{join_weight(ca.weight, cb.weight, doubled, is_classifier),
                                     join_bias(ca.bias, cb.bias, is_classifier), ca.stride, ca.padding}});
          doubled = !is_classifier;
          break;
        }
        case BlockKind::BatchNorm: {
          const auto& p = x.as<BatchNorm>();
          const auto& q = y.as<BatchNorm>();
          if (!doubled) fail(ErrorKind::Topology, to_string(ref) + ": BatchNorm on an axis shared by both networks");
          if (p.channels() != q.channels()) fail(ErrorKind::Topology, to_string(ref) + ": shapes differ");
          out.push_back(Block{BatchNorm{concat(p.gamma, q.gamma), concat(p.beta, q.beta),
                                        concat(p.running_mean, q.running_mean), concat(p.running_var, q.running_var),
                                        p.epsilon}});
          break;
        }
        case BlockKind::Residual: {
          const auto& ra = x.as<Residual>();
          const auto& rb = y.as<Residual>();
          bool main_doubled = doubled;
          auto main = join(ra.main, rb.main, main_doubled, i, Branch::Main);
          bool short_doubled = doubled;
          auto shortcut = join(ra.shortcut, rb.shortcut, short_doubled, i, Branch::Shortcut);
          if (main_doubled != short_doubled) {
            fail(ErrorKind::Topology, to_string(ref) + ": residual branches cannot be widened consistently");
          }
          doubled = main_doubled;
          out.push_back(make_residual(std::move(main), std::move(shortcut)));
          break;
        }
        default:
          out.push_back(x);
          break;
      }
    }
    return out;
  }
};

}  // namespace

Network joint_network(const Network& a, const Network& b) {
  validate(a);
  validate(b);
  if (a.input_shape != b.input_shape || a.class_count != b.class_count) {
    fail(ErrorKind::Topology, "networks have different input or output shapes");
  }
  Joiner j;
  bool found = false;
  for (std::size_t i = a.blocks.size(); i-- > 0 && !found;) {
    const Block& blk = a.blocks[i];
    if (blk.is<Residual>()) fail(ErrorKind::Topology, "merging needs a Dense or Conv classifier after the last residual block");
    if (blk.is<Dense>() || blk.is<Conv2D>()) {
      j.classifier = {i, Branch::None, 0};
      found = true;
    }
  }
  if (!found) fail(ErrorKind::Topology, "network has no classifier layer");
  Network out;
  out.input_shape = a.input_shape;
  out.class_count = a.class_count;
  bool doubled = false;
  out.blocks = j.join(a.blocks, b.blocks, doubled, 0, Branch::None);
  validate(out);
  return out;
}

MergeResult merge_networks(const Network& a, const Network& b, MergeMode mode, std::uint64_t seed) {
  MergeResult res;
  res.network = joint_network(a, b);
  res.report.method = mode == MergeMode::Free ? "merge-free" : "merge-paired";
  const auto groups = discover_groups(res.network);
  FoldPlan plan;
  plan.seed = seed;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const FoldableGroup& g = groups[gi];
    const std::size_t n = g.channels / 2;
    const FoldMatrix fm = producer_matrix(res.network, g);
    Assignment assign;
    if (mode == MergeMode::Free) {
      assign = cluster_rows(fm.matrix, n, plan, gi);
    } else {
      const std::size_t d = fm.matrix.cols();
      Matrix cost(n, n);
      kernels::pairwise_sq_distances(fm.matrix.data().data(), fm.matrix.data().data() + n * d, cost.data().data(), n, n,
                                     d);
      const auto perm = hungarian(cost);
      assign.k = n;
      assign.labels.resize(2 * n);
      for (std::size_t i = 0; i < n; ++i) {
        assign.labels[i] = i;
        assign.labels[n + perm[i]] = i;
      }
      res.pairings.push_back(perm);
    }
    GroupReport rep;
    rep.index = gi;
    for (const auto& p : g.producers) rep.producers.push_back(p.block);
    rep.residual = g.residual;
    rep.n = g.channels;
    rep.k = n;
    rep.cost = fold_cost(assign, fm.matrix);
    rep.cluster_sizes = assign.sizes();
    rep.columns = fm.columns;
    fold_group(res.network, g, assign);
    res.report.total_cost += rep.cost;
    res.report.groups.push_back(std::move(rep));
  }
  validate(res.network);
  return res;
}

}  // namespace foldkit
