// SPDX-License-Identifier: Apache-2.0
#include "foldkit/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "foldkit/error.hpp"

namespace foldkit {

const char* to_string(NormKind kind) { return kind == NormKind::L1 ? "l1" : "l2"; }

NormKind parse_norm_kind(const std::string& text) {
  if (text == "l1" || text == "L1") return NormKind::L1;
  if (text == "l2" || text == "L2") return NormKind::L2;
  fail(ErrorKind::Value, "unknown norm '" + text + "' (expected l1 or l2)");
}

std::vector<double> channel_scores(const Network& net, const FoldableGroup& group, NormKind norm) {
  std::vector<double> score(group.channels, 0.0);
  for (const auto& p : group.producers) {
    const Matrix rows = flatten_producer_rows(net.at(p.block));
    for (std::size_t i = 0; i < rows.rows(); ++i) {
      double s = 0.0;
      for (double v : rows.row(i)) s += norm == NormKind::L1 ? std::abs(v) : v * v;
      score[i] += norm == NormKind::L1 ? s : std::sqrt(s);
    }
  }
  return score;
}

PruneResult magnitude_prune(const Network& net, const PruneSpec& spec) {
  PruneResult res;
  res.network = net;
  res.groups = discover_groups(net);
  if (spec.sparsity.size() != 1 && spec.sparsity.size() != res.groups.size()) {
    fail(ErrorKind::Value, "prune spec needs one sparsity or one per group");
  }
  for (std::size_t gi = 0; gi < res.groups.size(); ++gi) {
    const auto& g = res.groups[gi];
    const double s = spec.sparsity.size() == 1 ? spec.sparsity[0] : spec.sparsity[gi];
    const std::size_t k = sparsity_to_k(g.channels, s);
    const auto score = channel_scores(res.network, g, spec.norm);
    std::vector<std::size_t> order(g.channels);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
    std::vector<std::size_t> keep(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(keep.begin(), keep.end());
    select_channels(res.network, g, keep);
    res.kept.push_back(std::move(keep));
  }
  return res;
}

}  // namespace foldkit
