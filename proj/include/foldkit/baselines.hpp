// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "foldkit/folding.hpp"

namespace foldkit {

enum class NormKind { L1, L2 };
const char* to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& text);

struct PruneSpec {
  std::vector<double> sparsity;  // one per group, or a single value for all groups
  NormKind norm = NormKind::L1;
};

/// Per-channel score of a group: producer-row norms (bias included) summed over
/// every coupled producer.
std::vector<double> channel_scores(const Network& net, const FoldableGroup& group, NormKind norm);

struct PruneResult {
  Network network;
  std::vector<FoldableGroup> groups;
  std::vector<std::vector<std::size_t>> kept;  // per group, ascending
};

/// Structured magnitude pruning: keep the highest-scoring channels of every
/// group (ties to the lower index), drop their consumer slices and BN entries.
PruneResult magnitude_prune(const Network& net, const PruneSpec& spec);

}  // namespace foldkit
