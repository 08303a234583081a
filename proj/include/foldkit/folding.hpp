// SPDX-License-Identifier: Apache-2.0
//
// Channel groups, fold matrices, whole-network folding and two-network merging.
//
// A channel group is every block that reads or writes one channel axis:
// producers (Dense/Conv whose outputs are the axis), BatchNorms on the axis and
// consumers (Dense/Conv reading it). Residual additions join the axes of the
// two branches into one group.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "foldkit/clustering.hpp"
#include "foldkit/network.hpp"
#include "json.hpp"

namespace foldkit {

struct ProducerRef {
  BlockRef block;
  std::optional<BlockRef> batchnorm;  // BN directly after the producer
};

struct ConsumerRef {
  BlockRef block;
  // Dense consumer after Flatten: channel i owns input columns [i*spatial, (i+1)*spatial).
  std::size_t spatial = 1;
};

struct FoldableGroup {
  std::size_t channels = 0;
  std::vector<ProducerRef> producers;
  std::vector<BlockRef> batchnorms;  // every BN on the axis, attached or not
  std::vector<ConsumerRef> consumers;
  bool residual = false;             // axis shared across a residual addition

  bool has_batchnorm() const { return !batchnorms.empty(); }
};

/// Foldable groups in front-to-back order. Axes touching the network input or
/// the logits are excluded.
std::vector<FoldableGroup> discover_groups(const Network& net);

// ---------------------------------------------------------------------------
// Flattening.

/// Row i: producer channel i's weights followed by its bias.
Matrix flatten_producer_rows(const Block& block);
/// Inverse of flatten_producer_rows for a block with `rows.rows()` channels.
void unflatten_producer_rows(Block& block, const Matrix& rows);
/// Row i: every consumer weight reading channel i, vectorized in weight order.
Matrix flatten_consumer_cols(const Block& block, std::size_t spatial = 1);

enum class Coupling { Plain, BnAr, BnDir };
const char* to_string(Coupling c);

struct ColumnBlock {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct FoldMatrix {
  Matrix matrix;
  std::vector<ColumnBlock> columns;
};

/// Plain:  [W | b] per producer, then consumer rows.
/// BnAr:   [Sn W | Sn (b - mu) | gamma] per producer with BN, then consumer rows.
/// BnDir:  consumer rows, then [W | b | gamma | Sn] per producer with BN.
/// Sn = 1/sqrt(running_var + eps).
FoldMatrix build_fold_matrix(const Network& net, const FoldableGroup& group, Coupling coupling);

/// Producer-only rows [W | b] of every producer in the group, side by side.
FoldMatrix producer_matrix(const Network& net, const FoldableGroup& group);

// ---------------------------------------------------------------------------
// Applying a clustering.

/// New channel j is built from the old channels sources[j]: producer rows,
/// bias and BN entries become their mean, consumer slices their sum.
void apply_channel_map(Network& net, const FoldableGroup& group, const std::vector<std::vector<std::size_t>>& sources);

/// Cluster means for producers and BNs, cluster sums for consumers.
void fold_group(Network& net, const FoldableGroup& group, const Assignment& assignment);

/// Keep only the listed channels (ascending), deleting everything else.
void select_channels(Network& net, const FoldableGroup& group, const std::vector<std::size_t>& keep);

std::size_t sparsity_to_k(std::size_t n, double sparsity);

enum class Clusterer { KMeans, Greedy };

struct FoldPlan {
  std::vector<std::size_t> k;  // one target per group, in discover_groups order
  Coupling coupling = Coupling::BnAr;  // BN-free groups always use Plain
  Clusterer clusterer = Clusterer::KMeans;
  std::uint64_t seed = 0;
  KMeansOptions kmeans;
};

FoldPlan uniform_plan(const Network& net, double sparsity, Coupling coupling, std::uint64_t seed = 0);

struct GroupReport {
  std::size_t index = 0;
  std::vector<BlockRef> producers;
  bool residual = false;
  Coupling coupling = Coupling::Plain;
  std::size_t n = 0;
  std::size_t k = 0;
  double cost = 0.0;
  std::vector<std::size_t> cluster_sizes;
  std::vector<ColumnBlock> columns;
  std::vector<double> column_costs;  // cost restricted to each column block
  std::vector<double> correlations;  // Fold-AR only
  std::vector<double> scales;        // Fold-AR only
};

struct FoldReport {
  std::string method;
  std::vector<GroupReport> groups;
  double total_cost = 0.0;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();
};

nlohmann::ordered_json to_json(const FoldReport& report);

struct FoldResult {
  Network network;
  FoldReport report;
  std::vector<FoldableGroup> groups;       // as discovered on the input network
  std::vector<Assignment> assignments;     // one per group
};

/// Called around each group's fold; `net` is the partially folded network.
struct FoldHooks {
  std::function<void(Network&, const FoldableGroup&, const Assignment&, GroupReport&)> before_fold;
  std::function<void(Network&, const FoldableGroup&, const Assignment&, GroupReport&)> after_fold;
};

/// Clusters and folds every group front to back; fold matrices are built
/// from the already folded upstream network. No statistics repair.
FoldResult fold_network(const Network& net, const FoldPlan& plan, const FoldHooks& hooks = {});

/// Cluster one fold matrix according to the plan settings.
Assignment cluster_rows(const Matrix& rows, std::size_t k, const FoldPlan& plan, std::size_t group_index);

// ---------------------------------------------------------------------------
// Merging.

enum class MergeMode { Free, Paired };

/// Network computing (f_a(x) + f_b(x)) / 2 with every hidden axis doubled.
Network joint_network(const Network& a, const Network& b);

struct MergeResult {
  Network network;
  FoldReport report;
  std::vector<std::vector<std::size_t>> pairings;  // Paired mode: per group, B channel matched to A channel i
};

MergeResult merge_networks(const Network& a, const Network& b, MergeMode mode, std::uint64_t seed = 0);

}  // namespace foldkit
