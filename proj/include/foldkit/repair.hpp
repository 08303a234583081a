// SPDX-License-Identifier: Apache-2.0
//
// Restoring activation statistics after a fold.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "foldkit/folding.hpp"
#include "foldkit/nn.hpp"

namespace foldkit {

enum class RepairMode { Naive, AR, DIR, Data };
const char* to_string(RepairMode mode);
RepairMode parse_repair_mode(const std::string& text);

struct ClusterCorrelation {
  std::size_t size = 0;
  double correlation = 1.0;
  double scale = 1.0;
};

/// Mean pairwise cosine similarity of the rows inside each cluster and the
/// resulting gamma scale. Singletons report correlation 1 and scale 1.
std::vector<ClusterCorrelation> estimate_cluster_correlation(const Matrix& normalized_rows, const Assignment& assignment);

/// N / sqrt(N + (N^2 - N) E), with E clamped to [-1/(N-1) + 1e-3, 1].
double ar_scale(std::size_t n, double correlation);

/// Rows of Sn W for every producer in the group that has a BatchNorm attached.
Matrix normalized_producer_rows(const Network& net, const FoldableGroup& group);

/// Fold with plain cluster means and no correction.
FoldResult fold_naive(const Network& net, FoldPlan plan);

/// Fold with the BN-AR matrix, then scale each merged gamma by its cluster's
/// ar_scale. Multi-member clusters are merged on the normalized weights.
FoldResult apply_fold_ar(const Network& net, FoldPlan plan);

/// Channel sources for each group: sources[g][j] lists the original channels
/// that new channel j of group g came from.
using ChannelSources = std::vector<std::vector<std::vector<std::size_t>>>;

ChannelSources sources_of(const FoldResult& folded);

/// Data-driven repair: BatchNorm statistics are recalibrated; BN-free groups
/// get a per-channel affine map fused into their producers so that folded
/// pre-activations match the cluster-mean statistics of the original ones.
Network data_repair(const Network& original, const Network& folded, const std::vector<FoldableGroup>& groups,
                    const ChannelSources& sources, std::span<const Tensor> calibration);
Network data_repair(const Network& original, const FoldResult& folded, std::span<const Tensor> calibration);

struct DIConfig {
  std::size_t batch_size = 64;
  std::size_t steps = 500;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double bn_weight = 1.0;
  double l2_weight = 1e-4;
  double tv_weight = 1e-4;
  double ce_weight = 1.0;
  std::uint64_t seed = 0;
};

void validate(const DIConfig& config);

struct DIResult {
  Tensor batch;
  std::vector<std::size_t> targets;  // round-robin over classes
  std::vector<LossBreakdown> trace;  // loss before each step, then the final loss
};

/// Gradient descent with momentum on CE + BN statistics + L2 + TV, starting
/// from a seeded standard normal batch.
DIResult deep_inversion(const Network& net, const DIConfig& config);

/// Fold with the BN-DIR matrix and recalibrate BatchNorm on `synthetic`, a
/// batch synthesized from the original network.
FoldResult fold_dir(const Network& net, FoldPlan plan, const Tensor& synthetic);
FoldResult fold_dir(const Network& net, FoldPlan plan, const DIConfig& config);

}  // namespace foldkit
