// SPDX-License-Identifier: Apache-2.0
//
// k-means as matrix factorization X ~ U M, its exhaustive oracle, greedy
// agglomeration, the Hungarian solver and activation matching.
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "foldkit/tensor.hpp"

namespace foldkit {

/// Surjective map from n items onto clusters 0..k-1.
struct Assignment {
  std::size_t k = 0;
  std::vector<std::size_t> labels;

  std::size_t n() const { return labels.size(); }
  std::vector<std::size_t> sizes() const;
  /// Members of each cluster in ascending item order.
  std::vector<std::vector<std::size_t>> members() const;
  bool is_identity() const;

  static Assignment identity(std::size_t n);
  /// Relabel clusters in order of first appearance; k is the number of distinct labels.
  static Assignment canonical(const std::vector<std::size_t>& labels);

  friend bool operator==(const Assignment&, const Assignment&) = default;
};

/// Throws unless every label is < k, every cluster is used and k <= n.
void validate(const Assignment& a);

/// M = (U^T U)^{-1} U^T X, one row per cluster.
Matrix cluster_means(const Assignment& a, const Matrix& x);
/// C X: every row replaced by the mean of its cluster.
Matrix project(const Assignment& a, const Matrix& x);
/// ||X - C X||_F^2.
double fold_cost(const Assignment& a, const Matrix& x);

struct KMeansOptions {
  std::size_t restarts = 10;
  std::size_t max_iters = 300;
  double tol = 1e-10;
};

struct KMeansResult {
  Assignment assignment;
  Matrix centroids;
  double cost = 0.0;
  std::vector<double> trace;  // cost after each Lloyd iteration of the winning restart
};

/// Lloyd's algorithm with k-means++ seeding; best of `restarts`, ties by restart index.
KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& options = {});

struct BruteForceResult {
  Assignment assignment;
  double cost = 0.0;
};

inline constexpr std::size_t kBruteForceMaxItems = 12;

/// Global optimum over all surjective assignments; n <= 12.
BruteForceResult brute_force_kmeans(const Matrix& x, std::size_t k);

/// Repeatedly merges the two clusters with the closest centroids.
Assignment greedy_pair_clustering(const Matrix& x, std::size_t k);

/// Optimal assignment for a square cost matrix: result[row] = column.
std::vector<std::size_t> hungarian(const Matrix& cost);

struct ChannelMatch {
  std::vector<std::size_t> pairing;   // pairing[i] = partner of channel i in b
  std::vector<double> correlations;   // Pearson correlation of each pair
};

/// Pearson correlation matrix between columns of a and b (samples x channels).
/// A zero-variance column correlates 0 with everything.
Matrix correlation_matrix(const Matrix& a, const Matrix& b);

/// Greedy one-to-one pairing by descending correlation, ties by lowest (i, j).
ChannelMatch channel_match_correlation(const Matrix& acts_a, const Matrix& acts_b);

/// Each channel of `acts` against its most correlated distinct channel.
ChannelMatch self_match_correlation(const Matrix& acts);

}  // namespace foldkit
