// SPDX-License-Identifier: Apache-2.0
#include "foldkit/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "foldkit/error.hpp"
#include "foldkit/kernels.hpp"

namespace foldkit {

std::vector<std::size_t> Assignment::sizes() const {
  std::vector<std::size_t> s(k, 0);
  for (auto l : labels) ++s.at(l);
  return s;
}

std::vector<std::vector<std::size_t>> Assignment::members() const {
  std::vector<std::vector<std::size_t>> m(k);
  for (std::size_t i = 0; i < labels.size(); ++i) m.at(labels[i]).push_back(i);
  return m;
}

bool Assignment::is_identity() const {
  if (k != labels.size()) return false;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] != i) return false;
  return true;
}

Assignment Assignment::identity(std::size_t n) {
  Assignment a;
  a.k = n;
  a.labels.resize(n);
  std::iota(a.labels.begin(), a.labels.end(), std::size_t{0});
  return a;
}

Assignment Assignment::canonical(const std::vector<std::size_t>& labels) {
  Assignment a;
  std::vector<std::size_t> seen;
  a.labels.reserve(labels.size());
  for (auto l : labels) {
    if (l >= seen.size()) seen.resize(l + 1, SIZE_MAX);
    if (seen[l] == SIZE_MAX) seen[l] = a.k++;
    a.labels.push_back(seen[l]);
  }
  return a;
}

void validate(const Assignment& a) {
  if (a.k == 0 && a.n() > 0) fail(ErrorKind::Value, "assignment with zero clusters");
  if (a.k > a.n()) fail(ErrorKind::Value, "assignment has more clusters than items");
  std::vector<bool> used(a.k, false);
  for (auto l : a.labels) {
    if (l >= a.k) fail(ErrorKind::Value, "assignment label " + std::to_string(l) + " out of range");
    used[l] = true;
  }
  for (std::size_t j = 0; j < a.k; ++j) {
    if (!used[j]) fail(ErrorKind::Value, "assignment cluster " + std::to_string(j) + " is empty");
  }
}

namespace {

void check_rows(const Assignment& a, const Matrix& x) {
  if (a.n() != x.rows()) {
    fail(ErrorKind::Shape, "assignment covers " + std::to_string(a.n()) + " items but matrix has " +
                               std::to_string(x.rows()) + " rows");
  }
}

void check_k(const Matrix& x, std::size_t k) {
  if (k == 0 || k > x.rows()) {
    fail(ErrorKind::Value, "cluster count " + std::to_string(k) + " not in [1, " + std::to_string(x.rows()) + "]");
  }
  if (!x.all_finite()) fail(ErrorKind::Value, "clustering input contains non-finite values");
}

// Means of the rows given integer labels in [0, k); empty clusters get zero rows.
Matrix means_of(const std::vector<std::uint32_t>& labels, const Matrix& x, std::size_t k) {
  Matrix m(k, x.cols());
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    auto c = m.row(labels[i]);
    for (std::size_t t = 0; t < x.cols(); ++t) c[t] += r[t];
    ++count[labels[i]];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] == 0) continue;
    const double inv = 1.0 / static_cast<double>(count[j]);
    for (auto& v : m.row(j)) v *= inv;
  }
  return m;
}

double cost_of(const std::vector<std::uint32_t>& labels, const Matrix& x, const Matrix& m) {
  double j = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) j += squared_distance(x.row(i), m.row(labels[i]));
  return j;
}

double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

Matrix seed_plus_plus(const Matrix& x, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = x.rows(), d = x.cols();
  Matrix c(k, d);
  std::vector<bool> chosen(n, false);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::min<std::size_t>(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)), n - 1);
  for (std::size_t j = 0; j < k; ++j) {
    if (j > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += dist[i];
      pick = n;
      if (total > 0.0) {
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (dist[i] <= 0.0) continue;
          acc += dist[i];
          pick = i;
          if (acc > target) break;
        }
      } else {
        // Every point coincides with a chosen center: take the first unchosen one.
        for (std::size_t i = 0; i < n && pick == n; ++i)
          if (!chosen[i]) pick = i;
      }
    }
    chosen[pick] = true;
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    for (std::size_t i = 0; i < n; ++i) dist[i] = std::min(dist[i], squared_distance(x.row(i), c.row(j)));
  }
  return c;
}

// Give every empty cluster the point lying farthest from its own centroid,
// taken from a cluster that can spare it.
void repair_empty(std::vector<std::uint32_t>& labels, std::vector<double>& dist, Matrix& centroids, const Matrix& x) {
  const std::size_t k = centroids.rows();
  std::vector<std::size_t> count(k, 0);
  for (auto l : labels) ++count[l];
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] > 0) continue;
    std::size_t far = labels.size();
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (count[labels[i]] < 2) continue;
      if (far == labels.size() || dist[i] > dist[far]) far = i;
    }
    --count[labels[far]];
    labels[far] = static_cast<std::uint32_t>(j);
    count[j] = 1;
    dist[far] = 0.0;
    std::copy(x.row(far).begin(), x.row(far).end(), centroids.row(j).begin());
  }
}

struct Run {
  std::vector<std::uint32_t> labels;
  Matrix centroids;
  double cost = std::numeric_limits<double>::infinity();
  std::vector<double> trace;
};

// Single-point transfers (Hartigan): move a point to another cluster when the
// exact change in J is negative. Lloyd fixed points are not always local
// minima under such moves.
void transfer_refine(Run& run, const Matrix& x, const KMeansOptions& opt) {
  const std::size_t n = x.rows(), k = run.centroids.rows();
  if (k < 2) return;
  std::vector<std::size_t> count(k, 0);
  for (auto l : run.labels) ++count[l];
  bool moved = false;
  for (std::size_t pass = 0; pass < std::max<std::size_t>(opt.max_iters, 1); ++pass) {
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint32_t a = run.labels[i];
      if (count[a] < 2) continue;
      const double na = static_cast<double>(count[a]);
      const double leave = na / (na - 1.0) * squared_distance(x.row(i), run.centroids.row(a));
      std::size_t best = k;
      double best_delta = -opt.tol * std::max(1.0, run.cost);
      for (std::size_t b = 0; b < k; ++b) {
        if (b == a) continue;
        const double nb = static_cast<double>(count[b]);
        const double delta = nb / (nb + 1.0) * squared_distance(x.row(i), run.centroids.row(b)) - leave;
        if (delta < best_delta) {
          best_delta = delta;
          best = b;
        }
      }
      if (best == k) continue;
      run.labels[i] = static_cast<std::uint32_t>(best);
      --count[a];
      ++count[best];
      run.centroids = means_of(run.labels, x, k);
      run.cost = cost_of(run.labels, x, run.centroids);
      any = moved = true;
    }
    if (!any) break;
  }
  if (moved) run.trace.push_back(run.cost);
}

Run lloyd(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& opt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  const std::size_t n = x.rows(), d = x.cols();
  Run run;
  run.centroids = seed_plus_plus(x, k, rng);
  run.labels.assign(n, 0);
  std::vector<double> dist(n);
  std::vector<std::uint32_t> prev;
  for (std::size_t it = 0; it < std::max<std::size_t>(opt.max_iters, 1); ++it) {
    kernels::nearest_centroid(x.data().data(), run.centroids.data().data(), n, k, d, run.labels.data(), dist.data());
    repair_empty(run.labels, dist, run.centroids, x);
    run.centroids = means_of(run.labels, x, k);
    const double j = cost_of(run.labels, x, run.centroids);
    const double before = run.cost;
    run.cost = j;
    run.trace.push_back(j);
    if (run.labels == prev) break;
    if (std::isfinite(before) && before - j <= opt.tol * std::max(1.0, before)) break;
    prev = run.labels;
  }
  transfer_refine(run, x, opt);
  return run;
}

}  // namespace

Matrix cluster_means(const Assignment& a, const Matrix& x) {
  check_rows(a, x);
  std::vector<std::uint32_t> l(a.labels.begin(), a.labels.end());
  return means_of(l, x, a.k);
}

Matrix project(const Assignment& a, const Matrix& x) {
  const Matrix m = cluster_means(a, x);
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) std::copy(m.row(a.labels[i]).begin(), m.row(a.labels[i]).end(), out.row(i).begin());
  return out;
}

double fold_cost(const Assignment& a, const Matrix& x) {
  const Matrix m = cluster_means(a, x);
  double j = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) j += squared_distance(x.row(i), m.row(a.labels[i]));
  return j;
}

KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& options) {
  check_k(x, k);
  const std::size_t restarts = std::max<std::size_t>(options.restarts, 1);
  std::vector<Run> runs(restarts);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::size_t r = 0; r < restarts; ++r) {
    runs[r] = lloyd(x, k, seed * 0x9E3779B97F4A7C15ULL + r, options);
  }
  std::size_t best = 0;
  for (std::size_t r = 1; r < restarts; ++r)
    if (runs[r].cost < runs[best].cost) best = r;

  std::vector<std::size_t> labels(runs[best].labels.begin(), runs[best].labels.end());
  KMeansResult out;
  out.assignment = Assignment::canonical(labels);
  out.centroids = cluster_means(out.assignment, x);
  out.cost = fold_cost(out.assignment, x);
  out.trace = std::move(runs[best].trace);
  return out;
}

BruteForceResult brute_force_kmeans(const Matrix& x, std::size_t k) {
  const std::size_t n = x.rows();
  if (n > kBruteForceMaxItems) {
    fail(ErrorKind::Value, "brute_force_kmeans supports at most " + std::to_string(kBruteForceMaxItems) + " items");
  }
  check_k(x, k);
  // Restricted growth strings enumerate each partition exactly once.
  std::vector<std::size_t> a(n, 0), maxpre(n, 0);
  BruteForceResult best;
  best.cost = std::numeric_limits<double>::infinity();
  Assignment cur;
  cur.k = k;
  while (true) {
    const std::size_t blocks = (n ? maxpre[n - 1] + 1 : 0);
    if (blocks == k) {
      cur.labels = a;
      const double j = fold_cost(cur, x);
      if (j < best.cost) {
        best.cost = j;
        best.assignment = cur;
      }
    }
    // Advance to the next string with at most k blocks.
    std::size_t i = n;
    while (i-- > 1) {
      const std::size_t limit = std::min(maxpre[i - 1] + 1, k - 1);
      if (a[i] < limit) break;
    }
    if (i == 0 || i >= n) break;
    ++a[i];
    maxpre[i] = std::max(maxpre[i - 1], a[i]);
    for (std::size_t t = i + 1; t < n; ++t) {
      a[t] = 0;
      maxpre[t] = maxpre[t - 1];
    }
  }
  return best;
}

Assignment greedy_pair_clustering(const Matrix& x, std::size_t k) {
  check_k(x, k);
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<std::size_t> label(n);
  std::iota(label.begin(), label.end(), std::size_t{0});
  std::vector<std::vector<double>> centroid(n);
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> alive(n, true);
  for (std::size_t i = 0; i < n; ++i) centroid[i].assign(x.row(i).begin(), x.row(i).end());
  for (std::size_t clusters = n; clusters > k; --clusters) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t ba = 0, bb = 0;
    for (std::size_t a = 0; a < n; ++a) {
      if (!alive[a]) continue;
      for (std::size_t b = a + 1; b < n; ++b) {
        if (!alive[b]) continue;
        const double dist = kernels::squared_distance(centroid[a].data(), centroid[b].data(), d);
        if (dist < best) {
          best = dist;
          ba = a;
          bb = b;
        }
      }
    }
    const double wa = static_cast<double>(size[ba]), wb = static_cast<double>(size[bb]);
    for (std::size_t t = 0; t < d; ++t) centroid[ba][t] = (wa * centroid[ba][t] + wb * centroid[bb][t]) / (wa + wb);
    size[ba] += size[bb];
    alive[bb] = false;
    for (auto& l : label)
      if (l == bb) l = ba;
  }
  return Assignment::canonical(label);
}

std::vector<std::size_t> hungarian(const Matrix& cost) {
  const std::size_t n = cost.rows();
  if (cost.cols() != n) {
    fail(ErrorKind::Shape, "hungarian needs a square cost matrix, got " + std::to_string(n) + "x" +
                               std::to_string(cost.cols()));
  }
  if (!cost.all_finite()) fail(ErrorKind::Value, "hungarian cost contains non-finite values");
  if (n == 0) return {};
  // Shortest augmenting path with potentials, 1-based with a dummy column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> result(n);
  for (std::size_t j = 1; j <= n; ++j) result[p[j] - 1] = j - 1;
  return result;
}

Matrix correlation_matrix(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) fail(ErrorKind::Shape, "activation sets have different sample counts");
  if (a.rows() < 2) fail(ErrorKind::Value, "correlation needs at least two samples");
  const std::size_t s = a.rows();
  auto standardize = [s](const Matrix& m) {
    Matrix z(m.cols(), s);  // channel-major
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double mean = 0.0;
      for (std::size_t r = 0; r < s; ++r) mean += m(r, c);
      mean /= static_cast<double>(s);
      double ss = 0.0;
      for (std::size_t r = 0; r < s; ++r) ss += (m(r, c) - mean) * (m(r, c) - mean);
      const double norm = std::sqrt(ss);
      for (std::size_t r = 0; r < s; ++r) z(c, r) = norm > 0.0 ? (m(r, c) - mean) / norm : 0.0;
    }
    return z;
  };
  const Matrix za = standardize(a), zb = standardize(b);
  Matrix corr(a.cols(), b.cols());
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) corr(i, j) = std::clamp(dot(za.row(i), zb.row(j)), -1.0, 1.0);
  return corr;
}

ChannelMatch channel_match_correlation(const Matrix& acts_a, const Matrix& acts_b) {
  if (acts_a.cols() != acts_b.cols()) fail(ErrorKind::Shape, "activation sets have different channel counts");
  const Matrix corr = correlation_matrix(acts_a, acts_b);
  const std::size_t n = acts_a.cols();
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) pairs.emplace_back(i, j);
  std::stable_sort(pairs.begin(), pairs.end(),
                   [&](const auto& p, const auto& q) { return corr(p.first, p.second) > corr(q.first, q.second); });
  ChannelMatch out;
  out.pairing.assign(n, SIZE_MAX);
  out.correlations.assign(n, 0.0);
  std::vector<bool> used_b(n, false);
  std::size_t matched = 0;
  for (const auto& [i, j] : pairs) {
    if (matched == n) break;
    if (out.pairing[i] != SIZE_MAX || used_b[j]) continue;
    out.pairing[i] = j;
    out.correlations[i] = corr(i, j);
    used_b[j] = true;
    ++matched;
  }
  return out;
}

ChannelMatch self_match_correlation(const Matrix& acts) {
  const std::size_t n = acts.cols();
  if (n < 2) fail(ErrorKind::Value, "self matching needs at least two channels");
  const Matrix corr = correlation_matrix(acts, acts);
  ChannelMatch out;
  out.pairing.resize(n);
  out.correlations.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && corr(i, j) > corr(i, best)) best = j;
    out.pairing[i] = best;
    out.correlations[i] = corr(i, best);
  }
  return out;
}

}  // namespace foldkit
