// SPDX-License-Identifier: Apache-2.0
//
// Numeric inner loops shared by the network engine and the clustering code.
//
// Two implementations with identical signatures live here:
//   foldkit::kernels             OpenMP data-parallel versions used everywhere
//   foldkit::kernels::reference  plain serial loops, kept as the test oracle
//                                and as the benchmark baseline
//
// Every parallel kernel partitions work over independent output elements and
// keeps the per-element summation order fixed, so results never depend on the
// thread count.
#pragma once

#include <cstddef>
#include <cstdint>

namespace foldkit::kernels {

struct ConvGeometry {
  std::size_t batch = 1;
  std::size_t in_channels = 1;
  std::size_t in_h = 1;
  std::size_t in_w = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
};

// Four independent accumulators; the reduction order is fixed.
inline double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline double squared_distance(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const double d0 = a[i] - b[i], d1 = a[i + 1] - b[i + 1];
    const double d2 = a[i + 2] - b[i + 2], d3 = a[i + 3] - b[i + 3];
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; i < n; ++i) {
    const double d = a[i] - b[i];
    s0 += d * d;
  }
  return (s0 + s1) + (s2 + s3);
}

/// y[b,o] = bias[o] + sum_i x[b,i] w[o,i]. bias may be null.
void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t batch, std::size_t in, std::size_t out);
/// dx[b,i] = sum_o dy[b,o] w[o,i]   (overwrites dx)
void dense_backward_input(const double* dy, const double* w, double* dx,
                          std::size_t batch, std::size_t in, std::size_t out);
/// dw[o,i] += sum_b dy[b,o] x[b,i];  db[o] += sum_b dy[b,o]  (db may be null)
void dense_backward_weight(const double* dy, const double* x, double* dw, double* db,
                           std::size_t batch, std::size_t in, std::size_t out);

/// NCHW input, OIHW weights, zero padding.
void conv2d_forward(const double* x, const double* w, const double* bias, double* y,
                    const ConvGeometry& g);
/// Overwrites dx.
void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeometry& g);
/// Accumulates into dw and db (db may be null).
void conv2d_backward_weight(const double* dy, const double* x, double* dw, double* db,
                            const ConvGeometry& g);

/// For each of n points, index of the closest of k centroids (ties: lowest
/// index) and the squared distance to it.
void nearest_centroid(const double* points, const double* centroids, std::size_t n,
                      std::size_t k, std::size_t d, std::uint32_t* labels, double* dist);

/// out[i*m + j] = ||a_i - b_j||^2 for a: n x d, b: m x d.
void pairwise_sq_distances(const double* a, const double* b, double* out, std::size_t n,
                           std::size_t m, std::size_t d);

namespace reference {

void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t batch, std::size_t in, std::size_t out);
void dense_backward_input(const double* dy, const double* w, double* dx,
                          std::size_t batch, std::size_t in, std::size_t out);
void dense_backward_weight(const double* dy, const double* x, double* dw, double* db,
                           std::size_t batch, std::size_t in, std::size_t out);
void conv2d_forward(const double* x, const double* w, const double* bias, double* y,
                    const ConvGeometry& g);
void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeometry& g);
void conv2d_backward_weight(const double* dy, const double* x, double* dw, double* db,
                            const ConvGeometry& g);
void nearest_centroid(const double* points, const double* centroids, std::size_t n,
                      std::size_t k, std::size_t d, std::uint32_t* labels, double* dist);
void pairwise_sq_distances(const double* a, const double* b, double* out, std::size_t n,
                           std::size_t m, std::size_t d);

}  // namespace reference

/// Number of threads the parallel kernels will use (1 without OpenMP).
int thread_count();

}  // namespace foldkit::kernels
