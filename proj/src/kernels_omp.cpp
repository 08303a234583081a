// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstddef>
#include <limits>

#include "foldkit/kernels.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace foldkit::kernels {

using idx = std::ptrdiff_t;

int thread_count() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t batch, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (idx b = 0; b < static_cast<idx>(batch); ++b) {
    const double* xr = x + b * in;
    double* yr = y + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      yr[o] = (bias ? bias[o] : 0.0) + dot(xr, w + o * in, in);
    }
  }
}

void dense_backward_input(const double* dy, const double* w, double* dx,
                          std::size_t batch, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (idx b = 0; b < static_cast<idx>(batch); ++b) {
    double* dxr = dx + b * in;
    std::fill(dxr, dxr + in, 0.0);
    const double* dyr = dy + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      if (g == 0.0) continue;
      const double* wr = w + o * in;
      for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
    }
  }
}

void dense_backward_weight(const double* dy, const double* x, double* dw, double* db,
                           std::size_t batch, std::size_t in, std::size_t out) {
#pragma omp parallel for schedule(static)
  for (idx o = 0; o < static_cast<idx>(out); ++o) {
    double* dwr = dw + o * in;
    double bias_acc = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const double g = dy[b * out + o];
      bias_acc += g;
      if (g == 0.0) continue;
      const double* xr = x + b * in;
      for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
    }
    if (db) db[o] += bias_acc;
  }
}

void conv2d_forward(const double* x, const double* w, const double* bias, double* y,
                    const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const idx jobs = static_cast<idx>(g.batch * g.out_channels);
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / g.out_channels;
    const std::size_t o = static_cast<std::size_t>(job) % g.out_channels;
    double* yo = y + (b * g.out_channels + o) * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bias ? bias[o] : 0.0;
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          const double* xc = x + (b * g.in_channels + c) * g.in_h * g.in_w;
          const double* wc = w + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.padding);
            if (iy < 0 || iy >= static_cast<idx>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.padding);
              if (ix < 0 || ix >= static_cast<idx>(g.in_w)) continue;
              acc += xc[iy * static_cast<idx>(g.in_w) + ix] * wc[ky * g.kernel_w + kx];
            }
          }
        }
        yo[oy * ow + ox] = acc;
      }
    }
  }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const idx jobs = static_cast<idx>(g.batch * g.in_channels);
#pragma omp parallel for schedule(static)
  for (idx job = 0; job < jobs; ++job) {
    const std::size_t b = static_cast<std::size_t>(job) / g.in_channels;
    const std::size_t c = static_cast<std::size_t>(job) % g.in_channels;
    double* dxc = dx + (b * g.in_channels + c) * g.in_h * g.in_w;
    std::fill(dxc, dxc + g.in_h * g.in_w, 0.0);
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double* dyo = dy + (b * g.out_channels + o) * oh * ow;
      const double* wc = w + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double grad = dyo[oy * ow + ox];
          for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
            const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.padding);
            if (iy < 0 || iy >= static_cast<idx>(g.in_h)) continue;
            for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
              const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.padding);
              if (ix < 0 || ix >= static_cast<idx>(g.in_w)) continue;
              dxc[iy * static_cast<idx>(g.in_w) + ix] += grad * wc[ky * g.kernel_w + kx];
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const double* dy, const double* x, double* dw, double* db,
                            const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
#pragma omp parallel for schedule(static)
  for (idx oi = 0; oi < static_cast<idx>(g.out_channels); ++oi) {
    const std::size_t o = static_cast<std::size_t>(oi);
    double bias_acc = 0.0;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* dyo = dy + (b * g.out_channels + o) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double grad = dyo[oy * ow + ox];
          bias_acc += grad;
          if (grad == 0.0) continue;
          for (std::size_t c = 0; c < g.in_channels; ++c) {
            const double* xc = x + (b * g.in_channels + c) * g.in_h * g.in_w;
            double* wc = dw + (o * g.in_channels + c) * g.kernel_h * g.kernel_w;
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
              const idx iy = static_cast<idx>(oy * g.stride + ky) - static_cast<idx>(g.padding);
              if (iy < 0 || iy >= static_cast<idx>(g.in_h)) continue;
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const idx ix = static_cast<idx>(ox * g.stride + kx) - static_cast<idx>(g.padding);
                if (ix < 0 || ix >= static_cast<idx>(g.in_w)) continue;
                wc[ky * g.kernel_w + kx] += grad * xc[iy * static_cast<idx>(g.in_w) + ix];
              }
            }
          }
        }
      }
    }
    if (db) db[o] += bias_acc;
  }
}

void nearest_centroid(const double* points, const double* centroids, std::size_t n,
                      std::size_t k, std::size_t d, std::uint32_t* labels, double* dist) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(n); ++i) {
    const double* p = points + i * d;
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const double dj = squared_distance(p, centroids + j * d, d);
      if (dj < best) {
        best = dj;
        best_j = static_cast<std::uint32_t>(j);
      }
    }
    labels[i] = best_j;
    dist[i] = best;
  }
}

void pairwise_sq_distances(const double* a, const double* b, double* out, std::size_t n,
                           std::size_t m, std::size_t d) {
#pragma omp parallel for schedule(static)
  for (idx i = 0; i < static_cast<idx>(n); ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = squared_distance(a + i * d, b + j * d, d);
    }
  }
}

}  // namespace foldkit::kernels
