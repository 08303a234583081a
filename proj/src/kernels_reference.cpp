// SPDX-License-Identifier: Apache-2.0
//
// Serial reference loops. Written for obviousness, not speed; the tests hold
// the OpenMP kernels to these.
#include <cstddef>
#include <limits>

#include "foldkit/kernels.hpp"

namespace foldkit::kernels::reference {

void dense_forward(const double* x, const double* w, const double* bias, double* y,
                   std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += x[b * in + i] * w[o * in + i];
      y[b * out + o] = acc + (bias ? bias[o] : 0.0);
    }
  }
}

void dense_backward_input(const double* dy, const double* w, double* dx,
                          std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out; ++o) acc += dy[b * out + o] * w[o * in + i];
      dx[b * in + i] = acc;
    }
  }
}

void dense_backward_weight(const double* dy, const double* x, double* dw, double* db,
                           std::size_t batch, std::size_t in, std::size_t out) {
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) acc += dy[b * out + o] * x[b * in + i];
      dw[o * in + i] += acc;
    }
    if (db) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) acc += dy[b * out + o];
      db[o] += acc;
    }
  }
}

namespace {

// Value of the zero-padded input at (b, c, iy, ix) where iy/ix may fall outside.
double padded(const double* x, const ConvGeometry& g, std::size_t b, std::size_t c, long iy,
              long ix) {
  if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) || ix >= static_cast<long>(g.in_w)) {
    return 0.0;
  }
  return x[((b * g.in_channels + c) * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
           static_cast<std::size_t>(ix)];
}

}  // namespace

void conv2d_forward(const double* x, const double* w, const double* bias, double* y,
                    const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = bias ? bias[o] : 0.0;
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                acc += padded(x, g, b, c, iy, ix) *
                       w[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
              }
          y[((b * g.out_channels + o) * oh + oy) * ow + ox] = acc;
        }
}

void conv2d_backward_input(const double* dy, const double* w, double* dx, const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  const std::size_t total = g.batch * g.in_channels * g.in_h * g.in_w;
  for (std::size_t i = 0; i < total; ++i) dx[i] = 0.0;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const double grad = dy[((b * g.out_channels + o) * oh + oy) * ow + ox];
          for (std::size_t c = 0; c < g.in_channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                    ix >= static_cast<long>(g.in_w)) {
                  continue;
                }
                dx[((b * g.in_channels + c) * g.in_h + static_cast<std::size_t>(iy)) * g.in_w +
                   static_cast<std::size_t>(ix)] +=
                    grad * w[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
              }
        }
}

void conv2d_backward_weight(const double* dy, const double* x, double* dw, double* db,
                            const ConvGeometry& g) {
  const std::size_t oh = g.out_h(), ow = g.out_w();
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
        for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
          double acc = 0.0;
          for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
                const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
                acc += dy[((b * g.out_channels + o) * oh + oy) * ow + ox] *
                       padded(x, g, b, c, iy, ix);
              }
          dw[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx] += acc;
        }
    if (db) {
      double acc = 0.0;
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t p = 0; p < oh * ow; ++p) acc += dy[(b * g.out_channels + o) * oh * ow + p];
      db[o] += acc;
    }
  }
}

void nearest_centroid(const double* points, const double* centroids, std::size_t n,
                      std::size_t k, std::size_t d, std::uint32_t* labels, double* dist) {
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = points[i * d + t] - centroids[j * d + t];
        acc += diff * diff;
      }
      if (acc < best) {
        best = acc;
        best_j = static_cast<std::uint32_t>(j);
      }
    }
    labels[i] = best_j;
    dist[i] = best;
  }
}

void pairwise_sq_distances(const double* a, const double* b, double* out, std::size_t n,
                           std::size_t m, std::size_t d) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = a[i * d + t] - b[j * d + t];
        acc += diff * diff;
      }
      out[i * m + j] = acc;
    }
}

}  // namespace foldkit::kernels::reference
