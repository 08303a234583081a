// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences of input_gradient's loss.
#pragma once

#include <cmath>
#include <vector>

#include "foldkit/nn.hpp"

namespace oracle {

/// Sign pattern of every ReLU input in the network for `batch`.
inline std::vector<bool> relu_pattern(const foldkit::Network& net, const foldkit::Tensor& batch) {
  std::vector<bool> pattern;
  foldkit::forward_observed(net, batch, [&](const foldkit::BlockRef& ref, const foldkit::Tensor& in, const foldkit::Tensor&) {
    if (!net.at(ref).is<foldkit::ReLU>()) return;
    for (double v : in.values) pattern.push_back(v > 0.0);
  });
  return pattern;
}

struct GradCheck {
  double relative_error = 0.0;  // ||g - fd|| / max(||g||, ||fd||)
  double norm = 0.0;            // ||g||
  std::size_t shrunk = 0;       // coordinates whose step was reduced to stay off a ReLU kink
};

/// Central differences with step h; when a ReLU changes sign inside [x-h, x+h]
/// the step is divided by 10 until the function is smooth on the interval.
inline GradCheck check_input_gradient(const foldkit::Network& net, const foldkit::Tensor& batch,
                                      const foldkit::LossSpec& spec, double h = 1e-4) {
  const auto analytic = foldkit::input_gradient(net, batch, spec);
  const auto base = relu_pattern(net, batch);
  GradCheck out;
  double diff = 0.0, na = 0.0, nf = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    double step = h;
    foldkit::Tensor plus = batch, minus = batch;
    for (int tries = 0;; ++tries) {
      plus[i] = batch[i] + step;
      minus[i] = batch[i] - step;
      if (tries >= 4 || (relu_pattern(net, plus) == base && relu_pattern(net, minus) == base)) break;
      step /= 10.0;
      ++out.shrunk;
    }
    const double fp = foldkit::input_gradient(net, plus, spec).loss.total;
    const double fm = foldkit::input_gradient(net, minus, spec).loss.total;
    const double fd = (fp - fm) / (2.0 * step);
    const double g = analytic.gradient[i];
    diff += (g - fd) * (g - fd);
    na += g * g;
    nf += fd * fd;
  }
  out.norm = std::sqrt(na);
  const double denom = std::max(std::sqrt(na), std::sqrt(nf));
  out.relative_error = denom > 0.0 ? std::sqrt(diff) / denom : 0.0;
  return out;
}

}  // namespace oracle
