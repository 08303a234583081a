// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "foldkit/tensor.hpp"

namespace foldkit {

struct Dataset {
  Tensor features;                  // [count, input_shape...]
  std::vector<std::size_t> labels;  // one class id per sample
  std::size_t class_count = 0;
  std::string split;                // "train", "test", "calibration" or empty

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(features.shape.begin() + 1, features.shape.end()); }
};

/// Throws unless labels < class_count, the feature count matches and values are finite.
void validate(const Dataset& data);

/// Samples [begin, end) as a new dataset.
Dataset subset(const Dataset& data, std::size_t begin, std::size_t end);

}  // namespace foldkit
