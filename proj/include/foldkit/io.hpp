// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats.
//
// FNETv1 model file:
//   line 1   compact JSON manifest, first key "magic": "FNETv1"
//   rest     little-endian float32 blob; every tensor listed in the manifest
//            with its byte offset and length inside the blob
//
// FDSTv1 dataset file:
//   "FDSTv1" | u32 count | u32 ndims | u32 dims[ndims] | u32 classes |
//   f32 features[count * prod(dims)] | u16 labels[count]
//
// Logits file:
//   u32 batch | u32 classes | f32 values[batch * classes]
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "foldkit/dataset.hpp"
#include "foldkit/network.hpp"

namespace foldkit {

std::string serialize_model(const Network& net);
Network parse_model(std::string_view bytes);

void save_model(const Network& net, const std::filesystem::path& path);
Network load_model(const std::filesystem::path& path);

std::string serialize_dataset(const Dataset& data);
Dataset parse_dataset(std::string_view bytes);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

Tensor load_logits(const std::filesystem::path& path);
std::string serialize_logits(const Tensor& logits);

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace foldkit
