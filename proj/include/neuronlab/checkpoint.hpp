// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "neuronlab/model.hpp"

namespace nlab {

// Binary container, little-endian:
//   "NLABCKPT" | u32 version | u64 n | n bytes of config JSON | u64 count |
//   count x ( u32 name_len | name | u32 rank | rank x u64 extent | raw f64 payload )
// Tensors are written in name order. Payloads are copied bit-for-bit.

void save_checkpoint(const ModelState& model, const std::filesystem::path& path);
/// Throws FileError when unreadable, SchemaError when malformed.
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace nlab
