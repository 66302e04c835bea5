// Copyright 2026 The xmcde Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>

#include "xmcde/encoder.h"

namespace xmcde {

// Binary checkpoint, all integers and doubles little-endian:
//
//   offset  size  field
//   0       8     magic "XMCDECK\0"
//   8       4     u32 format version (1)
//   12      4     u32 flags: bit 0 normalize, bit 1 classifier head present
//   16      8     u64 vocab_size (V)
//   24      8     u64 dim (d)
//   32      8     u64 classifier rows (L, 0 without a head)
//   40      8     f64 temperature
//   48      8     u64 vocabulary fingerprint (FNV-1a over tokens)
//   56      8*V*d f64 embedding table, row-major
//   ...     8*L*d f64 classifier rows, row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace xmcde
