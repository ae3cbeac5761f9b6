// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoint: "KSAT" magic, u32 format version, then one
// record per tensor — u32 name length, UTF-8 name, u8 dtype tag (0 = f64),
// u8 rank, u64 dims, raw little-endian payload. Model hyperparameters ride
// along in a "meta/config" record; teacher parameters use the "teacher/"
// name prefix and can be dropped wholesale.

#pragma once

#include <string>

#include "model.hpp"

namespace ks {

void save_checkpoint(const std::string& path, ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

// Rewrites src without any "teacher/" records.
void strip_checkpoint(const std::string& src, const std::string& dst);

}  // namespace ks
