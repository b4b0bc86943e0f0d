// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include <json.hpp>

#include "dcmoe/params.hpp"

namespace dcmoe {

/// Self-describing single-file checkpoint: a small header (magic, version),
/// a JSON blob holding the model config and run metadata, a tensor directory
/// (name, shape, dtype, payload offset; all integers little-endian), then the
/// raw little-endian float64 payloads. Serialization is canonical, so
/// save(load(f)) reproduces f byte for byte.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;
    nlohmann::json config;    // model architecture
    nlohmann::json metadata;  // stage tag, domain tag, seed, step count, frozen mask, ...
    ParamStore params;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dcmoe
