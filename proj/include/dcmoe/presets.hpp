// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "dcmoe/data.hpp"
#include "dcmoe/train.hpp"

namespace dcmoe {

/// Everything one pipeline run needs: data manifest, dense architecture,
/// fusion knobs, and the per-stage optimizer settings.
struct RunPreset {
    DatasetManifest manifest;
    ModelConfig dense;
    MoeConfig moe;  // expert_hidden is derived: dense.ffn_hidden / parts
    std::size_t parts = 2;
    StageConfig specialist, warmup, joint, baseline;

    nlohmann::json to_json() const;
    static RunPreset from_json(const nlohmann::json& j);
};

/// Built-in presets: "smoke" (tiny, seconds per stage) and "full"
/// (desk-scale defaults used for the pinned reference runs).
RunPreset make_preset(const std::string& name);

/// Preset overridden by a JSON merge patch, then re-validated.
RunPreset apply_overrides(const RunPreset& base, const nlohmann::json& patch);

/// Re-seeds every stage and the data manifest coherently.
void reseed(RunPreset& p, std::uint64_t seed);

}  // namespace dcmoe
