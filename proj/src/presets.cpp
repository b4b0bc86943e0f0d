// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/presets.hpp"

#include <stdexcept>

namespace dcmoe {

namespace {

nlohmann::json moe_to_json(const MoeConfig& m) {
    return {{"n_routed", m.n_routed},       {"n_null", m.n_null},
            {"n_shared", m.n_shared},       {"expert_hidden", m.expert_hidden},
            {"threshold_p", m.threshold_p}, {"drop_null_mass", m.drop_null_mass}};
}

MoeConfig moe_from_json(const nlohmann::json& j) {
    MoeConfig m;
    m.n_routed = j.at("n_routed");
    m.n_null = j.at("n_null");
    m.n_shared = j.at("n_shared");
    m.expert_hidden = j.at("expert_hidden");
    m.threshold_p = j.at("threshold_p");
    m.drop_null_mass = j.at("drop_null_mass");
    return m;
}

}  // namespace

nlohmann::json RunPreset::to_json() const {
    return {{"data", manifest.to_json()},
            {"dense", dense.to_json()},
            {"moe", moe_to_json(moe)},
            {"parts", parts},
            {"stages",
             {{"specialist", specialist.to_json()},
              {"warmup", warmup.to_json()},
              {"joint", joint.to_json()},
              {"dense-baseline", baseline.to_json()}}}};
}

RunPreset RunPreset::from_json(const nlohmann::json& j) {
    RunPreset p;
    p.manifest = DatasetManifest::from_json(j.at("data"));
    p.dense = ModelConfig::from_json(j.at("dense"));
    p.moe = moe_from_json(j.at("moe"));
    p.parts = j.at("parts");
    const auto& s = j.at("stages");
    p.specialist = StageConfig::from_json(s.at("specialist"));
    p.warmup = StageConfig::from_json(s.at("warmup"));
    p.joint = StageConfig::from_json(s.at("joint"));
    p.baseline = StageConfig::from_json(s.at("dense-baseline"));
    return p;
}

RunPreset make_preset(const std::string& name) {
    RunPreset p;
    if (name == "smoke") {
        p.manifest.raw_counts = {120, 90, 75, 15};
        p.manifest.balanced_per_domain = 24;
        p.manifest.eval_per_domain = 8;
        p.manifest.vocab = 16;
        p.manifest.n_channels = 2;
        p.manifest.seq_len = 12;

        p.dense.n_layers = 2;
        p.dense.d_model = 16;
        p.dense.n_heads = 2;
        p.dense.n_channels = 2;
        p.dense.vocab_size = 16;
        p.dense.max_seq = 12;
        p.dense.ffn_hidden = 16;

        p.specialist.steps = 50;
        p.warmup.steps = 50;
        p.joint.steps = 50;
        p.baseline.steps = 50;
        p.specialist.lr = 3e-3;
        p.warmup.lr = 3e-3;
        p.joint.lr = 3e-4;
        p.baseline.lr = 3e-3;
    } else if (name == "full") {
        // manifest and dense-model defaults are already desk scale
        p.specialist.steps = 150;
        p.warmup.steps = 300;
        p.joint.steps = 150;
        p.baseline.steps = 150;
        // scaled up so the short step budget produces measurable adaptation;
        // warmup trains gate + shared experts from fresh init, so it keeps
        // the specialist-stage rate (300 steps sharpen routing enough for
        // domain pairs to take the selection majority)
        p.specialist.lr = 3e-3;
        p.warmup.lr = 3e-3;
        p.joint.lr = 3e-4;
        p.baseline.lr = 3e-3;
    } else {
        throw std::invalid_argument("unknown preset: " + name);
    }
    p.specialist.stage = "specialist";
    p.warmup.stage = "warmup";
    p.warmup.mask = TrainMask::GateAndShared;
    p.joint.stage = "joint";
    p.baseline.stage = "dense-baseline";
    p.moe.n_routed = 4 * p.parts;
    p.moe.expert_hidden = p.dense.ffn_hidden / p.parts;
    reseed(p, p.manifest.seed);
    return p;
}

RunPreset apply_overrides(const RunPreset& base, const nlohmann::json& patch) {
    nlohmann::json j = base.to_json();
    j.merge_patch(patch);
    RunPreset p = RunPreset::from_json(j);
    p.dense.validate();
    return p;
}

void reseed(RunPreset& p, std::uint64_t seed) {
    p.manifest.seed = seed;
    p.specialist.seed = seed;
    p.warmup.seed = seed;
    p.joint.seed = seed;
    p.baseline.seed = seed;
}

}  // namespace dcmoe
