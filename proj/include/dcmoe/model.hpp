// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcmoe/graph.hpp"
#include "dcmoe/moe.hpp"
#include "dcmoe/params.hpp"
#include "dcmoe/rng.hpp"
#include "dcmoe/telemetry.hpp"

namespace dcmoe {

struct MoeConfig {
    std::size_t n_routed = 8;
    std::size_t n_null = 1;
    std::size_t n_shared = 2;
    std::size_t expert_hidden = 128;  // per routed/shared expert
    double threshold_p = 0.7;
    bool drop_null_mass = false;  // Eq.-3 denominator: keep null mass by default
};

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_channels = 2;
    std::size_t vocab_size = 64;  // per channel
    std::size_t max_seq = 64;
    std::size_t ffn_hidden = 256;  // dense FFN intermediate
    std::optional<MoeConfig> moe;  // applied to every layer when set

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    void validate() const;
};

/// Token ids laid out [batch][seq][channel]; one domain label per sequence.
struct Batch {
    std::size_t batch = 0, seq = 0, channels = 0;
    std::vector<std::size_t> tokens;
    std::vector<std::size_t> domains;          // per sequence
    std::vector<bool> loss_mask;               // per (sequence, position); empty = all on
    std::size_t id(std::size_t b, std::size_t t, std::size_t c) const {
        return tokens[(b * seq + t) * channels + c];
    }
};

ParamStore init_params(const ModelConfig& cfg, Rng& rng);

struct LossNodes {
    ValueId total;
    ValueId primary;
    ValueId aux;  // -1 when no MoE layers
    std::vector<ValueId> per_seq_primary;  // channel-mean CE per sequence
    std::map<std::string, ValueId> param_nodes;
};

/// Builds the full training loss on the tape: causal multi-channel CE plus
/// aux_weight * mean-over-MoE-layers of the load-balance loss.
LossNodes build_loss(Graph& g, const ModelConfig& cfg, const ParamStore& params,
                     const Batch& batch, double aux_weight, RoutingTelemetry* tel = nullptr);

/// Causal logits [batch][seq][channel][vocab], flattened row-major.
Tensor forward_logits(const ModelConfig& cfg, const ParamStore& params, const Batch& batch,
                      RoutingTelemetry* tel = nullptr);

struct LossValue {
    double total, primary, aux;
};

/// Loss without gradients (evaluation path; same graph builder).
LossValue eval_loss(const ModelConfig& cfg, const ParamStore& params, const Batch& batch,
                    double aux_weight = 0.0, RoutingTelemetry* tel = nullptr);

}  // namespace dcmoe
