// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "dcmoe/checkpoint.hpp"
#include "dcmoe/model.hpp"

namespace dcmoe {

/// One FFN's parameters by value (d -> hidden -> d).
struct FfnParams {
    Tensor w1, b1, w2, b2;
    std::size_t hidden() const { return b1.numel(); }
};

/// Partition an FFN along its intermediate dimension into `parts` experts
/// whose outputs sum exactly to the original FFN's output. The down
/// projection bias is divided equally among the parts.
std::vector<FfnParams> split_ffn(const FfnParams& ffn, std::size_t parts);

/// Elementwise mean of the named tensors across source checkpoints.
ParamStore average_shared(const std::vector<const ParamStore*>& sources,
                          const std::vector<std::string>& param_names);

struct FusionPlan {
    std::vector<Checkpoint> sources;        // dense proto-experts, identical configs
    std::vector<std::string> domain_tags;   // one per source, in expert-order
    std::size_t parts = 2;                  // halves per source
    std::size_t n_null = 1;
    std::size_t n_shared = 2;
    double threshold_p = 0.7;
    bool drop_null_mass = false;
    std::uint64_t seed = 0;                 // for gate + shared-expert init
};

/// Builds the MoE checkpoint: routed experts from split FFNs (source s yields
/// experts parts*s .. parts*s+parts-1), shared modules averaged, gate and
/// shared experts freshly initialized. Metadata records the frozen routed
/// parameter names for the warmup stage.
Checkpoint fuse(const FusionPlan& plan);

/// Max |sum-of-parts - dense| over random probe inputs, for the verification
/// report emitted by the fuse command.
double split_residual(const FfnParams& ffn, const std::vector<FfnParams>& parts_out,
                      std::size_t n_probes, Rng& rng);

FfnParams extract_ffn(const ParamStore& ps, const std::string& prefix);
void insert_ffn(ParamStore& ps, const std::string& prefix, const FfnParams& f);

}  // namespace dcmoe
