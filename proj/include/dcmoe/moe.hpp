// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dcmoe/graph.hpp"

namespace dcmoe {

/// Per-token routing outcome. `selected` is ordered by descending gate
/// probability (ties by ascending expert index); `mix_weights` are the
/// renormalized probabilities over `selected` and sum to 1.
struct RoutingDecision {
    std::vector<std::size_t> selected;
    std::vector<double> mix_weights;
    std::size_t n_routed_active = 0;
};

/// Smallest prefix of the descending-sorted probabilities whose cumulative
/// sum reaches `p`. Experts with index >= n_routed are the null experts.
RoutingDecision select_top_p(std::span<const double> probs, double p, std::size_t n_routed);

/// Static top-k baseline with the same ordering and renormalization.
RoutingDecision select_top_k(std::span<const double> probs, std::size_t k, std::size_t n_routed);

/// One FFN's parameters as graph nodes (d -> hidden -> d, GELU inside).
struct FfnNodes {
    ValueId w1, b1, w2, b2;
};

ValueId ffn_forward(Graph& g, const FfnNodes& f, ValueId x);

/// MoE layer parameters as graph nodes. The gate has one column per routed
/// expert followed by one per null expert.
struct PoolNodes {
    ValueId gate_weights;
    std::vector<FfnNodes> routed;
    std::vector<FfnNodes> shared;
    std::size_t n_null = 0;
};

struct MoeOptions {
    double threshold_p = 0.7;
    /// When true, null-expert probability mass is dropped from the Eq.-3
    /// denominator instead of attenuating the routed contribution.
    bool drop_null_mass = false;
};

struct AuxStats {
    std::vector<double> assignment_frac;  // f_i over the full pool
    std::vector<double> mean_prob;        // p-bar_i over the batch
};

struct MoeLayerOut {
    ValueId output;
    ValueId gate_probs;
    ValueId aux_loss;  // Switch-style E * sum_i f_i * pbar_i
    std::vector<RoutingDecision> decisions;
    AuxStats stats;
};

using DecisionHook = std::function<void(std::size_t token, const RoutingDecision&)>;

/// Forward pass of the dynamic-capacity layer on tokens x [n x d]. Selection
/// is treated as a constant for differentiation; gradients flow through the
/// renormalized mixture weights and the selected experts only.
MoeLayerOut moe_forward(Graph& g, const PoolNodes& pool, ValueId x, const MoeOptions& opt,
                        const DecisionHook& hook = nullptr);

/// Same dispatch machinery with static top-k selection (baseline router).
MoeLayerOut moe_forward_topk(Graph& g, const PoolNodes& pool, ValueId x, std::size_t k,
                             const DecisionHook& hook = nullptr);

/// Standalone aux-loss value from frozen statistics (differentiable path is
/// the one inside moe_forward; this is the plain formula over numbers).
double aux_load_balance_loss(const AuxStats& stats);

}  // namespace dcmoe
