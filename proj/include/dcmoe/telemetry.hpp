// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dcmoe/moe.hpp"

namespace dcmoe {

/// Routing counters indexed by (layer, expert, domain) plus the per-layer
/// activated-expert histogram. All fields are plain sums, so shard merging is
/// order-independent.
class RoutingTelemetry {
  public:
    RoutingTelemetry() = default;
    RoutingTelemetry(std::size_t n_layers, std::size_t n_experts, std::size_t n_domains);

    void record(std::size_t layer, std::size_t domain, const RoutingDecision& dec);
    void merge(const RoutingTelemetry& other);

    std::size_t n_layers() const { return n_layers_; }
    std::size_t n_experts() const { return n_experts_; }
    std::size_t n_domains() const { return n_domains_; }
    std::size_t n_routed() const { return n_routed_; }
    void set_n_routed(std::size_t n) { n_routed_ = n; }
    std::size_t max_active() const { return max_active_; }

    std::uint64_t selection_count(std::size_t layer, std::size_t expert, std::size_t domain) const;
    double weight_sum(std::size_t layer, std::size_t expert, std::size_t domain) const;
    std::uint64_t hist(std::size_t layer, std::size_t k) const;
    std::uint64_t tokens(std::size_t layer, std::size_t domain) const;
    std::uint64_t total_tokens(std::size_t layer) const;

    // mutable access for deserialization
    std::uint64_t& selection_count_mut(std::size_t l, std::size_t e, std::size_t d);
    double& weight_sum_mut(std::size_t l, std::size_t e, std::size_t d);
    std::uint64_t& hist_mut(std::size_t l, std::size_t k);
    std::uint64_t& tokens_mut(std::size_t l, std::size_t d);

  private:
    std::size_t idx3_(std::size_t l, std::size_t e, std::size_t d) const {
        return (l * n_experts_ + e) * n_domains_ + d;
    }
    std::size_t n_layers_ = 0, n_experts_ = 0, n_domains_ = 0, n_routed_ = 0;
    std::size_t max_active_ = 0;  // histogram width - 1
    std::vector<std::uint64_t> sel_;
    std::vector<double> wsum_;
    std::vector<std::uint64_t> hist_;    // [layer][0..max_active]
    std::vector<std::uint64_t> tokens_;  // [layer][domain]
};

/// Normalized distribution of n_routed_active for one layer.
std::vector<double> activation_histogram(const RoutingTelemetry& tel, std::size_t layer);

/// Routing shares per (layer, expert) over domains; each row sums to 1.
/// Row order: layer-major, expert-minor.
std::vector<std::vector<double>> expert_domain_matrix(const RoutingTelemetry& tel);

/// Null-expert selection rate per (layer, domain): null selections / tokens.
std::vector<std::vector<double>> null_skip_profile(const RoutingTelemetry& tel);

struct DispatchPlan {
    std::size_t n_devices = 0;
    std::vector<std::size_t> expert_device;  // routed expert -> device
    std::vector<double> device_load;         // expected token-assignment share
    double imbalance_ratio = 1.0;            // max load / mean load
    double cross_device_fraction = 0.0;      // expected off-home selections per routed selection
};

/// Greedy longest-processing-time assignment of routed experts onto
/// n_devices, constrained to n_routed/n_devices experts per device.
DispatchPlan plan_dispatch(const std::vector<double>& expert_loads, std::size_t n_devices);
DispatchPlan plan_dispatch(const RoutingTelemetry& tel, std::size_t n_devices);

// ---- exports ----
std::string telemetry_to_json(const RoutingTelemetry& tel);
RoutingTelemetry telemetry_from_json(const std::string& text);
std::string histogram_csv(const RoutingTelemetry& tel);
std::string expert_domain_csv(const RoutingTelemetry& tel,
                              const std::vector<std::string>& domain_names);
std::string null_skip_csv(const RoutingTelemetry& tel,
                          const std::vector<std::string>& domain_names);

}  // namespace dcmoe
