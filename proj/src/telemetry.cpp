// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/telemetry.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace dcmoe {

RoutingTelemetry::RoutingTelemetry(std::size_t n_layers, std::size_t n_experts,
                                   std::size_t n_domains)
    : n_layers_(n_layers), n_experts_(n_experts), n_domains_(n_domains),
      max_active_(n_experts),
      sel_(n_layers * n_experts * n_domains, 0),
      wsum_(n_layers * n_experts * n_domains, 0.0),
      hist_(n_layers * (n_experts + 1), 0),
      tokens_(n_layers * n_domains, 0) {}

void RoutingTelemetry::record(std::size_t layer, std::size_t domain, const RoutingDecision& dec) {
    if (layer >= n_layers_ || domain >= n_domains_)
        throw std::out_of_range("telemetry: layer/domain out of range");
    if (dec.selected.size() != dec.mix_weights.size())
        throw std::invalid_argument("telemetry: selection/weight size mismatch");
    for (std::size_t s = 0; s < dec.selected.size(); ++s) {
        std::size_t e = dec.selected[s];
        sel_[idx3_(layer, e, domain)] += 1;
        wsum_[idx3_(layer, e, domain)] += dec.mix_weights[s];
    }
    hist_[layer * (max_active_ + 1) + dec.n_routed_active] += 1;
    tokens_[layer * n_domains_ + domain] += 1;
}

void RoutingTelemetry::merge(const RoutingTelemetry& o) {
    if (o.n_layers_ != n_layers_ || o.n_experts_ != n_experts_ || o.n_domains_ != n_domains_)
        throw std::invalid_argument("telemetry: merge shape mismatch");
    for (std::size_t i = 0; i < sel_.size(); ++i) sel_[i] += o.sel_[i];
    for (std::size_t i = 0; i < wsum_.size(); ++i) wsum_[i] += o.wsum_[i];
    for (std::size_t i = 0; i < hist_.size(); ++i) hist_[i] += o.hist_[i];
    for (std::size_t i = 0; i < tokens_.size(); ++i) tokens_[i] += o.tokens_[i];
}

std::uint64_t RoutingTelemetry::selection_count(std::size_t l, std::size_t e, std::size_t d) const {
    return sel_[idx3_(l, e, d)];
}
double RoutingTelemetry::weight_sum(std::size_t l, std::size_t e, std::size_t d) const {
    return wsum_[idx3_(l, e, d)];
}
std::uint64_t RoutingTelemetry::hist(std::size_t l, std::size_t k) const {
    return hist_[l * (max_active_ + 1) + k];
}
std::uint64_t RoutingTelemetry::tokens(std::size_t l, std::size_t d) const {
    return tokens_[l * n_domains_ + d];
}
std::uint64_t RoutingTelemetry::total_tokens(std::size_t l) const {
    std::uint64_t n = 0;
    for (std::size_t d = 0; d < n_domains_; ++d) n += tokens(l, d);
    return n;
}
std::uint64_t& RoutingTelemetry::selection_count_mut(std::size_t l, std::size_t e, std::size_t d) {
    return sel_[idx3_(l, e, d)];
}
double& RoutingTelemetry::weight_sum_mut(std::size_t l, std::size_t e, std::size_t d) {
    return wsum_[idx3_(l, e, d)];
}
std::uint64_t& RoutingTelemetry::hist_mut(std::size_t l, std::size_t k) {
    return hist_[l * (max_active_ + 1) + k];
}
std::uint64_t& RoutingTelemetry::tokens_mut(std::size_t l, std::size_t d) {
    return tokens_[l * n_domains_ + d];
}

std::vector<double> activation_histogram(const RoutingTelemetry& tel, std::size_t layer) {
    if (layer >= tel.n_layers()) throw std::out_of_range("activation_histogram: unseen layer");
    std::uint64_t total = tel.total_tokens(layer);
    if (total == 0) throw std::invalid_argument("activation_histogram: no tokens at layer");
    std::vector<double> out(tel.max_active() + 1, 0.0);
    for (std::size_t k = 0; k <= tel.max_active(); ++k)
        out[k] = static_cast<double>(tel.hist(layer, k)) / static_cast<double>(total);
    return out;
}

std::vector<std::vector<double>> expert_domain_matrix(const RoutingTelemetry& tel) {
    std::vector<std::vector<double>> rows;
    rows.reserve(tel.n_layers() * tel.n_experts());
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t e = 0; e < tel.n_experts(); ++e) {
            std::vector<double> row(tel.n_domains(), 0.0);
            std::uint64_t total = 0;
            for (std::size_t d = 0; d < tel.n_domains(); ++d) total += tel.selection_count(l, e, d);
            if (total > 0)
                for (std::size_t d = 0; d < tel.n_domains(); ++d)
                    row[d] = static_cast<double>(tel.selection_count(l, e, d)) /
                             static_cast<double>(total);
            rows.push_back(std::move(row));
        }
    return rows;
}

std::vector<std::vector<double>> null_skip_profile(const RoutingTelemetry& tel) {
    std::vector<std::vector<double>> out(tel.n_layers(),
                                         std::vector<double>(tel.n_domains(), 0.0));
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t d = 0; d < tel.n_domains(); ++d) {
            std::uint64_t nulls = 0;
            for (std::size_t e = tel.n_routed(); e < tel.n_experts(); ++e)
                nulls += tel.selection_count(l, e, d);
            std::uint64_t toks = tel.tokens(l, d);
            if (toks > 0) out[l][d] = static_cast<double>(nulls) / static_cast<double>(toks);
        }
    return out;
}

DispatchPlan plan_dispatch(const std::vector<double>& loads, std::size_t n_devices) {
    const std::size_t n = loads.size();
    if (n_devices == 0 || n % n_devices != 0)
        throw std::invalid_argument("plan_dispatch: expert count not divisible by device count");
    const std::size_t per_device = n / n_devices;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return loads[a] > loads[b]; });
    DispatchPlan plan;
    plan.n_devices = n_devices;
    plan.expert_device.assign(n, 0);
    plan.device_load.assign(n_devices, 0.0);
    std::vector<std::size_t> slots(n_devices, per_device);
    for (std::size_t e : order) {
        std::size_t best = n_devices;
        for (std::size_t dv = 0; dv < n_devices; ++dv) {
            if (slots[dv] == 0) continue;
            if (best == n_devices || plan.device_load[dv] < plan.device_load[best]) best = dv;
        }
        plan.expert_device[e] = best;
        plan.device_load[best] += loads[e];
        --slots[best];
    }
    double total = std::accumulate(plan.device_load.begin(), plan.device_load.end(), 0.0);
    double mean = total / static_cast<double>(n_devices);
    double mx = *std::max_element(plan.device_load.begin(), plan.device_load.end());
    plan.imbalance_ratio = mean > 0.0 ? mx / mean : 1.0;
    // Traffic proxy: a selection of expert e is off-home when e does not share
    // a device with the heaviest-loaded expert (the likely top-weight pick).
    if (total > 0.0 && n_devices > 1) {
        std::size_t top = order[0];
        double off = 0.0;
        for (std::size_t e = 0; e < n; ++e)
            if (plan.expert_device[e] != plan.expert_device[top]) off += loads[e];
        plan.cross_device_fraction = off / total;
    }
    return plan;
}

DispatchPlan plan_dispatch(const RoutingTelemetry& tel, std::size_t n_devices) {
    std::vector<double> loads(tel.n_routed(), 0.0);
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t e = 0; e < tel.n_routed(); ++e)
            for (std::size_t d = 0; d < tel.n_domains(); ++d)
                loads[e] += static_cast<double>(tel.selection_count(l, e, d));
    return plan_dispatch(loads, n_devices);
}

std::string telemetry_to_json(const RoutingTelemetry& tel) {
    nlohmann::json j;
    j["n_layers"] = tel.n_layers();
    j["n_experts"] = tel.n_experts();
    j["n_domains"] = tel.n_domains();
    j["n_routed"] = tel.n_routed();
    auto& sel = j["selection_count"] = nlohmann::json::array();
    auto& wsum = j["weight_sum"] = nlohmann::json::array();
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t e = 0; e < tel.n_experts(); ++e)
            for (std::size_t d = 0; d < tel.n_domains(); ++d) {
                sel.push_back(tel.selection_count(l, e, d));
                wsum.push_back(tel.weight_sum(l, e, d));
            }
    auto& h = j["hist"] = nlohmann::json::array();
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t k = 0; k <= tel.max_active(); ++k) h.push_back(tel.hist(l, k));
    auto& t = j["tokens"] = nlohmann::json::array();
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t d = 0; d < tel.n_domains(); ++d) t.push_back(tel.tokens(l, d));
    return j.dump(2) + "\n";
}

RoutingTelemetry telemetry_from_json(const std::string& text) {
    auto j = nlohmann::json::parse(text);
    RoutingTelemetry tel(j.at("n_layers").get<std::size_t>(), j.at("n_experts").get<std::size_t>(),
                         j.at("n_domains").get<std::size_t>());
    tel.set_n_routed(j.at("n_routed").get<std::size_t>());
    std::size_t i = 0;
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t e = 0; e < tel.n_experts(); ++e)
            for (std::size_t d = 0; d < tel.n_domains(); ++d, ++i) {
                tel.selection_count_mut(l, e, d) = j.at("selection_count")[i].get<std::uint64_t>();
                tel.weight_sum_mut(l, e, d) = j.at("weight_sum")[i].get<double>();
            }
    i = 0;
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t k = 0; k <= tel.max_active(); ++k, ++i)
            tel.hist_mut(l, k) = j.at("hist")[i].get<std::uint64_t>();
    i = 0;
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t d = 0; d < tel.n_domains(); ++d, ++i)
            tel.tokens_mut(l, d) = j.at("tokens")[i].get<std::uint64_t>();
    return tel;
}

namespace {
std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}
}  // namespace

std::string histogram_csv(const RoutingTelemetry& tel) {
    std::string out = "layer,n_routed_active,fraction\n";
    for (std::size_t l = 0; l < tel.n_layers(); ++l) {
        auto dist = activation_histogram(tel, l);
        for (std::size_t k = 0; k < dist.size(); ++k)
            out += std::to_string(l) + "," + std::to_string(k) + "," + fmt_double(dist[k]) + "\n";
    }
    return out;
}

std::string expert_domain_csv(const RoutingTelemetry& tel,
                              const std::vector<std::string>& domain_names) {
    std::string out = "layer,expert";
    for (const auto& d : domain_names) out += ",share_" + d;
    out += "\n";
    auto m = expert_domain_matrix(tel);
    std::size_t r = 0;
    for (std::size_t l = 0; l < tel.n_layers(); ++l)
        for (std::size_t e = 0; e < tel.n_experts(); ++e, ++r) {
            out += std::to_string(l) + "," + std::to_string(e);
            for (double v : m[r]) out += "," + fmt_double(v);
            out += "\n";
        }
    return out;
}

std::string null_skip_csv(const RoutingTelemetry& tel,
                          const std::vector<std::string>& domain_names) {
    std::string out = "layer";
    for (const auto& d : domain_names) out += ",null_rate_" + d;
    out += "\n";
    auto m = null_skip_profile(tel);
    for (std::size_t l = 0; l < tel.n_layers(); ++l) {
        out += std::to_string(l);
        for (double v : m[l]) out += "," + fmt_double(v);
        out += "\n";
    }
    return out;
}

}  // namespace dcmoe
