// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/moe.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace dcmoe {

namespace {

std::vector<std::size_t> sorted_desc(std::span<const double> probs) {
    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    return order;
}

RoutingDecision finish(std::span<const double> probs, std::vector<std::size_t> selected,
                       std::size_t n_routed) {
    RoutingDecision d;
    d.selected = std::move(selected);
    double mass = 0.0;
    for (std::size_t i : d.selected) mass += probs[i];
    d.mix_weights.reserve(d.selected.size());
    for (std::size_t i : d.selected) {
        d.mix_weights.push_back(probs[i] / mass);
        if (i < n_routed) ++d.n_routed_active;
    }
    return d;
}

}  // namespace

RoutingDecision select_top_p(std::span<const double> probs, double p, std::size_t n_routed) {
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("select_top_p: p must be in (0,1]");
    if (probs.empty()) throw std::invalid_argument("select_top_p: empty row");
    auto order = sorted_desc(probs);
    std::vector<std::size_t> sel;
    double cum = 0.0;
    for (std::size_t i : order) {
        sel.push_back(i);
        cum += probs[i];
        if (cum >= p) break;
    }
    // fp shortfall (row sums to 1 only within tolerance): take the full set
    return finish(probs, std::move(sel), n_routed);
}

RoutingDecision select_top_k(std::span<const double> probs, std::size_t k, std::size_t n_routed) {
    if (k < 1 || k > probs.size()) throw std::invalid_argument("select_top_k: invalid k");
    auto order = sorted_desc(probs);
    order.resize(k);
    return finish(probs, std::move(order), n_routed);
}

ValueId ffn_forward(Graph& g, const FfnNodes& f, ValueId x) {
    ValueId h = g.add_row_bias(g.matmul(x, f.w1), f.b1);
    return g.add_row_bias(g.matmul(g.gelu(h), f.w2), f.b2);
}

static MoeLayerOut moe_dispatch_common(Graph& g, const PoolNodes& pool, ValueId x,
                                       ValueId gate_probs,
                                       std::vector<RoutingDecision> decisions,
                                       bool drop_null_mass, const DecisionHook& hook) {
    const std::size_t n = g.value(x).rows();
    const std::size_t d = g.value(x).cols();
    const std::size_t n_routed = pool.routed.size();
    const std::size_t e_total = n_routed + pool.n_null;

    MoeLayerOut out;
    out.decisions = std::move(decisions);
    out.gate_probs = gate_probs;

    std::vector<std::vector<std::size_t>> groups(n), emit(n);
    std::size_t total_assignments = 0;
    out.stats.assignment_frac.assign(e_total, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        const auto& dec = out.decisions[t];
        for (std::size_t i : dec.selected) {
            out.stats.assignment_frac[i] += 1.0;
            ++total_assignments;
            bool is_null = i >= n_routed;
            if (!is_null || !drop_null_mass) groups[t].push_back(i);
            if (!is_null) emit[t].push_back(i);
        }
        if (groups[t].empty()) groups[t] = dec.selected;  // all-null token in drop mode
        if (hook) hook(t, out.decisions[t]);
    }
    for (double& f : out.stats.assignment_frac) f /= static_cast<double>(total_assignments);

    ValueId weights = g.select_renorm(gate_probs, groups, emit);

    std::vector<std::vector<std::size_t>> expert_tokens(n_routed), expert_wpos(n_routed);
    {
        std::size_t pos = 0;
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t i : emit[t]) {
                expert_tokens[i].push_back(t);
                expert_wpos[i].push_back(pos++);
            }
    }

    ValueId y = g.constant(Tensor({n, d}));
    for (std::size_t e = 0; e < n_routed; ++e) {
        if (expert_tokens[e].empty()) continue;
        ValueId xs = g.take_rows(x, expert_tokens[e]);
        ValueId h = ffn_forward(g, pool.routed[e], xs);
        ValueId w = g.take_elems(weights, expert_wpos[e]);
        y = g.add(y, g.scatter_rows(g.row_scale(h, w), expert_tokens[e], n));
    }
    for (const auto& s : pool.shared) y = g.add(y, ffn_forward(g, s, x));
    out.output = y;

    // Switch-style load-balance loss over the full pool; f_i is a constant
    // statistic, the differentiable path runs through the mean gate probs.
    ValueId pbar = g.col_mean(gate_probs);
    out.stats.mean_prob = g.value(pbar).data;
    out.aux_loss = g.scale_const(g.dot_const(pbar, out.stats.assignment_frac),
                                 static_cast<double>(e_total));
    return out;
}

MoeLayerOut moe_forward(Graph& g, const PoolNodes& pool, ValueId x, const MoeOptions& opt,
                        const DecisionHook& hook) {
    const std::size_t n_routed = pool.routed.size();
    ValueId probs = g.softmax_rows(g.matmul(x, pool.gate_weights));
    const Tensor& P = g.value(probs);
    const std::size_t n = P.rows(), e = P.cols();
    if (e != n_routed + pool.n_null)
        throw dimension_error("moe_forward: gate column count != N_r + N_n");
    std::vector<RoutingDecision> decisions;
    decisions.reserve(n);
    for (std::size_t t = 0; t < n; ++t)
        decisions.push_back(select_top_p({&P.data[t * e], e}, opt.threshold_p, n_routed));
    return moe_dispatch_common(g, pool, x, probs, std::move(decisions), opt.drop_null_mass, hook);
}

MoeLayerOut moe_forward_topk(Graph& g, const PoolNodes& pool, ValueId x, std::size_t k,
                             const DecisionHook& hook) {
    const std::size_t n_routed = pool.routed.size();
    ValueId probs = g.softmax_rows(g.matmul(x, pool.gate_weights));
    const Tensor& P = g.value(probs);
    const std::size_t n = P.rows(), e = P.cols();
    std::vector<RoutingDecision> decisions;
    decisions.reserve(n);
    for (std::size_t t = 0; t < n; ++t)
        decisions.push_back(select_top_k({&P.data[t * e], e}, k, n_routed));
    return moe_dispatch_common(g, pool, x, probs, std::move(decisions), false, hook);
}

double aux_load_balance_loss(const AuxStats& stats) {
    if (stats.assignment_frac.empty()) throw std::invalid_argument("aux loss: empty batch");
    double s = 0.0;
    for (std::size_t i = 0; i < stats.assignment_frac.size(); ++i)
        s += stats.assignment_frac[i] * stats.mean_prob[i];
    return static_cast<double>(stats.assignment_frac.size()) * s;
}

}  // namespace dcmoe
