// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace dcmoe {

std::vector<FfnParams> split_ffn(const FfnParams& ffn, std::size_t parts) {
    const std::size_t d = ffn.w1.shape[0];
    const std::size_t h = ffn.w1.shape[1];
    if (parts < 1) throw std::invalid_argument("split_ffn: parts < 1");
    if (h % parts != 0)
        throw std::invalid_argument("split_ffn: intermediate dim " + std::to_string(h) +
                                    " not divisible by " + std::to_string(parts));
    const std::size_t hp = h / parts;
    std::vector<FfnParams> out;
    out.reserve(parts);
    for (std::size_t p = 0; p < parts; ++p) {
        FfnParams e;
        e.w1 = Tensor({d, hp});
        e.b1 = Tensor({hp});
        e.w2 = Tensor({hp, d});
        e.b2 = Tensor({d});
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < hp; ++j) e.w1.data[i * hp + j] = ffn.w1.data[i * h + p * hp + j];
        for (std::size_t j = 0; j < hp; ++j) e.b1.data[j] = ffn.b1.data[p * hp + j];
        for (std::size_t j = 0; j < hp; ++j)
            for (std::size_t i = 0; i < d; ++i) e.w2.data[j * d + i] = ffn.w2.data[(p * hp + j) * d + i];
        for (std::size_t i = 0; i < d; ++i) e.b2.data[i] = ffn.b2.data[i] / static_cast<double>(parts);
        out.push_back(std::move(e));
    }
    return out;
}

ParamStore average_shared(const std::vector<const ParamStore*>& sources,
                          const std::vector<std::string>& param_names) {
    if (sources.empty()) throw std::invalid_argument("average_shared: no sources");
    ParamStore out;
    for (const auto& name : param_names) {
        const Tensor& first = sources[0]->at(name);
        Tensor acc(first.shape);
        for (const ParamStore* src : sources) {
            const Tensor& t = src->at(name);
            if (!t.same_shape(first))
                throw dimension_error("average_shared: shape mismatch for " + name);
            for (std::size_t i = 0; i < t.numel(); ++i) acc.data[i] += t.data[i];
        }
        for (double& v : acc.data) v /= static_cast<double>(sources.size());
        out.emplace(name, std::move(acc));
    }
    return out;
}

FfnParams extract_ffn(const ParamStore& ps, const std::string& prefix) {
    return {ps.at(prefix + ".w1"), ps.at(prefix + ".b1"), ps.at(prefix + ".w2"),
            ps.at(prefix + ".b2")};
}

void insert_ffn(ParamStore& ps, const std::string& prefix, const FfnParams& f) {
    ps[prefix + ".w1"] = f.w1;
    ps[prefix + ".b1"] = f.b1;
    ps[prefix + ".w2"] = f.w2;
    ps[prefix + ".b2"] = f.b2;
}

namespace {

Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * std_dev;
    return t;
}

}  // namespace

Checkpoint fuse(const FusionPlan& plan) {
    if (plan.sources.empty()) throw std::invalid_argument("fuse: no source checkpoints");
    if (plan.domain_tags.size() != plan.sources.size())
        throw std::invalid_argument("fuse: domain tag count mismatch");
    ModelConfig dense_cfg = ModelConfig::from_json(plan.sources[0].config);
    if (dense_cfg.moe) throw std::invalid_argument("fuse: sources must be dense checkpoints");
    for (const auto& src : plan.sources)
        if (src.config != plan.sources[0].config)
            throw std::invalid_argument("fuse: source configs differ");

    ModelConfig moe_cfg = dense_cfg;
    MoeConfig m;
    m.n_routed = plan.sources.size() * plan.parts;
    m.n_null = plan.n_null;
    m.n_shared = plan.n_shared;
    m.expert_hidden = dense_cfg.ffn_hidden / plan.parts;
    if (dense_cfg.ffn_hidden % plan.parts != 0)
        throw std::invalid_argument("fuse: ffn_hidden not divisible by parts");
    m.threshold_p = plan.threshold_p;
    m.drop_null_mass = plan.drop_null_mass;
    moe_cfg.moe = m;

    // averaged shared modules: everything except the dense FFN blocks
    std::vector<std::string> avg_names;
    for (const auto& [name, t] : plan.sources[0].params)
        if (name.find(".ffn.") == std::string::npos) avg_names.push_back(name);
    std::vector<const ParamStore*> srcs;
    for (const auto& s : plan.sources) srcs.push_back(&s.params);
    ParamStore params = average_shared(srcs, avg_names);

    // routed experts: source s -> experts parts*s .. parts*s+parts-1
    std::vector<std::string> frozen;
    for (std::size_t l = 0; l < dense_cfg.n_layers; ++l) {
        const std::string layer = "layer" + std::to_string(l);
        for (std::size_t s = 0; s < plan.sources.size(); ++s) {
            FfnParams dense = extract_ffn(plan.sources[s].params, layer + ".ffn");
            auto halves = split_ffn(dense, plan.parts);
            for (std::size_t p = 0; p < plan.parts; ++p) {
                std::string prefix =
                    layer + ".moe.expert" + std::to_string(s * plan.parts + p);
                insert_ffn(params, prefix, halves[p]);
                for (const char* suf : {".w1", ".b1", ".w2", ".b2"})
                    frozen.push_back(prefix + suf);
            }
        }
    }

    // fresh gate + shared experts
    Rng rng(plan.seed, /*stream=*/0x66757365ULL);
    const std::size_t d = dense_cfg.d_model;
    for (std::size_t l = 0; l < dense_cfg.n_layers; ++l) {
        const std::string layer = "layer" + std::to_string(l);
        params[layer + ".moe.gate"] = gaussian({d, m.n_routed + m.n_null}, rng, 0.02);
        for (std::size_t s = 0; s < m.n_shared; ++s) {
            std::string prefix = layer + ".moe.shared" + std::to_string(s);
            params[prefix + ".w1"] = gaussian({d, m.expert_hidden}, rng, 0.02);
            params[prefix + ".b1"] = Tensor({m.expert_hidden});
            params[prefix + ".w2"] = gaussian({m.expert_hidden, d}, rng, 0.02);
            params[prefix + ".b2"] = Tensor({d});
        }
    }

    Checkpoint out;
    out.config = moe_cfg.to_json();
    out.params = std::move(params);
    out.metadata = {{"stage", "fused"},
                    {"domains", plan.domain_tags},
                    {"seed", plan.seed},
                    {"step_count", 0},
                    {"frozen_params", frozen}};
    // sanity: every parameter the MoE config names must now exist
    {
        Rng probe(0);
        ParamStore expect = init_params(moe_cfg, probe);
        for (const auto& [name, t] : expect) {
            auto it = out.params.find(name);
            if (it == out.params.end())
                throw std::runtime_error("fuse: missing parameter " + name);
            if (!it->second.same_shape(t))
                throw dimension_error("fuse: shape mismatch for " + name);
        }
        if (expect.size() != out.params.size())
            throw std::runtime_error("fuse: unexpected extra parameters");
    }
    return out;
}

double split_residual(const FfnParams& ffn, const std::vector<FfnParams>& parts_out,
                      std::size_t n_probes, Rng& rng) {
    const std::size_t d = ffn.w1.shape[0];
    auto eval = [d](const FfnParams& f, const std::vector<double>& x) {
        Graph g;
        FfnNodes n{g.input(f.w1, false), g.input(f.b1, false), g.input(f.w2, false),
                   g.input(f.b2, false)};
        ValueId xin = g.input(Tensor({1, d}, std::vector<double>(x)), false);
        return g.value(ffn_forward(g, n, xin)).data;
    };
    double worst = 0.0;
    for (std::size_t probe = 0; probe < n_probes; ++probe) {
        std::vector<double> x(d);
        for (double& v : x) v = rng.normal();
        auto dense = eval(ffn, x);
        std::vector<double> sum(d, 0.0);
        for (const auto& part : parts_out) {
            auto y = eval(part, x);
            for (std::size_t i = 0; i < d; ++i) sum[i] += y[i];
        }
        for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::fabs(sum[i] - dense[i]));
    }
    return worst;
}

}  // namespace dcmoe
