// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/model.hpp"

#include <stdexcept>

namespace dcmoe {

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j{{"n_layers", n_layers},   {"d_model", d_model},
                     {"n_heads", n_heads},     {"n_channels", n_channels},
                     {"vocab_size", vocab_size}, {"max_seq", max_seq},
                     {"ffn_hidden", ffn_hidden}};
    if (moe) {
        j["moe"] = {{"n_routed", moe->n_routed},       {"n_null", moe->n_null},
                    {"n_shared", moe->n_shared},       {"expert_hidden", moe->expert_hidden},
                    {"threshold_p", moe->threshold_p}, {"drop_null_mass", moe->drop_null_mass}};
    }
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.n_channels = j.at("n_channels");
    c.vocab_size = j.at("vocab_size");
    c.max_seq = j.at("max_seq");
    c.ffn_hidden = j.at("ffn_hidden");
    if (j.contains("moe")) {
        MoeConfig m;
        const auto& jm = j.at("moe");
        m.n_routed = jm.at("n_routed");
        m.n_null = jm.at("n_null");
        m.n_shared = jm.at("n_shared");
        m.expert_hidden = jm.at("expert_hidden");
        m.threshold_p = jm.at("threshold_p");
        m.drop_null_mass = jm.at("drop_null_mass");
        c.moe = m;
    }
    c.validate();
    return c;
}

void ModelConfig::validate() const {
    if (d_model % n_heads != 0) throw std::invalid_argument("config: d_model % n_heads != 0");
    if (n_channels < 1) throw std::invalid_argument("config: n_channels < 1");
    if (moe && !(moe->threshold_p > 0.0 && moe->threshold_p <= 1.0))
        throw std::invalid_argument("config: threshold_p outside (0,1]");
    if (moe && moe->n_routed < 1) throw std::invalid_argument("config: n_routed < 1");
}

namespace {

Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * std_dev;
    return t;
}

void init_ffn(ParamStore& ps, const std::string& prefix, std::size_t d, std::size_t h, Rng& rng) {
    ps[prefix + ".w1"] = gaussian({d, h}, rng, 0.02);
    ps[prefix + ".b1"] = Tensor({h});
    ps[prefix + ".w2"] = gaussian({h, d}, rng, 0.02);
    ps[prefix + ".b2"] = Tensor({d});
}

std::string lp(std::size_t layer, const std::string& rest) {
    return "layer" + std::to_string(layer) + "." + rest;
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ParamStore ps;
    const std::size_t d = cfg.d_model;
    for (std::size_t c = 0; c < cfg.n_channels; ++c)
        ps["embed.ch" + std::to_string(c)] = gaussian({cfg.vocab_size, d}, rng, 0.02);
    ps["pos"] = gaussian({cfg.max_seq, d}, rng, 0.02);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        ps[lp(l, "norm1")] = Tensor::full({d}, 1.0);
        ps[lp(l, "norm2")] = Tensor::full({d}, 1.0);
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            ps[lp(l, w)] = gaussian({d, d}, rng, 0.02);
        if (cfg.moe) {
            const auto& m = *cfg.moe;
            ps[lp(l, "moe.gate")] = gaussian({d, m.n_routed + m.n_null}, rng, 0.02);
            for (std::size_t e = 0; e < m.n_routed; ++e)
                init_ffn(ps, lp(l, "moe.expert" + std::to_string(e)), d, m.expert_hidden, rng);
            for (std::size_t s = 0; s < m.n_shared; ++s)
                init_ffn(ps, lp(l, "moe.shared" + std::to_string(s)), d, m.expert_hidden, rng);
        } else {
            init_ffn(ps, lp(l, "ffn"), d, cfg.ffn_hidden, rng);
        }
    }
    ps["final_norm"] = Tensor::full({d}, 1.0);
    for (std::size_t c = 0; c < cfg.n_channels; ++c)
        ps["head.ch" + std::to_string(c)] = gaussian({d, cfg.vocab_size}, rng, 0.02);
    return ps;
}

namespace {

struct Builder {
    Graph& g;
    const ModelConfig& cfg;
    std::map<std::string, ValueId> nodes;

    ValueId p(const std::string& name) { return nodes.at(name); }

    FfnNodes ffn_nodes(const std::string& prefix) {
        return {p(prefix + ".w1"), p(prefix + ".b1"), p(prefix + ".w2"), p(prefix + ".b2")};
    }

    /// One sequence through the stack; returns final hidden states [T x d]
    /// and appends each MoE layer's aux-loss node to `aux_nodes`.
    ValueId run_sequence(const Batch& batch, std::size_t b, std::vector<ValueId>& aux_nodes,
                         RoutingTelemetry* tel) {
        const std::size_t T = batch.seq;
        std::vector<std::size_t> ids(T);
        ValueId x = -1;
        for (std::size_t c = 0; c < cfg.n_channels; ++c) {
            for (std::size_t t = 0; t < T; ++t) ids[t] = batch.id(b, t, c);
            ValueId e = g.embedding_rows(p("embed.ch" + std::to_string(c)), ids);
            x = (x < 0) ? e : g.add(x, e);
        }
        std::vector<std::size_t> pos_ids(T);
        for (std::size_t t = 0; t < T; ++t) pos_ids[t] = t;
        x = g.add(x, g.take_rows(p("pos"), pos_ids));

        const std::size_t domain = batch.domains.empty() ? 0 : batch.domains[b];
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            ValueId h = g.rms_norm(x, p(lp(l, "norm1")));
            ValueId a = g.attention(g.matmul(h, p(lp(l, "attn.wq"))),
                                    g.matmul(h, p(lp(l, "attn.wk"))),
                                    g.matmul(h, p(lp(l, "attn.wv"))), cfg.n_heads);
            x = g.add(x, g.matmul(a, p(lp(l, "attn.wo"))));
            ValueId h2 = g.rms_norm(x, p(lp(l, "norm2")));
            if (cfg.moe) {
                const auto& m = *cfg.moe;
                PoolNodes pool;
                pool.gate_weights = p(lp(l, "moe.gate"));
                pool.n_null = m.n_null;
                for (std::size_t e = 0; e < m.n_routed; ++e)
                    pool.routed.push_back(ffn_nodes(lp(l, "moe.expert" + std::to_string(e))));
                for (std::size_t s = 0; s < m.n_shared; ++s)
                    pool.shared.push_back(ffn_nodes(lp(l, "moe.shared" + std::to_string(s))));
                MoeOptions opt{m.threshold_p, m.drop_null_mass};
                DecisionHook hook;
                if (tel)
                    hook = [tel, l, domain](std::size_t, const RoutingDecision& dec) {
                        tel->record(l, domain, dec);
                    };
                auto out = moe_forward(g, pool, h2, opt, hook);
                aux_nodes.push_back(out.aux_loss);
                x = g.add(x, out.output);
            } else {
                x = g.add(x, ffn_forward(g, ffn_nodes(lp(l, "ffn")), h2));
            }
        }
        return g.rms_norm(x, p("final_norm"));
    }
};

}  // namespace

LossNodes build_loss(Graph& g, const ModelConfig& cfg, const ParamStore& params,
                     const Batch& batch, double aux_weight, RoutingTelemetry* tel) {
    cfg.validate();
    if (batch.seq < 2) throw std::invalid_argument("build_loss: need seq >= 2 for next-token loss");
    if (batch.seq > cfg.max_seq) throw std::invalid_argument("build_loss: seq > max_seq");
    if (aux_weight < 0.0) throw std::invalid_argument("build_loss: aux_weight < 0");

    Builder bld{g, cfg, {}};
    LossNodes out;
    for (const auto& [name, t] : params) {
        ValueId id = g.input(t, /*needs_grad=*/true);
        bld.nodes[name] = id;
        out.param_nodes[name] = id;
    }

    std::vector<ValueId> aux_nodes;
    ValueId primary = -1;
    const std::size_t T = batch.seq;
    std::vector<std::size_t> in_rows(T - 1);
    for (std::size_t t = 0; t + 1 < T; ++t) in_rows[t] = t;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        ValueId hidden = bld.run_sequence(batch, b, aux_nodes, tel);
        ValueId hin = g.take_rows(hidden, in_rows);
        std::vector<bool> mask;
        if (!batch.loss_mask.empty()) {
            mask.resize(T - 1);
            bool any = false;
            for (std::size_t t = 0; t + 1 < T; ++t) {
                mask[t] = batch.loss_mask[b * T + t + 1];
                any = any || mask[t];
            }
            if (!any) throw std::invalid_argument("build_loss: sequence with empty loss mask");
        }
        ValueId seq_ce = -1;
        for (std::size_t c = 0; c < cfg.n_channels; ++c) {
            ValueId logits = g.matmul(hin, bld.p("head.ch" + std::to_string(c)));
            std::vector<std::size_t> targets(T - 1);
            for (std::size_t t = 0; t + 1 < T; ++t) targets[t] = batch.id(b, t + 1, c);
            ValueId ce = g.cross_entropy(logits, targets, mask.empty() ? nullptr : &mask);
            seq_ce = (seq_ce < 0) ? ce : g.add(seq_ce, ce);
        }
        seq_ce = g.scale_const(seq_ce, 1.0 / static_cast<double>(cfg.n_channels));
        out.per_seq_primary.push_back(seq_ce);
        primary = (primary < 0) ? seq_ce : g.add(primary, seq_ce);
    }
    out.primary = g.scale_const(primary, 1.0 / static_cast<double>(batch.batch));
    if (!aux_nodes.empty()) {
        ValueId aux = aux_nodes[0];
        for (std::size_t i = 1; i < aux_nodes.size(); ++i) aux = g.add(aux, aux_nodes[i]);
        out.aux = g.scale_const(aux, 1.0 / static_cast<double>(aux_nodes.size()));
        out.total = g.add(out.primary, g.scale_const(out.aux, aux_weight));
    } else {
        out.aux = -1;
        out.total = out.primary;
    }
    return out;
}

Tensor forward_logits(const ModelConfig& cfg, const ParamStore& params, const Batch& batch,
                      RoutingTelemetry* tel) {
    cfg.validate();
    if (batch.seq > cfg.max_seq) throw std::invalid_argument("forward_logits: seq > max_seq");
    Graph g;
    Builder bld{g, cfg, {}};
    for (const auto& [name, t] : params) bld.nodes[name] = g.input(t, false);
    Tensor out({batch.batch, batch.seq, cfg.n_channels, cfg.vocab_size});
    std::vector<ValueId> aux_nodes;
    for (std::size_t b = 0; b < batch.batch; ++b) {
        ValueId hidden = bld.run_sequence(batch, b, aux_nodes, tel);
        for (std::size_t c = 0; c < cfg.n_channels; ++c) {
            const Tensor& logits = g.value(g.matmul(hidden, bld.p("head.ch" + std::to_string(c))));
            for (std::size_t t = 0; t < batch.seq; ++t)
                std::copy_n(&logits.data[t * cfg.vocab_size], cfg.vocab_size,
                            &out.data[((b * batch.seq + t) * cfg.n_channels + c) * cfg.vocab_size]);
        }
    }
    return out;
}

LossValue eval_loss(const ModelConfig& cfg, const ParamStore& params, const Batch& batch,
                    double aux_weight, RoutingTelemetry* tel) {
    Graph g;
    auto nodes = build_loss(g, cfg, params, batch, aux_weight, tel);
    return {g.value(nodes.total).data[0], g.value(nodes.primary).data[0],
            nodes.aux >= 0 ? g.value(nodes.aux).data[0] : 0.0};
}

}  // namespace dcmoe
