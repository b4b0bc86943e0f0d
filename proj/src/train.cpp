// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/train.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dcmoe {

bool param_trainable(const std::string& name, TrainMask mask) {
    if (mask == TrainMask::All) return true;
    return name.find(".moe.gate") != std::string::npos ||
           name.find(".moe.shared") != std::string::npos;
}

nlohmann::json StageConfig::to_json() const {
    return {{"stage", stage},
            {"mask", mask == TrainMask::All ? "all" : "gate_and_shared"},
            {"steps", steps},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lr_end_frac", lr_end_frac},
            {"weight_decay", weight_decay},
            {"aux_w_start", aux_w_start},
            {"aux_w_end", aux_w_end},
            {"seed", seed}};
}

StageConfig StageConfig::from_json(const nlohmann::json& j) {
    StageConfig c;
    c.stage = j.at("stage");
    c.mask = j.at("mask") == "all" ? TrainMask::All : TrainMask::GateAndShared;
    c.steps = j.at("steps");
    c.batch_size = j.at("batch_size");
    c.lr = j.at("lr");
    c.lr_end_frac = j.at("lr_end_frac");
    c.weight_decay = j.at("weight_decay");
    c.aux_w_start = j.at("aux_w_start");
    c.aux_w_end = j.at("aux_w_end");
    c.seed = j.at("seed");
    return c;
}

double aux_weight_at(const StageConfig& cfg, std::size_t step) {
    if (cfg.steps <= 1) return cfg.aux_w_start;
    double frac = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
    return cfg.aux_w_start + (cfg.aux_w_end - cfg.aux_w_start) * frac;
}

static double lr_at(const StageConfig& cfg, std::size_t step) {
    double lr_end = cfg.lr * cfg.lr_end_frac;
    if (cfg.steps <= 1) return cfg.lr;
    double frac = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
    return lr_end + (cfg.lr - lr_end) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {
std::string fmt(double v) {
    if (std::isnan(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}
}  // namespace

std::string trace_csv(const LossTrace& trace, const std::vector<std::string>& domain_names) {
    std::string out = "step,stage,total,primary,aux,aux_weight,lr";
    for (const auto& d : domain_names) out += ",loss_" + d;
    out += "\n";
    for (const auto& r : trace) {
        out += std::to_string(r.step) + "," + r.stage + "," + fmt(r.total) + "," + fmt(r.primary) +
               "," + fmt(r.aux) + "," + fmt(r.aux_weight) + "," + fmt(r.lr);
        for (double v : r.domain_loss) out += "," + fmt(v);
        out += "\n";
    }
    return out;
}

LossTrace trace_from_csv(const std::string& text, std::size_t n_domains) {
    LossTrace out;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            std::size_t comma = line.find(',', pos);
            cells.push_back(line.substr(pos, comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cells.size() != 7 + n_domains)
            throw std::runtime_error("trace csv: bad column count");
        TraceRow r;
        r.step = std::stoull(cells[0]);
        r.stage = cells[1];
        r.total = std::stod(cells[2]);
        r.primary = std::stod(cells[3]);
        r.aux = std::stod(cells[4]);
        r.aux_weight = std::stod(cells[5]);
        r.lr = std::stod(cells[6]);
        for (std::size_t d = 0; d < n_domains; ++d)
            r.domain_loss.push_back(cells[7 + d].empty() ? std::nan("") : std::stod(cells[7 + d]));
        out.push_back(std::move(r));
    }
    return out;
}

LossTrace train_stage(ModelConfig& model_cfg, ParamStore& params, const StageConfig& cfg,
                      const BatchSampler& sampler, std::size_t n_domains, RoutingTelemetry* tel) {
    LossTrace trace;
    if (cfg.steps == 0) return trace;
    Rng rng(cfg.seed, 0x747261696eULL);

    ParamStore m_state, v_state;
    for (const auto& [name, t] : params) {
        if (!param_trainable(name, cfg.mask)) continue;
        m_state[name] = Tensor(t.shape);
        v_state[name] = Tensor(t.shape);
    }

    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double initial_loss = 0.0;
    std::size_t divergent_run = 0;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Batch batch = sampler(step, rng);
        double aux_w = aux_weight_at(cfg, step);
        Graph g;
        LossNodes nodes = build_loss(g, model_cfg, params, batch, aux_w, tel);
        g.backward(nodes.total);

        TraceRow row;
        row.step = step;
        row.stage = cfg.stage;
        row.total = g.value(nodes.total).data[0];
        row.primary = g.value(nodes.primary).data[0];
        row.aux = nodes.aux >= 0 ? g.value(nodes.aux).data[0] : 0.0;
        row.aux_weight = aux_w;
        row.lr = lr_at(cfg, step);
        row.domain_loss.assign(n_domains, std::nan(""));
        {
            std::vector<double> sum(n_domains, 0.0);
            std::vector<std::size_t> cnt(n_domains, 0);
            for (std::size_t b = 0; b < batch.batch; ++b) {
                std::size_t d = batch.domains[b];
                sum[d] += g.value(nodes.per_seq_primary[b]).data[0];
                ++cnt[d];
            }
            for (std::size_t d = 0; d < n_domains; ++d)
                if (cnt[d]) row.domain_loss[d] = sum[d] / static_cast<double>(cnt[d]);
        }
        trace.push_back(row);

        if (step == 0) initial_loss = row.total;
        divergent_run = (row.total > 10.0 * initial_loss) ? divergent_run + 1 : 0;
        if (divergent_run >= 100)
            throw divergence_error("train_stage: loss exceeded 10x initial for 100 steps", trace);

        const double t_adam = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(beta1, t_adam);
        const double bc2 = 1.0 - std::pow(beta2, t_adam);
        for (auto& [name, m] : m_state) {
            Tensor& p = params[name];
            Tensor& v = v_state[name];
            const Tensor& grad = g.grad(nodes.param_nodes.at(name));
            const bool decay = p.shape.size() > 1;  // skip biases and norm scales
            for (std::size_t i = 0; i < p.numel(); ++i) {
                double gi = grad.data.empty() ? 0.0 : grad.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                double update = (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + eps);
                if (decay) update += cfg.weight_decay * p.data[i];
                p.data[i] -= row.lr * update;
            }
        }
    }
    return trace;
}

BatchSampler pooled_sampler(std::vector<const Dataset*> pools, std::size_t batch_size) {
    std::size_t total = 0;
    for (const auto* p : pools) total += p->n_seqs;
    if (total == 0) throw std::invalid_argument("pooled_sampler: empty pools");
    return [pools, batch_size, total](std::size_t, Rng& rng) {
        Batch out;
        bool first = true;
        for (std::size_t b = 0; b < batch_size; ++b) {
            std::size_t pick = rng.uniform_int(total);
            for (const auto* p : pools) {
                if (pick < p->n_seqs) {
                    Batch one = p->batch_of({pick});
                    if (first) {
                        out = std::move(one);
                        first = false;
                    } else {
                        out.tokens.insert(out.tokens.end(), one.tokens.begin(), one.tokens.end());
                        out.domains.push_back(one.domains[0]);
                        ++out.batch;
                    }
                    break;
                }
                pick -= p->n_seqs;
            }
        }
        return out;
    };
}

std::vector<double> eval_per_domain(const ModelConfig& cfg, const ParamStore& params,
                                    const std::vector<Dataset>& eval_sets, std::size_t batch_size,
                                    RoutingTelemetry* tel) {
    std::vector<double> out;
    for (const auto& ds : eval_sets) {
        if (ds.n_seqs == 0) throw std::invalid_argument("eval_per_domain: empty dataset");
        double sum = 0.0;
        std::size_t done = 0;
        while (done < ds.n_seqs) {
            std::size_t n = std::min(batch_size, ds.n_seqs - done);
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = done + i;
            Batch b = ds.batch_of(idx);
            LossValue lv = eval_loss(cfg, params, b, 0.0, tel);
            sum += lv.primary * static_cast<double>(n);
            done += n;
        }
        out.push_back(sum / static_cast<double>(ds.n_seqs));
    }
    return out;
}

namespace {

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + path);
}

std::vector<std::string> domain_names(const DataBundle& bundle) {
    std::vector<std::string> names;
    for (const auto& s : bundle.specs) names.push_back(s.name);
    return names;
}

}  // namespace

CurriculumArtifacts run_curriculum(const DatasetManifest& manifest, const DataBundle& bundle,
                                   const ModelConfig& dense_cfg, const StageConfig& specialist,
                                   const StageConfig& warmup, const StageConfig& joint,
                                   const MoeConfig& moe, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    CurriculumArtifacts art;
    auto names = domain_names(bundle);

    // one dense model per domain; all four start from the same initial
    // weights, so the averaged trunk stays compatible with the split experts
    std::vector<Checkpoint> specialists;
    for (std::size_t k = 0; k < 4; ++k) {
        ModelConfig cfg = dense_cfg;
        Rng init_rng(manifest.seed, 0x696e6974ULL);
        ParamStore params = init_params(cfg, init_rng);
        StageConfig sc = specialist;
        sc.stage = "specialist";
        sc.seed = specialist.seed * 16 + k;
        auto sampler = pooled_sampler({&bundle.raw[k]}, sc.batch_size);
        LossTrace trace = train_stage(cfg, params, sc, sampler, 4);
        Checkpoint ck;
        ck.config = cfg.to_json();
        ck.params = std::move(params);
        ck.metadata = {{"stage", "specialist"},
                       {"domain", names[k]},
                       {"seed", sc.seed},
                       {"step_count", sc.steps}};
        std::string path = out_dir + "/specialist_" + names[k] + ".dcm";
        save_checkpoint(ck, path);
        std::string tpath = out_dir + "/trace_specialist_" + names[k] + ".csv";
        write_file(tpath, trace_csv(trace, names));
        art.specialist_paths.push_back(path);
        art.trace_paths.push_back(tpath);
        specialists.push_back(std::move(ck));
    }

    // fuse
    FusionPlan plan;
    plan.sources = std::move(specialists);
    plan.domain_tags = names;
    plan.n_null = moe.n_null;
    plan.n_shared = moe.n_shared;
    plan.threshold_p = moe.threshold_p;
    plan.drop_null_mass = moe.drop_null_mass;
    plan.seed = manifest.seed;
    Checkpoint fused = fuse(plan);
    art.fused_path = out_dir + "/fused.dcm";
    save_checkpoint(fused, art.fused_path);

    // warmup: gate + shared only, balanced warmup subset
    ModelConfig moe_cfg = ModelConfig::from_json(fused.config);
    ParamStore params = fused.params;
    {
        StageConfig sc = warmup;
        sc.stage = "warmup";
        sc.mask = TrainMask::GateAndShared;
        std::vector<const Dataset*> pools;
        for (const auto& d : bundle.warmup) pools.push_back(&d);
        auto sampler = pooled_sampler(pools, sc.batch_size);
        LossTrace trace = train_stage(moe_cfg, params, sc, sampler, 4);
        Checkpoint ck;
        ck.config = moe_cfg.to_json();
        ck.params = params;
        ck.metadata = fused.metadata;
        ck.metadata["stage"] = "warmup";
        ck.metadata["step_count"] = sc.steps;
        art.warmup_path = out_dir + "/warmup.dcm";
        save_checkpoint(ck, art.warmup_path);
        std::string tpath = out_dir + "/trace_warmup.csv";
        write_file(tpath, trace_csv(trace, names));
        art.trace_paths.push_back(tpath);
    }

    // joint: everything trainable, full balanced set, aux weight annealed
    {
        StageConfig sc = joint;
        sc.stage = "joint";
        sc.mask = TrainMask::All;
        std::vector<const Dataset*> pools;
        for (const auto& d : bundle.balanced) pools.push_back(&d);
        auto sampler = pooled_sampler(pools, sc.batch_size);
        LossTrace trace = train_stage(moe_cfg, params, sc, sampler, 4);
        Checkpoint ck;
        ck.config = moe_cfg.to_json();
        ck.params = std::move(params);
        ck.metadata = {{"stage", "joint"}, {"seed", sc.seed}, {"step_count", sc.steps},
                       {"domains", names}};
        art.joint_path = out_dir + "/joint.dcm";
        save_checkpoint(ck, art.joint_path);
        std::string tpath = out_dir + "/trace_joint.csv";
        write_file(tpath, trace_csv(trace, names));
        art.trace_paths.push_back(tpath);
    }
    return art;
}

Checkpoint train_dense_baseline(const DatasetManifest& manifest, const DataBundle& bundle,
                                const ModelConfig& dense_cfg, const StageConfig& cfg,
                                const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    ModelConfig mc = dense_cfg;
    Rng init_rng(manifest.seed, 0x62617365ULL);
    ParamStore params = init_params(mc, init_rng);
    StageConfig sc = cfg;
    sc.stage = "dense-baseline";
    std::vector<const Dataset*> pools;
    for (const auto& d : bundle.raw) pools.push_back(&d);
    auto sampler = pooled_sampler(pools, sc.batch_size);
    auto names = domain_names(bundle);
    LossTrace trace = train_stage(mc, params, sc, sampler, 4);
    Checkpoint ck;
    ck.config = mc.to_json();
    ck.params = std::move(params);
    ck.metadata = {{"stage", "dense-baseline"}, {"seed", sc.seed}, {"step_count", sc.steps}};
    save_checkpoint(ck, out_dir + "/dense_baseline.dcm");
    std::ofstream os(out_dir + "/trace_dense_baseline.csv", std::ios::binary | std::ios::trunc);
    os << trace_csv(trace, names);
    return ck;
}

}  // namespace dcmoe
