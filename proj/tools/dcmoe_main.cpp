// SPDX-License-Identifier: Apache-2.0
//
// Single entry point for the whole pipeline:
//   gen-data -> train-specialist x4 -> fuse -> train-warmup -> train-joint
//   -> eval / analyze / compare (plus train-dense-baseline for Fig.-1-style
//   comparisons).
//
// All numerics come from the preset (optionally overridden by --config, a
// JSON merge patch); flags carry only paths, seed, and preset name.
// Exit codes: 0 success, 1 user/config error, 2 numeric failure.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "dcmoe/checkpoint.hpp"
#include "dcmoe/fusion.hpp"
#include "dcmoe/presets.hpp"
#include "dcmoe/telemetry.hpp"
#include "dcmoe/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dcmoe;

namespace {

bool verbose() {
    const char* v = std::getenv("DCMOE_LOG");
    return !(v && std::string(v) == "quiet");
}

void info(const std::string& msg) {
    if (verbose()) std::cerr << "dcmoe: " << msg << "\n";
}

const std::vector<std::string> kDomains{"A", "B", "C", "D"};

struct CommonArgs {
    std::string out_dir;
    std::string config_path;
    std::string preset = "smoke";
    std::int64_t seed = -1;  // <0: keep the preset's seed
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--out", a.out_dir, "run output directory")->required();
    cmd->add_option("--config", a.config_path, "JSON merge patch over the preset");
    cmd->add_option("--preset", a.preset, "smoke or full")->check(CLI::IsMember({"smoke", "full"}));
    cmd->add_option("--seed", a.seed, "override every stage/data seed");
}

RunPreset resolve_preset(const CommonArgs& a) {
    RunPreset p = make_preset(a.preset);
    if (!a.config_path.empty()) {
        std::ifstream is(a.config_path);
        if (!is) throw std::invalid_argument("cannot read config file: " + a.config_path);
        p = apply_overrides(p, json::parse(is));
    }
    if (a.seed >= 0) reseed(p, static_cast<std::uint64_t>(a.seed));
    return p;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os << text;
    if (!os) throw std::runtime_error("cannot write " + path);
}

std::string config_hash(const RunPreset& p) {
    std::size_t h = std::hash<std::string>{}(p.to_json().dump());
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016zx", h);
    return buf;
}

void write_run_manifest(const std::string& out_dir, const std::string& command,
                        const RunPreset& p, const std::vector<std::string>& artifacts) {
    json j{{"command", command},
           {"config_hash", config_hash(p)},
           {"seed", p.manifest.seed},
           {"artifacts", artifacts}};
    write_text(out_dir + "/" + command + "_run.json", j.dump(2) + "\n");
}

void require_file(const std::string& path, const std::string& producer) {
    if (!fs::exists(path))
        throw std::invalid_argument("missing " + path + "; run `dcmoe " + producer + "` first");
}

std::string data_dir(const std::string& out_dir) { return out_dir + "/data"; }

std::string dataset_path(const std::string& out_dir, const std::string& split, std::size_t k) {
    return data_dir(out_dir) + "/" + split + "_" + kDomains[k] + ".bin";
}

std::vector<Dataset> load_split(const std::string& out_dir, const std::string& split) {
    std::vector<Dataset> out;
    for (std::size_t k = 0; k < 4; ++k) {
        require_file(dataset_path(out_dir, split, k), "gen-data");
        out.push_back(load_dataset(dataset_path(out_dir, split, k)));
    }
    return out;
}

std::size_t domain_index(const std::string& name) {
    for (std::size_t k = 0; k < 4; ++k)
        if (kDomains[k] == name) return k;
    throw std::invalid_argument("unknown domain: " + name + " (expected A..D)");
}

void check_data_compat(const RunPreset& p, const Dataset& ds) {
    if (ds.channels != p.dense.n_channels || ds.seq != p.manifest.seq_len)
        throw std::invalid_argument("dataset shape does not match the configured model");
}

Checkpoint load_ckpt(const std::string& path, const std::string& producer) {
    require_file(path, producer);
    return load_checkpoint(path);
}

// ---- subcommands ----

void cmd_gen_data(const CommonArgs& a) {
    RunPreset p = resolve_preset(a);
    fs::create_directories(data_dir(a.out_dir));
    info("generating datasets (seed " + std::to_string(p.manifest.seed) + ")");
    DataBundle b = build_bundle(p.manifest);
    std::vector<std::string> artifacts;
    auto save_all = [&](const std::string& split, const std::vector<Dataset>& sets) {
        for (std::size_t k = 0; k < 4; ++k) {
            save_dataset(sets[k], dataset_path(a.out_dir, split, k));
            artifacts.push_back(dataset_path(a.out_dir, split, k));
        }
    };
    save_all("raw", b.raw);
    save_all("balanced", b.balanced);
    save_all("warmup", b.warmup);
    save_all("eval", b.eval);
    json dm = p.manifest.to_json();
    dm["domains"] = kDomains;
    write_text(data_dir(a.out_dir) + "/manifest.json", dm.dump(2) + "\n");
    artifacts.push_back(data_dir(a.out_dir) + "/manifest.json");
    write_run_manifest(a.out_dir, "gen-data", p, artifacts);
}

void cmd_train_specialist(const CommonArgs& a, const std::string& domain) {
    RunPreset p = resolve_preset(a);
    std::size_t k = domain_index(domain);
    require_file(dataset_path(a.out_dir, "raw", k), "gen-data");
    Dataset raw = load_dataset(dataset_path(a.out_dir, "raw", k));
    check_data_compat(p, raw);

    ModelConfig cfg = p.dense;
    Rng init_rng(p.manifest.seed, 0x696e6974ULL);  // all specialists share one init
    ParamStore params = init_params(cfg, init_rng);
    StageConfig sc = p.specialist;
    sc.stage = "specialist";
    sc.seed = p.specialist.seed * 16 + k;
    info("training specialist " + domain + " (" + std::to_string(sc.steps) + " steps)");
    LossTrace trace = train_stage(cfg, params, sc, pooled_sampler({&raw}, sc.batch_size), 4);

    Checkpoint ck;
    ck.config = cfg.to_json();
    ck.params = std::move(params);
    ck.metadata = {{"stage", "specialist"},
                   {"domain", domain},
                   {"seed", sc.seed},
                   {"step_count", sc.steps}};
    std::string ck_path = a.out_dir + "/specialist_" + domain + ".dcm";
    std::string tr_path = a.out_dir + "/trace_specialist_" + domain + ".csv";
    save_checkpoint(ck, ck_path);
    write_text(tr_path, trace_csv(trace, kDomains));
    write_run_manifest(a.out_dir, "train-specialist-" + domain, p, {ck_path, tr_path});
    info("final loss " + std::to_string(trace.back().total));
}

void cmd_fuse(const CommonArgs& a) {
    RunPreset p = resolve_preset(a);
    FusionPlan plan;
    for (const auto& d : kDomains)
        plan.sources.push_back(load_ckpt(a.out_dir + "/specialist_" + d + ".dcm",
                                         "train-specialist --domain " + d));
    plan.domain_tags = kDomains;
    plan.parts = p.parts;
    plan.n_null = p.moe.n_null;
    plan.n_shared = p.moe.n_shared;
    plan.threshold_p = p.moe.threshold_p;
    plan.drop_null_mass = p.moe.drop_null_mass;
    plan.seed = p.manifest.seed;
    info("fusing 4 specialists into " + std::to_string(4 * p.parts) + " routed experts");
    Checkpoint fused = fuse(plan);

    // verification report: split-sum residuals per (layer, source)
    double max_res = 0.0;
    json residuals = json::array();
    ModelConfig dense_cfg = ModelConfig::from_json(plan.sources[0].config);
    for (std::size_t l = 0; l < dense_cfg.n_layers; ++l) {
        std::string layer = "layer" + std::to_string(l);
        for (std::size_t s = 0; s < 4; ++s) {
            FfnParams src = extract_ffn(plan.sources[s].params, layer + ".ffn");
            std::vector<FfnParams> parts_out;
            for (std::size_t q = 0; q < p.parts; ++q)
                parts_out.push_back(extract_ffn(
                    fused.params, layer + ".moe.expert" + std::to_string(p.parts * s + q)));
            Rng probe_rng(p.manifest.seed, 0x7265736964ULL);
            double r = split_residual(src, parts_out, 8, probe_rng);
            residuals.push_back({{"layer", l}, {"source", kDomains[s]}, {"residual", r}});
            max_res = std::max(max_res, r);
        }
    }
    if (max_res > 1e-10) throw numeric_error("fuse: split-sum residual above 1e-10");

    std::string ck_path = a.out_dir + "/fused.dcm";
    save_checkpoint(fused, ck_path);
    json report{{"max_residual", max_res}, {"residuals", residuals}};
    std::string rep_path = a.out_dir + "/fuse_report.json";
    write_text(rep_path, report.dump(2) + "\n");
    write_run_manifest(a.out_dir, "fuse", p, {ck_path, rep_path});
    info("max split residual " + std::to_string(max_res));
}

void run_moe_stage(const CommonArgs& a, const RunPreset& p, const std::string& stage,
                   const StageConfig& stage_cfg, const Checkpoint& start,
                   const std::string& split) {
    std::vector<Dataset> pools_ds = load_split(a.out_dir, split);
    for (const auto& d : pools_ds) check_data_compat(p, d);
    ModelConfig cfg = ModelConfig::from_json(start.config);
    ParamStore params = start.params;
    StageConfig sc = stage_cfg;
    sc.stage = stage;

    RoutingTelemetry tel(cfg.n_layers, cfg.moe->n_routed + cfg.moe->n_null, 4);
    tel.set_n_routed(cfg.moe->n_routed);
    std::vector<const Dataset*> pools;
    for (const auto& d : pools_ds) pools.push_back(&d);
    info("training " + stage + " (" + std::to_string(sc.steps) + " steps)");
    LossTrace trace = train_stage(cfg, params, sc, pooled_sampler(pools, sc.batch_size), 4, &tel);

    Checkpoint ck;
    ck.config = cfg.to_json();
    ck.params = std::move(params);
    ck.metadata = start.metadata;
    ck.metadata["stage"] = stage;
    ck.metadata["seed"] = sc.seed;
    ck.metadata["step_count"] = sc.steps;
    if (stage == "joint") ck.metadata.erase("frozen_params");
    std::string ck_path = a.out_dir + "/" + stage + ".dcm";
    std::string tr_path = a.out_dir + "/trace_" + stage + ".csv";
    std::string tel_path = a.out_dir + "/telemetry_" + stage + ".json";
    save_checkpoint(ck, ck_path);
    write_text(tr_path, trace_csv(trace, kDomains));
    write_text(tel_path, telemetry_to_json(tel));
    write_run_manifest(a.out_dir, "train-" + stage, p, {ck_path, tr_path, tel_path});
    info("final loss " + std::to_string(trace.back().total));
}

void cmd_train_warmup(const CommonArgs& a) {
    RunPreset p = resolve_preset(a);
    Checkpoint fused = load_ckpt(a.out_dir + "/fused.dcm", "fuse");
    StageConfig sc = p.warmup;
    sc.mask = TrainMask::GateAndShared;
    run_moe_stage(a, p, "warmup", sc, fused, "warmup");
}

void cmd_train_joint(const CommonArgs& a) {
    RunPreset p = resolve_preset(a);
    Checkpoint warm = load_ckpt(a.out_dir + "/warmup.dcm", "train-warmup");
    StageConfig sc = p.joint;
    sc.mask = TrainMask::All;
    run_moe_stage(a, p, "joint", sc, warm, "balanced");
}

void cmd_train_dense_baseline(const CommonArgs& a) {
    RunPreset p = resolve_preset(a);
    std::vector<Dataset> raw = load_split(a.out_dir, "raw");
    for (const auto& d : raw) check_data_compat(p, d);
    DataBundle bundle;
    bundle.specs = default_domains(p.manifest.vocab, p.manifest.n_channels, p.manifest.seq_len);
    bundle.raw = std::move(raw);
    info("training dense baseline on the imbalanced raw pools");
    train_dense_baseline(p.manifest, bundle, p.dense, p.baseline, a.out_dir);
    write_run_manifest(a.out_dir, "train-dense-baseline", p,
                       {a.out_dir + "/dense_baseline.dcm",
                        a.out_dir + "/trace_dense_baseline.csv"});
}

void cmd_eval(const CommonArgs& a, std::string ckpt_path) {
    RunPreset p = resolve_preset(a);
    if (ckpt_path.empty()) ckpt_path = a.out_dir + "/joint.dcm";
    Checkpoint ck = load_ckpt(ckpt_path, "train-joint");
    ModelConfig cfg = ModelConfig::from_json(ck.config);
    std::vector<Dataset> eval_sets = load_split(a.out_dir, "eval");
    for (const auto& d : eval_sets)
        if (cfg.vocab_size <= *std::max_element(d.tokens.begin(), d.tokens.end()) ||
            cfg.n_channels != d.channels)
            throw std::invalid_argument("checkpoint vocab/channels do not match the eval data");

    std::vector<double> losses = eval_per_domain(cfg, ck.params, eval_sets);
    std::string stem = fs::path(ckpt_path).stem().string();
    std::string csv = "domain,loss\n";
    std::printf("%-8s %s\n", "domain", "loss");
    for (std::size_t k = 0; k < 4; ++k) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.12g", losses[k]);
        csv += kDomains[k] + "," + buf + "\n";
        std::printf("%-8s %s\n", kDomains[k].c_str(), buf);
    }
    std::string csv_path = a.out_dir + "/eval_" + stem + ".csv";
    write_text(csv_path, csv);
    write_run_manifest(a.out_dir, "eval", p, {csv_path});
}

void cmd_analyze(const CommonArgs& a, std::string tel_path, std::size_t n_devices) {
    RunPreset p = resolve_preset(a);
    if (tel_path.empty()) tel_path = a.out_dir + "/telemetry_joint.json";
    require_file(tel_path, "train-joint");
    std::ifstream is(tel_path);
    RoutingTelemetry tel =
        telemetry_from_json({std::istreambuf_iterator<char>(is), {}});
    if (n_devices == 0) n_devices = tel.n_routed() / 2;  // 2 routed experts per device

    std::string dir = a.out_dir + "/analysis";
    fs::create_directories(dir);
    write_text(dir + "/activation_histogram.csv", histogram_csv(tel));
    write_text(dir + "/expert_domain.csv", expert_domain_csv(tel, kDomains));
    write_text(dir + "/null_skip.csv", null_skip_csv(tel, kDomains));

    DispatchPlan plan = plan_dispatch(tel, n_devices);
    json jp{{"n_devices", plan.n_devices},
            {"expert_device", plan.expert_device},
            {"device_load", plan.device_load},
            {"imbalance_ratio", plan.imbalance_ratio},
            {"cross_device_fraction", plan.cross_device_fraction}};
    write_text(dir + "/dispatch_plan.json", jp.dump(2) + "\n");
    write_run_manifest(a.out_dir, "analyze", p,
                       {dir + "/activation_histogram.csv", dir + "/expert_domain.csv",
                        dir + "/null_skip.csv", dir + "/dispatch_plan.json"});
}

void cmd_compare(const CommonArgs& a, const std::string& path_a, const std::string& path_b,
                 double tolerance) {
    RunPreset p = resolve_preset(a);
    Checkpoint ca = load_ckpt(path_a, "train-joint");
    Checkpoint cb = load_ckpt(path_b, "train-dense-baseline");
    ModelConfig cfg_a = ModelConfig::from_json(ca.config);
    ModelConfig cfg_b = ModelConfig::from_json(cb.config);
    if (cfg_a.vocab_size != cfg_b.vocab_size || cfg_a.n_channels != cfg_b.n_channels)
        throw std::invalid_argument("checkpoints are not comparable (vocab/channels differ)");

    std::vector<Dataset> eval_sets = load_split(a.out_dir, "eval");
    std::vector<double> la = eval_per_domain(cfg_a, ca.params, eval_sets);
    std::vector<double> lb = eval_per_domain(cfg_b, cb.params, eval_sets);

    std::string csv = "domain,loss_a,loss_b,delta,regression\n";
    std::printf("%-8s %-14s %-14s %-14s %s\n", "domain", "loss_a", "loss_b", "delta", "flag");
    bool any_regression = false;
    for (std::size_t k = 0; k < 4; ++k) {
        double delta = la[k] - lb[k];
        bool reg = delta > tolerance;
        any_regression = any_regression || reg;
        char buf[128];
        std::snprintf(buf, sizeof buf, "%.12g,%.12g,%.12g", la[k], lb[k], delta);
        csv += kDomains[k] + "," + buf + "," + (reg ? "yes" : "no") + "\n";
        std::printf("%-8s %-14.6g %-14.6g %-14.6g %s\n", kDomains[k].c_str(), la[k], lb[k], delta,
                    reg ? "REGRESSION" : "");
    }
    std::string csv_path = a.out_dir + "/compare.csv";
    write_text(csv_path, csv);
    write_run_manifest(a.out_dir, "compare", p, {csv_path});
    if (any_regression) info("regressions beyond tolerance were flagged in compare.csv");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic-capacity MoE pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string domain, ckpt_path, tel_path, path_a, path_b;
    std::size_t n_devices = 0;
    double tolerance = 1e-6;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic domain datasets");
    add_common(gen, args);

    auto* spec = app.add_subcommand("train-specialist", "train one dense domain specialist");
    add_common(spec, args);
    spec->add_option("--domain", domain, "domain tag A..D")->required();

    auto* fuse_cmd = app.add_subcommand("fuse", "fuse 4 specialists into one MoE checkpoint");
    add_common(fuse_cmd, args);

    auto* warm = app.add_subcommand("train-warmup", "train gate and shared experts only");
    add_common(warm, args);

    auto* joint = app.add_subcommand("train-joint", "joint training of the full MoE model");
    add_common(joint, args);

    auto* dense = app.add_subcommand("train-dense-baseline",
                                     "train the naive dense baseline on raw pools");
    add_common(dense, args);

    auto* ev = app.add_subcommand("eval", "per-domain held-out loss for one checkpoint");
    add_common(ev, args);
    ev->add_option("--ckpt", ckpt_path, "checkpoint path (default: <out>/joint.dcm)");

    auto* an = app.add_subcommand("analyze", "export routing analytics and a dispatch plan");
    add_common(an, args);
    an->add_option("--telemetry", tel_path, "telemetry JSON (default: <out>/telemetry_joint.json)");
    an->add_option("--devices", n_devices, "device count (default: n_routed / 2)");

    auto* cmp = app.add_subcommand("compare", "side-by-side per-domain eval of two checkpoints");
    add_common(cmp, args);
    cmp->add_option("--a", path_a, "first checkpoint")->required();
    cmp->add_option("--b", path_b, "second checkpoint")->required();
    cmp->add_option("--tolerance", tolerance, "flag a domain when loss_a - loss_b exceeds this");

    CLI11_PARSE(app, argc, argv);

    try {
        fs::create_directories(args.out_dir);
        if (gen->parsed()) cmd_gen_data(args);
        if (spec->parsed()) cmd_train_specialist(args, domain);
        if (fuse_cmd->parsed()) cmd_fuse(args);
        if (warm->parsed()) cmd_train_warmup(args);
        if (joint->parsed()) cmd_train_joint(args);
        if (dense->parsed()) cmd_train_dense_baseline(args);
        if (ev->parsed()) cmd_eval(args, ckpt_path);
        if (an->parsed()) cmd_analyze(args, tel_path, n_devices);
        if (cmp->parsed()) cmd_compare(args, path_a, path_b, tolerance);
    } catch (const numeric_error& e) {
        std::cerr << "dcmoe: numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const divergence_error& e) {
        std::cerr << "dcmoe: training diverged: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "dcmoe: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
