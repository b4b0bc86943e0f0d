// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dcmoe/data.hpp"
#include "dcmoe/train.hpp"

using namespace dcmoe;

namespace {

DomainSpec cycle_spec(std::size_t vocab) {
    // deterministic +1 cycle, start pinned at token 0
    DomainSpec s;
    s.id = 0;
    s.name = "cycle";
    s.vocab = vocab;
    s.n_channels = 1;
    s.seq_len = 2 * vocab;
    Tensor t({vocab, vocab});
    for (std::size_t v = 0; v < vocab; ++v) t.at(v, (v + 1) % vocab) = 1.0;
    s.transition = {t};
    std::vector<double> start(vocab, 0.0);
    start[0] = 1.0;
    s.start = {start};
    return s;
}

DatasetManifest small_manifest() {
    DatasetManifest m;
    m.raw_counts = {40, 30, 25, 5};
    m.balanced_per_domain = 10;
    m.eval_per_domain = 4;
    m.warmup_fraction = 0.4;
    m.seed = 3;
    m.vocab = 16;
    m.n_channels = 2;
    m.seq_len = 12;
    return m;
}

ModelConfig tiny_moe_cfg() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_channels = 2;
    c.vocab_size = 16;
    c.max_seq = 12;
    c.ffn_hidden = 8;
    MoeConfig m;
    m.n_routed = 4;
    m.n_null = 1;
    m.n_shared = 1;
    m.expert_hidden = 4;
    c.moe = m;
    return c;
}

double total_variation(const Tensor& a, const Tensor& b, std::size_t row) {
    double tv = 0.0;
    for (std::size_t c = 0; c < a.shape[1]; ++c) tv += std::fabs(a.at(row, c) - b.at(row, c));
    return tv / 2.0;
}

}  // namespace

TEST_CASE("deterministic chain reproduces the exact cycle") {
    DomainSpec s = cycle_spec(8);
    s.validate();
    Dataset ds = generate_domain(s, 3, 11);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t t = 0; t < s.seq_len; ++t)
            CHECK(ds.tokens[(i * s.seq_len + t) * 1 + 0] == t % 8);
}

TEST_CASE("uniform chain token frequencies pass a 3-sigma check") {
    DomainSpec s;
    s.id = 0;
    s.name = "uniform";
    s.vocab = 8;
    s.n_channels = 1;
    s.seq_len = 64;
    s.transition = {Tensor::full({8, 8}, 1.0 / 8.0)};
    s.start = {std::vector<double>(8, 1.0 / 8.0)};
    Dataset ds = generate_domain(s, 64, 5);
    std::vector<std::size_t> counts(8, 0);
    for (std::size_t tok : ds.tokens) ++counts[tok];
    double n = static_cast<double>(ds.tokens.size());
    double expect = n / 8.0;
    double sigma = std::sqrt(n * (1.0 / 8.0) * (7.0 / 8.0));
    for (std::size_t v = 0; v < 8; ++v)
        CHECK(std::fabs(static_cast<double>(counts[v]) - expect) <= 3.0 * sigma);
}

TEST_CASE("generation is reproducible from the seed alone") {
    DomainSpec s = default_domains(16, 2, 12)[1];
    Dataset a = generate_domain(s, 20, 9);
    Dataset b = generate_domain(s, 20, 9);
    CHECK(a.tokens == b.tokens);
    Dataset c = generate_domain(s, 20, 10);
    CHECK(a.tokens != c.tokens);
}

TEST_CASE("default domains are valid and pairwise separated") {
    auto specs = default_domains(16, 2, 12);
    REQUIRE(specs.size() == 4);
    for (const auto& s : specs) s.validate();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j)
            for (std::size_t c = 0; c < 2; ++c) {
                double min_tv = 1.0;
                for (std::size_t row = 0; row < 16; ++row)
                    min_tv = std::min(min_tv, total_variation(specs[i].transition[c],
                                                              specs[j].transition[c], row));
                CHECK(min_tv >= 0.2);
            }
}

TEST_CASE("dataset save/load round-trip") {
    DomainSpec s = default_domains(16, 2, 12)[2];
    Dataset ds = generate_domain(s, 15, 4);
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "dcmoe_test_data";
    fs::create_directories(dir);
    auto path = (dir / "d.bin").string();
    save_dataset(ds, path);
    Dataset back = load_dataset(path);
    CHECK(back.domain == ds.domain);
    CHECK(back.n_seqs == ds.n_seqs);
    CHECK(back.seq == ds.seq);
    CHECK(back.channels == ds.channels);
    CHECK(back.tokens == ds.tokens);
}

TEST_CASE("bundle sizes follow the manifest and warmup is a leading slice") {
    DatasetManifest m = small_manifest();
    DatasetManifest back = DatasetManifest::from_json(m.to_json());
    CHECK(back.raw_counts == m.raw_counts);
    CHECK(back.balanced_per_domain == m.balanced_per_domain);
    CHECK(back.warmup_fraction == m.warmup_fraction);

    DataBundle b = build_bundle(m);
    REQUIRE(b.raw.size() == 4);
    for (std::size_t d = 0; d < 4; ++d) {
        CHECK(b.raw[d].n_seqs == m.raw_counts[d]);
        CHECK(b.balanced[d].n_seqs == m.balanced_per_domain);
        CHECK(b.eval[d].n_seqs == m.eval_per_domain);
        CHECK(b.warmup[d].n_seqs == static_cast<std::size_t>(0.4 * 10));
        std::vector<std::size_t> lead(
            b.balanced[d].tokens.begin(),
            b.balanced[d].tokens.begin() +
                static_cast<std::ptrdiff_t>(b.warmup[d].tokens.size()));
        CHECK(b.warmup[d].tokens == lead);
        // eval drawn from a different stream than training data
        CHECK(b.eval[d].tokens !=
              std::vector<std::size_t>(b.raw[d].tokens.begin(),
                                       b.raw[d].tokens.begin() +
                                           static_cast<std::ptrdiff_t>(b.eval[d].tokens.size())));
    }
}

TEST_CASE("aux weight anneals linearly") {
    StageConfig cfg;
    cfg.steps = 11;
    cfg.aux_w_start = 1e-2;
    cfg.aux_w_end = 1e-3;
    CHECK(aux_weight_at(cfg, 0) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(aux_weight_at(cfg, 10) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(aux_weight_at(cfg, 5) == doctest::Approx(0.5 * (1e-2 + 1e-3)).epsilon(1e-12));
    // equal spacing
    double d1 = aux_weight_at(cfg, 1) - aux_weight_at(cfg, 2);
    double d2 = aux_weight_at(cfg, 7) - aux_weight_at(cfg, 8);
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
}

TEST_CASE("zero training steps is a no-op") {
    ModelConfig cfg = tiny_moe_cfg();
    Rng rng(33);
    ParamStore ps = init_params(cfg, rng);
    ParamStore before = ps;
    StageConfig sc;
    sc.stage = "joint";
    sc.steps = 0;
    auto sampler = [&](std::size_t, Rng&) -> Batch { FAIL("sampler must not run"); return {}; };
    LossTrace trace = train_stage(cfg, ps, sc, sampler, 4);
    CHECK(trace.empty());
    for (const auto& [name, t] : before) CHECK(ps.at(name).data == t.data);
}

TEST_CASE("masked training leaves frozen parameters bit-identical") {
    CHECK(param_trainable("layer0.moe.gate", TrainMask::GateAndShared));
    CHECK(param_trainable("layer0.moe.shared0.w1", TrainMask::GateAndShared));
    CHECK(!param_trainable("layer0.moe.expert3.w2", TrainMask::GateAndShared));
    CHECK(!param_trainable("embed.ch0", TrainMask::GateAndShared));
    CHECK(param_trainable("embed.ch0", TrainMask::All));

    ModelConfig cfg = tiny_moe_cfg();
    Rng rng(34);
    ParamStore ps = init_params(cfg, rng);
    ParamStore before = ps;

    DatasetManifest m = small_manifest();
    DataBundle bundle = build_bundle(m);
    StageConfig sc;
    sc.stage = "warmup";
    sc.mask = TrainMask::GateAndShared;
    sc.steps = 8;
    sc.batch_size = 2;
    sc.lr = 1e-3;
    sc.seed = 2;
    auto sampler = pooled_sampler({&bundle.warmup[0], &bundle.warmup[1]}, sc.batch_size);
    LossTrace trace = train_stage(cfg, ps, sc, sampler, 4);
    REQUIRE(trace.size() == 8);

    bool gate_changed = false;
    for (const auto& [name, t] : before) {
        if (param_trainable(name, TrainMask::GateAndShared)) {
            if (ps.at(name).data != t.data) gate_changed = true;
        } else {
            CHECK(ps.at(name).data == t.data);
        }
    }
    CHECK(gate_changed);
}

TEST_CASE("trace records the cosine learning-rate schedule") {
    ModelConfig cfg = tiny_moe_cfg();
    Rng rng(35);
    ParamStore ps = init_params(cfg, rng);
    DatasetManifest m = small_manifest();
    DataBundle bundle = build_bundle(m);
    StageConfig sc;
    sc.stage = "joint";
    sc.steps = 9;
    sc.batch_size = 2;
    sc.lr = 1e-3;
    sc.lr_end_frac = 0.1;
    auto sampler = pooled_sampler({&bundle.balanced[2]}, sc.batch_size);
    LossTrace trace = train_stage(cfg, ps, sc, sampler, 4);
    REQUIRE(trace.size() == 9);
    CHECK(trace.front().lr == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(trace.back().lr == doctest::Approx(1e-4).epsilon(1e-12));
    // midpoint of the cosine
    CHECK(trace[4].lr == doctest::Approx(0.5 * (1e-3 + 1e-4)).epsilon(1e-9));
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i].lr < trace[i - 1].lr);
    // domain-loss column: only the sampled domain is finite
    for (const auto& row : trace) {
        REQUIRE(row.domain_loss.size() == 4);
        CHECK(std::isfinite(row.domain_loss[2]));
        CHECK(!std::isfinite(row.domain_loss[0]));
    }
}

TEST_CASE("pooled sampler mixes pools in proportion to their sizes") {
    DomainSpec s0 = default_domains(16, 2, 12)[0];
    DomainSpec s1 = default_domains(16, 2, 12)[1];
    Dataset big = generate_domain(s0, 60, 1);
    Dataset small = generate_domain(s1, 20, 2);
    auto sampler = pooled_sampler({&big, &small}, 8);
    Rng rng(77);
    std::size_t from_big = 0, total = 0;
    for (std::size_t step = 0; step < 200; ++step) {
        Batch b = sampler(step, rng);
        REQUIRE(b.domains.size() == 8);
        for (std::size_t d : b.domains) {
            if (d == s0.id) ++from_big;
            ++total;
        }
    }
    double p = 60.0 / 80.0;
    double sigma = std::sqrt(static_cast<double>(total) * p * (1 - p));
    CHECK(std::fabs(static_cast<double>(from_big) - p * total) <= 3.0 * sigma);
}

TEST_CASE("trace CSV round-trips including absent domain losses") {
    LossTrace trace;
    for (std::size_t i = 0; i < 3; ++i) {
        TraceRow r;
        r.step = i;
        r.stage = "joint";
        r.total = 1.5 - 0.1 * static_cast<double>(i);
        r.primary = r.total - 0.01;
        r.aux = 1.02;
        r.aux_weight = 1e-2;
        r.lr = 1e-4;
        r.domain_loss = {1.4, std::numeric_limits<double>::quiet_NaN(), 1.6, 1.7};
        trace.push_back(r);
    }
    std::string csv = trace_csv(trace, {"A", "B", "C", "D"});
    LossTrace back = trace_from_csv(csv, 4);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].step == trace[i].step);
        CHECK(back[i].stage == trace[i].stage);
        CHECK(back[i].total == trace[i].total);
        CHECK(back[i].aux == trace[i].aux);
        CHECK(back[i].lr == trace[i].lr);
        CHECK(back[i].domain_loss[0] == trace[i].domain_loss[0]);
        CHECK(!std::isfinite(back[i].domain_loss[1]));
        CHECK(back[i].domain_loss[3] == trace[i].domain_loss[3]);
    }
    CHECK(trace_csv(back, {"A", "B", "C", "D"}) == csv);
}

TEST_CASE("a short dense run reduces the training loss") {
    ModelConfig cfg = tiny_moe_cfg();
    cfg.moe.reset();
    Rng rng(36);
    ParamStore ps = init_params(cfg, rng);
    DomainSpec s = cycle_spec(8);
    s.n_channels = 1;
    cfg.n_channels = 1;
    cfg.vocab_size = 8;
    cfg.max_seq = s.seq_len;
    ps = init_params(cfg, rng);
    Dataset ds = generate_domain(s, 16, 6);
    StageConfig sc;
    sc.stage = "specialist";
    sc.steps = 40;
    sc.batch_size = 4;
    sc.lr = 3e-3;
    sc.seed = 4;
    auto sampler = pooled_sampler({&ds}, sc.batch_size);
    LossTrace trace = train_stage(cfg, ps, sc, sampler, 1);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        head += trace[i].total;
        tail += trace[trace.size() - 1 - i].total;
    }
    CHECK(tail < head);
}
