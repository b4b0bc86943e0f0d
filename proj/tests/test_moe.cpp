// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcmoe/gradcheck.hpp"
#include "dcmoe/moe.hpp"
#include "dcmoe/rng.hpp"

using namespace dcmoe;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

std::vector<double> random_prob_row(std::size_t e, Rng& rng) {
    std::vector<double> p(e);
    double sum = 0.0;
    for (double& v : p) sum += (v = -std::log(rng.uniform() + 1e-300));
    for (double& v : p) v /= sum;
    return p;
}

/// Exhaustive minimal-subset oracle: the smallest |I'| with sum >= p; among
/// minimum-size sets the expected selection is the top-|I'| by (prob desc,
/// index asc) rank. Returns the expected set sorted by that rank.
std::vector<std::size_t> brute_force_top_p(const std::vector<double>& probs, double p) {
    const std::size_t e = probs.size();
    std::size_t best = e + 1;
    for (std::size_t mask = 1; mask < (1u << e); ++mask) {
        double sum = 0.0;
        std::size_t size = 0;
        for (std::size_t i = 0; i < e; ++i)
            if (mask & (1u << i)) {
                sum += probs[i];
                ++size;
            }
        if (sum >= p) best = std::min(best, size);
    }
    if (best > e) best = e;  // fp shortfall: full set
    std::vector<std::size_t> order(e);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
    });
    order.resize(best);
    return order;
}

PoolNodes make_pool(Graph& g, std::size_t d, std::size_t hidden, std::size_t n_routed,
                    std::size_t n_null, std::size_t n_shared, Rng& rng, Tensor* gate_out = nullptr,
                    bool needs_grad = false) {
    PoolNodes pool;
    Tensor gate = random_tensor({d, n_routed + n_null}, rng, 0.5);
    if (gate_out) *gate_out = gate;
    pool.gate_weights = g.input(gate, needs_grad);
    pool.n_null = n_null;
    for (std::size_t e = 0; e < n_routed; ++e)
        pool.routed.push_back({g.input(random_tensor({d, hidden}, rng, 0.3), needs_grad),
                               g.input(random_tensor({hidden}, rng, 0.1), needs_grad),
                               g.input(random_tensor({hidden, d}, rng, 0.3), needs_grad),
                               g.input(random_tensor({d}, rng, 0.1), needs_grad)});
    for (std::size_t s = 0; s < n_shared; ++s)
        pool.shared.push_back({g.input(random_tensor({d, hidden}, rng, 0.3), needs_grad),
                               g.input(random_tensor({hidden}, rng, 0.1), needs_grad),
                               g.input(random_tensor({hidden, d}, rng, 0.3), needs_grad),
                               g.input(random_tensor({d}, rng, 0.1), needs_grad)});
    return pool;
}

}  // namespace

TEST_CASE("select_top_p worked examples") {
    std::vector<double> probs{0.5, 0.3, 0.15, 0.05};
    auto d = select_top_p(probs, 0.7, 4);
    REQUIRE(d.selected == std::vector<std::size_t>{0, 1});
    CHECK(d.mix_weights[0] == doctest::Approx(0.625));
    CHECK(d.mix_weights[1] == doctest::Approx(0.375));
    CHECK(d.n_routed_active == 2);

    std::vector<double> onehot{1.0, 0.0, 0.0};
    for (double p : {0.01, 0.5, 1.0}) {
        auto d2 = select_top_p(onehot, p, 3);
        CHECK(d2.selected == std::vector<std::size_t>{0});
        CHECK(d2.mix_weights[0] == doctest::Approx(1.0));
    }

    std::vector<double> uniform(8, 0.125);
    CHECK(select_top_p(uniform, 0.7, 8).selected.size() == 6);

    std::vector<double> pos{0.4, 0.3, 0.2, 0.1};
    CHECK(select_top_p(pos, 1.0, 4).selected.size() == 4);

    CHECK_THROWS_AS(select_top_p(pos, 0.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(select_top_p(pos, 1.5, 4), std::invalid_argument);
}

TEST_CASE("select_top_p equals exhaustive minimal-subset search") {
    Rng rng(77);
    for (int iter = 0; iter < 2000; ++iter) {
        std::size_t e = 2 + rng.uniform_int(9);  // 2..10
        auto probs = random_prob_row(e, rng);
        double p = 0.05 + 0.95 * rng.uniform();
        auto got = select_top_p(probs, p, e);
        auto want = brute_force_top_p(probs, p);
        CHECK(got.selected == want);
        // minimality: dropping the smallest-prob member breaks the bound
        if (got.selected.size() > 1) {
            double sum = 0.0;
            for (std::size_t i = 0; i + 1 < got.selected.size(); ++i)
                sum += probs[got.selected[i]];
            CHECK(sum < p);
        }
        double wsum = std::accumulate(got.mix_weights.begin(), got.mix_weights.end(), 0.0);
        CHECK(std::fabs(wsum - 1.0) <= 1e-9);
    }
}

TEST_CASE("top-p monotonicity in p") {
    Rng rng(78);
    for (int iter = 0; iter < 200; ++iter) {
        auto probs = random_prob_row(9, rng);
        double p1 = 0.1 + 0.4 * rng.uniform();
        double p2 = p1 + (1.0 - p1) * rng.uniform();
        auto i1 = select_top_p(probs, p1, 9).selected;
        auto i2 = select_top_p(probs, p2, 9).selected;
        REQUIRE(i1.size() <= i2.size());
        for (std::size_t i = 0; i < i1.size(); ++i) CHECK(i1[i] == i2[i]);
    }
}

TEST_CASE("top-p count bound") {
    Rng rng(79);
    for (int iter = 0; iter < 500; ++iter) {
        std::size_t n_routed = 2 + rng.uniform_int(7);
        std::size_t n_null = rng.uniform_int(3);
        std::size_t e = n_routed + n_null;
        auto probs = random_prob_row(e, rng);
        double p = 0.05 + 0.95 * rng.uniform();
        auto d = select_top_p(probs, p, n_routed);
        std::size_t bound = std::min<std::size_t>(
            n_routed, static_cast<std::size_t>(std::ceil(p * static_cast<double>(e))));
        CHECK(d.n_routed_active <= bound);
        if (n_null == 0) CHECK(d.n_routed_active >= 1);
    }
}

TEST_CASE("select_top_k basics and sort oracle") {
    std::vector<double> probs{0.1, 0.4, 0.2, 0.3};
    auto full = select_top_k(probs, 4, 4);
    CHECK(full.selected.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(full.mix_weights[i] == doctest::Approx(probs[full.selected[i]]));
    auto top1 = select_top_k(probs, 1, 4);
    CHECK(top1.selected == std::vector<std::size_t>{1});
    CHECK(top1.mix_weights[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(select_top_k(probs, 0, 4), std::invalid_argument);
    CHECK_THROWS_AS(select_top_k(probs, 5, 4), std::invalid_argument);

    Rng rng(80);
    for (int iter = 0; iter < 100; ++iter) {
        auto p = random_prob_row(7, rng);
        auto d = select_top_k(p, 2, 7);
        std::vector<double> sorted = p;
        std::sort(sorted.rbegin(), sorted.rend());
        CHECK(p[d.selected[0]] == doctest::Approx(sorted[0]));
        CHECK(p[d.selected[1]] == doctest::Approx(sorted[1]));
    }
}

TEST_CASE("gate: zero weights give uniform distribution") {
    Graph g;
    std::size_t d = 16, n_routed = 8, n_null = 1;
    ValueId gate = g.constant(Tensor({d, n_routed + n_null}));
    Rng rng(81);
    ValueId x = g.constant(random_tensor({5, d}, rng));
    ValueId probs = g.softmax_rows(g.matmul(x, gate));
    CHECK(g.value(probs).shape == std::vector<std::size_t>{5, 9});
    for (double v : g.value(probs).data) CHECK(v == doctest::Approx(1.0 / 9.0));
}

TEST_CASE("moe forward equals evaluate-all-experts masked oracle") {
    Rng rng(82);
    const std::size_t d = 8, hidden = 12, n_routed = 4, n_null = 1, n_shared = 1, n = 40;
    Graph g;
    PoolNodes pool = make_pool(g, d, hidden, n_routed, n_null, n_shared, rng);
    Tensor x = random_tensor({n, d}, rng);
    ValueId xin = g.constant(x);
    MoeOptions opt{0.7, false};
    auto out = moe_forward(g, pool, xin, opt);

    // dense oracle: evaluate every expert for every token, apply the same
    // selection mask and weights
    Graph go;
    std::vector<Tensor> expert_out, shared_out;
    for (std::size_t e = 0; e < n_routed; ++e) {
        FfnNodes f{go.input(g.value(pool.routed[e].w1), false),
                   go.input(g.value(pool.routed[e].b1), false),
                   go.input(g.value(pool.routed[e].w2), false),
                   go.input(g.value(pool.routed[e].b2), false)};
        expert_out.push_back(go.value(ffn_forward(go, f, go.input(x, false))));
    }
    for (std::size_t s = 0; s < n_shared; ++s) {
        FfnNodes f{go.input(g.value(pool.shared[s].w1), false),
                   go.input(g.value(pool.shared[s].b1), false),
                   go.input(g.value(pool.shared[s].w2), false),
                   go.input(g.value(pool.shared[s].b2), false)};
        shared_out.push_back(go.value(ffn_forward(go, f, go.input(x, false))));
    }
    const Tensor& got = g.value(out.output);
    for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> want(d, 0.0);
        const auto& dec = out.decisions[t];
        for (std::size_t s = 0; s < dec.selected.size(); ++s) {
            std::size_t e = dec.selected[s];
            if (e >= n_routed) continue;  // null expert: zero output
            for (std::size_t c = 0; c < d; ++c)
                want[c] += dec.mix_weights[s] * expert_out[e].at(t, c);
        }
        for (const auto& so : shared_out)
            for (std::size_t c = 0; c < d; ++c) want[c] += so.at(t, c);
        for (std::size_t c = 0; c < d; ++c) CHECK(std::fabs(got.at(t, c) - want[c]) <= 1e-10);
    }

    // output shape preserved; mixing weights sum to 1
    CHECK(got.shape == x.shape);
    for (const auto& dec : out.decisions) {
        double s = std::accumulate(dec.mix_weights.begin(), dec.mix_weights.end(), 0.0);
        CHECK(std::fabs(s - 1.0) <= 1e-9);
    }
}

TEST_CASE("token routed only to null experts yields a zero row") {
    Graph g;
    const std::size_t d = 4, n = 3;
    // gate forces nearly all mass onto the null column
    Tensor gate({d, 3});
    for (std::size_t i = 0; i < d; ++i) gate.at(i, 2) = 50.0;
    PoolNodes pool;
    pool.gate_weights = g.constant(gate);
    pool.n_null = 1;
    Rng rng(83);
    for (std::size_t e = 0; e < 2; ++e)
        pool.routed.push_back({g.constant(random_tensor({d, 6}, rng)),
                               g.constant(random_tensor({6}, rng)),
                               g.constant(random_tensor({6, d}, rng)),
                               g.constant(random_tensor({d}, rng))});
    Tensor x = Tensor::full({n, d}, 1.0);
    auto out = moe_forward(g, pool, g.constant(x), {0.7, false});
    for (double v : g.value(out.output).data) CHECK(v == 0.0);
    for (const auto& dec : out.decisions) CHECK(dec.n_routed_active == 0);
}

TEST_CASE("degenerate routing reproduces single expert plus shared") {
    Graph g;
    const std::size_t d = 6, hidden = 8, n = 5;
    Rng rng(84);
    Tensor gate({d, 4});
    for (std::size_t i = 0; i < d; ++i) gate.at(i, 1) = 80.0;  // all x positive-ish rows
    PoolNodes pool = make_pool(g, d, hidden, 3, 1, 1, rng);
    pool.gate_weights = g.constant(gate);
    Tensor x = Tensor::full({n, d}, 0.5);
    auto out = moe_forward(g, pool, g.constant(x), {0.7, false});
    ValueId want = g.add(ffn_forward(g, pool.routed[1], g.constant(x)),
                         ffn_forward(g, pool.shared[0], g.constant(x)));
    for (std::size_t i = 0; i < n * d; ++i)
        CHECK(g.value(out.output).data[i] == doctest::Approx(g.value(want).data[i]).epsilon(1e-9));
}

TEST_CASE("aux load-balance loss values") {
    // perfectly uniform assignments and probs -> 1
    AuxStats s;
    s.assignment_frac.assign(5, 0.2);
    s.mean_prob.assign(5, 0.2);
    CHECK(aux_load_balance_loss(s) == doctest::Approx(1.0));
    // collapse onto one expert -> ~E
    AuxStats c;
    c.assignment_frac = {1.0, 0.0, 0.0, 0.0};
    c.mean_prob = {1.0, 0.0, 0.0, 0.0};
    CHECK(aux_load_balance_loss(c) == doctest::Approx(4.0));
    AuxStats empty;
    CHECK_THROWS_AS(aux_load_balance_loss(empty), std::invalid_argument);
}

TEST_CASE("aux loss from forward matches direct summation oracle") {
    Rng rng(85);
    Graph g;
    PoolNodes pool = make_pool(g, 8, 10, 4, 1, 0, rng);
    Tensor x = random_tensor({30, 8}, rng);
    auto out = moe_forward(g, pool, g.constant(x), {0.7, false});
    // recompute f_i and pbar_i independently from decisions + probs
    const Tensor& P = g.value(out.gate_probs);
    std::vector<double> f(5, 0.0), pbar(5, 0.0);
    std::size_t total = 0;
    for (const auto& dec : out.decisions)
        for (std::size_t i : dec.selected) {
            f[i] += 1.0;
            ++total;
        }
    for (double& v : f) v /= static_cast<double>(total);
    for (std::size_t t = 0; t < 30; ++t)
        for (std::size_t i = 0; i < 5; ++i) pbar[i] += P.at(t, i) / 30.0;
    double want = 0.0;
    for (std::size_t i = 0; i < 5; ++i) want += f[i] * pbar[i];
    want *= 5.0;
    CHECK(std::fabs(g.value(out.aux_loss).data[0] - want) <= 1e-10);
}

TEST_CASE("moe layer gradients pass finite differences with frozen selection") {
    Rng rng(86);
    const std::size_t d = 6, hidden = 8, n = 12;
    ParamStore ps;
    ps["gate"] = random_tensor({d, 5}, rng, 0.5);
    for (std::size_t e = 0; e < 4; ++e) {
        std::string p = "e" + std::to_string(e);
        ps[p + ".w1"] = random_tensor({d, hidden}, rng, 0.3);
        ps[p + ".b1"] = random_tensor({hidden}, rng, 0.1);
        ps[p + ".w2"] = random_tensor({hidden, d}, rng, 0.3);
        ps[p + ".b2"] = random_tensor({d}, rng, 0.1);
    }
    ps["s.w1"] = random_tensor({d, hidden}, rng, 0.3);
    ps["s.b1"] = random_tensor({hidden}, rng, 0.1);
    ps["s.w2"] = random_tensor({hidden, d}, rng, 0.3);
    ps["s.b2"] = random_tensor({d}, rng, 0.1);
    Tensor x = random_tensor({n, d}, rng);

    // freeze the selection once so finite differences see a smooth function
    std::vector<RoutingDecision> frozen;
    {
        Graph g;
        PoolNodes pool;
        pool.gate_weights = g.constant(ps["gate"]);
        pool.n_null = 1;
        for (std::size_t e = 0; e < 4; ++e) {
            std::string p = "e" + std::to_string(e);
            pool.routed.push_back({g.constant(ps[p + ".w1"]), g.constant(ps[p + ".b1"]),
                                   g.constant(ps[p + ".w2"]), g.constant(ps[p + ".b2"])});
        }
        auto out = moe_forward(g, pool, g.constant(x), {0.7, false});
        frozen = out.decisions;
    }

    auto f = [&x, &frozen](const ParamStore& p, ParamStore* grads) {
        Graph g;
        std::map<std::string, ValueId> ids;
        for (const auto& [name, t] : p) ids[name] = g.input(t, true);
        PoolNodes pool;
        pool.gate_weights = ids["gate"];
        pool.n_null = 1;
        for (std::size_t e = 0; e < 4; ++e) {
            std::string q = "e" + std::to_string(e);
            pool.routed.push_back({ids[q + ".w1"], ids[q + ".b1"], ids[q + ".w2"], ids[q + ".b2"]});
        }
        pool.shared.push_back({ids["s.w1"], ids["s.b1"], ids["s.w2"], ids["s.b2"]});
        ValueId xin = g.constant(x);
        // rebuild the layer with the frozen decisions via the same dispatch
        // machinery: recompute probs, then reuse moe_forward only when the
        // selection is stable. With a step of 1e-5 the selection does not
        // change for this input, so calling moe_forward directly is safe.
        auto out = moe_forward(g, pool, xin, {0.7, false});
        for (std::size_t t = 0; t < frozen.size(); ++t)
            if (out.decisions[t].selected != frozen[t].selected)
                throw numeric_error("selection changed under perturbation");
        ValueId loss = g.add(g.mean_all(g.gelu(out.output)), g.scale_const(out.aux_loss, 0.1));
        if (grads) {
            g.backward(loss);
            for (const auto& [name, id] : ids) (*grads)[name] = g.grad(id);
        }
        return g.value(loss).data[0];
    };
    auto rep = grad_check(f, ps, {.n_samples = 80, .step = 1e-5, .seed = 4});
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("drop_null_mass renormalizes over routed members only") {
    Graph g;
    const std::size_t d = 4;
    Rng rng(87);
    PoolNodes pool = make_pool(g, d, 6, 2, 1, 0, rng);
    Tensor x = random_tensor({10, d}, rng);
    auto keep = moe_forward(g, pool, g.constant(x), {1.0, false});
    auto drop = moe_forward(g, pool, g.constant(x), {1.0, true});
    // with p=1 all experts are selected; dropping null mass scales routed
    // weights up by 1/(1-p_null)
    const Tensor& P = g.value(keep.gate_probs);
    for (std::size_t t = 0; t < 10; ++t) {
        double p_null = P.at(t, 2);
        const Tensor& yk = g.value(keep.output);
        const Tensor& yd = g.value(drop.output);
        for (std::size_t c = 0; c < d; ++c)
            CHECK(yd.at(t, c) == doctest::Approx(yk.at(t, c) / (1.0 - p_null)).epsilon(1e-9));
    }
}
