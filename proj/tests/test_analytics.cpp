// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "dcmoe/rng.hpp"
#include "dcmoe/telemetry.hpp"

using namespace dcmoe;

namespace {

RoutingDecision decision(std::vector<std::size_t> sel, std::vector<double> w,
                         std::size_t n_routed_active) {
    RoutingDecision d;
    d.selected = std::move(sel);
    d.mix_weights = std::move(w);
    d.n_routed_active = n_routed_active;
    return d;
}

// exhaustive minimum makespan over all ways to place 2*n_pairs experts as
// pairs onto n_pairs devices
double best_pairing(const std::vector<double>& loads, std::vector<bool>& used, double worst) {
    std::size_t first = loads.size();
    for (std::size_t i = 0; i < loads.size(); ++i)
        if (!used[i]) {
            first = i;
            break;
        }
    if (first == loads.size()) return worst;
    used[first] = true;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = first + 1; j < loads.size(); ++j) {
        if (used[j]) continue;
        used[j] = true;
        double w = std::max(worst, loads[first] + loads[j]);
        best = std::min(best, best_pairing(loads, used, w));
        used[j] = false;
    }
    used[first] = false;
    return best;
}

}  // namespace

TEST_CASE("activation histogram sums to 1 and reflects a point mass") {
    RoutingTelemetry tel(1, 5, 2);  // 4 routed + 1 null
    tel.set_n_routed(4);
    for (int i = 0; i < 7; ++i) tel.record(0, 0, decision({0, 2}, {0.6, 0.4}, 2));
    auto h = tel.total_tokens(0) ? activation_histogram(tel, 0) : std::vector<double>{};
    REQUIRE(!h.empty());
    double sum = 0.0;
    for (double v : h) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h[0] == 0.0);

    tel.record(0, 1, decision({4}, {1.0}, 0));  // null only
    auto h2 = activation_histogram(tel, 0);
    CHECK(h2[0] == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
    CHECK(h2[2] == doctest::Approx(7.0 / 8.0).epsilon(1e-12));
}

TEST_CASE("expert-domain matrix rows are domain distributions") {
    RoutingTelemetry tel(2, 3, 3);
    tel.set_n_routed(2);
    tel.record(0, 0, decision({0}, {1.0}, 1));
    tel.record(0, 0, decision({0}, {1.0}, 1));
    tel.record(0, 1, decision({0, 1}, {0.5, 0.5}, 2));
    tel.record(1, 2, decision({1}, {1.0}, 1));
    auto m = expert_domain_matrix(tel);
    REQUIRE(m.size() == 2 * 3);
    CHECK(m[0][0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(m[0][1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(m[0][2] == 0.0);
    CHECK(m[1][1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m[3 + 1][2] == doctest::Approx(1.0).epsilon(1e-12));
    for (const auto& row : m) {
        double sum = 0.0;
        for (double v : row) sum += v;
        CHECK((sum == doctest::Approx(1.0).epsilon(1e-12) || sum == 0.0));
    }
}

TEST_CASE("null-skip profile hits the 0 and 1 extremes") {
    RoutingTelemetry tel(1, 3, 2);  // 2 routed + 1 null (index 2)
    tel.set_n_routed(2);
    for (int i = 0; i < 5; ++i) tel.record(0, 0, decision({0, 1}, {0.5, 0.5}, 2));
    for (int i = 0; i < 4; ++i) tel.record(0, 1, decision({2}, {1.0}, 0));
    auto prof = null_skip_profile(tel);
    REQUIRE(prof.size() == 1);
    CHECK(prof[0][0] == 0.0);
    CHECK(prof[0][1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("dispatch planner respects slots and stays near the exhaustive optimum") {
    std::vector<double> loads{0.30, 0.22, 0.15, 0.11, 0.09, 0.07, 0.04, 0.02};
    DispatchPlan plan = plan_dispatch(loads, 4);
    CHECK(plan.n_devices == 4);
    REQUIRE(plan.expert_device.size() == 8);
    std::vector<std::size_t> per_device(4, 0);
    for (std::size_t dev : plan.expert_device) {
        REQUIRE(dev < 4);
        ++per_device[dev];
    }
    for (std::size_t c : per_device) CHECK(c == 2);  // 8 experts / 4 devices

    double mx = 0.0, sum = 0.0;
    for (std::size_t d = 0; d < 4; ++d) {
        double load = 0.0;
        for (std::size_t e = 0; e < 8; ++e)
            if (plan.expert_device[e] == d) load += loads[e];
        CHECK(plan.device_load[d] == doctest::Approx(load).epsilon(1e-12));
        mx = std::max(mx, load);
        sum += load;
    }
    CHECK(plan.imbalance_ratio == doctest::Approx(mx / (sum / 4.0)).epsilon(1e-12));

    std::vector<bool> used(8, false);
    double opt = best_pairing(loads, used, 0.0);  // checks all 105 pairings
    CHECK(mx >= opt - 1e-12);
    CHECK(mx <= (4.0 / 3.0) * opt + 1e-12);

    CHECK(plan.cross_device_fraction >= 0.0);
    CHECK(plan.cross_device_fraction <= 1.0);
}

TEST_CASE("dispatch planner on a uniform load is perfectly balanced") {
    DispatchPlan plan = plan_dispatch(std::vector<double>(8, 0.125), 4);
    CHECK(plan.imbalance_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(plan_dispatch(std::vector<double>(7, 0.1), 4), std::invalid_argument);
}

TEST_CASE("merge is order independent and matches the pooled stream") {
    Rng rng(61);
    auto random_fill = [&rng](RoutingTelemetry& tel, int n) {
        for (int i = 0; i < n; ++i) {
            std::size_t layer = rng.uniform_int(2);
            std::size_t domain = rng.uniform_int(3);
            std::size_t a = rng.uniform_int(4), b = rng.uniform_int(4);
            if (a == b)
                tel.record(layer, domain, decision({a}, {1.0}, 1));
            else
                tel.record(layer, domain, decision({a, b}, {0.7, 0.3}, 2));
        }
    };
    RoutingTelemetry t1(2, 5, 3), t2(2, 5, 3), ab(2, 5, 3), ba(2, 5, 3);
    for (auto* t : {&t1, &t2, &ab, &ba}) t->set_n_routed(4);
    random_fill(t1, 40);
    random_fill(t2, 25);
    ab.merge(t1);
    ab.merge(t2);
    ba.merge(t2);
    ba.merge(t1);
    CHECK(telemetry_to_json(ab) == telemetry_to_json(ba));
    CHECK(ab.total_tokens(0) + ab.total_tokens(1) == 65);
}

TEST_CASE("telemetry JSON round-trip and export idempotence") {
    RoutingTelemetry tel(2, 4, 2);
    tel.set_n_routed(3);
    tel.record(0, 0, decision({0, 1}, {0.8, 0.2}, 2));
    tel.record(0, 1, decision({3}, {1.0}, 0));
    tel.record(1, 1, decision({2}, {1.0}, 1));
    std::string j1 = telemetry_to_json(tel);
    RoutingTelemetry back = telemetry_from_json(j1);
    CHECK(telemetry_to_json(back) == j1);
    CHECK(back.selection_count(0, 0, 0) == 1);
    CHECK(back.weight_sum(0, 0, 0) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(back.tokens(1, 1) == 1);

    std::vector<std::string> names{"A", "B"};
    CHECK(histogram_csv(tel) == histogram_csv(back));
    CHECK(expert_domain_csv(tel, names) == expert_domain_csv(back, names));
    CHECK(null_skip_csv(tel, names) == null_skip_csv(back, names));

    // csv shape: header + one line per layer
    std::istringstream is(null_skip_csv(tel, names));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 1 + 2);
}
