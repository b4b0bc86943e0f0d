// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/gradcheck.hpp"

#include <cmath>

namespace dcmoe {

GradCheckReport grad_check(const ScalarFn& f, ParamStore params, const GradCheckOptions& opt) {
    ParamStore grads;
    for (const auto& [name, t] : params) grads[name] = Tensor(t.shape);
    double loss = f(params, &grads);
    if (!std::isfinite(loss)) throw numeric_error("grad_check: non-finite loss");

    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, t] : params)
        for (std::size_t i = 0; i < t.numel(); ++i) coords.emplace_back(name, i);

    Rng rng(opt.seed, /*stream=*/0x6772616463686bULL);
    GradCheckReport rep;
    std::size_t n = std::min<std::size_t>(opt.n_samples, coords.size());
    for (std::size_t s = 0; s < n; ++s) {
        const auto& [name, idx] = coords[rng.uniform_int(coords.size())];
        double saved = params[name].data[idx];
        params[name].data[idx] = saved + opt.step;
        double up = f(params, nullptr);
        params[name].data[idx] = saved - opt.step;
        double dn = f(params, nullptr);
        params[name].data[idx] = saved;
        if (!std::isfinite(up) || !std::isfinite(dn))
            throw numeric_error("grad_check: non-finite perturbed loss");
        double fd = (up - dn) / (2.0 * opt.step);
        const auto& gt = grads[name];
        double an = gt.data.empty() ? 0.0 : gt.data[idx];  // untouched grad == 0
        double rel = std::fabs(an - fd) / (std::fabs(an) + std::fabs(fd) + 1e-12);
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = name;
            rep.worst_index = idx;
        }
        ++rep.n_checked;
    }
    return rep;
}

}  // namespace dcmoe
