// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dcmoe/params.hpp"
#include "dcmoe/rng.hpp"

namespace dcmoe {

/// Evaluates a scalar function of the parameters; when `grads` is non-null it
/// must be filled with the analytic gradient for every entry of `params`.
using ScalarFn = std::function<double(const ParamStore& params, ParamStore* grads)>;

struct GradCheckOptions {
    std::size_t n_samples = 64;   // coordinates sampled across all parameters
    double step = 1e-5;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

/// Central-difference check of analytic gradients at randomly sampled
/// coordinates. Relative error uses |a| + |fd| + 1e-12 in the denominator so
/// near-zero gradients do not blow up the ratio.
GradCheckReport grad_check(const ScalarFn& f, ParamStore params, const GradCheckOptions& opt);

}  // namespace dcmoe
