// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>

#include "dcmoe/tensor.hpp"

namespace dcmoe {

/// Named parameters. std::map keeps iteration order canonical, which both the
/// checkpoint codec and deterministic training rely on.
using ParamStore = std::map<std::string, Tensor>;

inline std::size_t total_numel(const ParamStore& ps) {
    std::size_t n = 0;
    for (const auto& [name, t] : ps) n += t.numel();
    return n;
}

}  // namespace dcmoe
