// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dcmoe/model.hpp"
#include "dcmoe/rng.hpp"

namespace dcmoe {

/// First-order Markov source for one synthetic domain. Each channel has its
/// own transition matrix over the shared vocab; domains are built to be
/// pairwise well separated (distinct dominant shifts and vocab bands).
struct DomainSpec {
    std::size_t id = 0;
    std::string name;
    std::size_t vocab = 64;
    std::size_t n_channels = 2;
    std::size_t seq_len = 64;
    /// transition[c] is [vocab x vocab], rows are probability distributions
    std::vector<Tensor> transition;
    /// start-token distribution per channel
    std::vector<std::vector<double>> start;

    void validate() const;
};

/// The four stand-in domains A..D with dominant-shift structure over
/// overlapping vocab bands; total-variation distance between any two domains'
/// rows is >= 0.2 by construction.
std::vector<DomainSpec> default_domains(std::size_t vocab, std::size_t n_channels,
                                        std::size_t seq_len);

struct Dataset {
    std::size_t domain = 0;
    std::size_t n_seqs = 0, seq = 0, channels = 0;
    std::vector<std::size_t> tokens;  // [seq_idx][pos][channel]

    Batch batch_of(const std::vector<std::size_t>& seq_indices) const;
};

/// Markov sampling; reproducible from (spec, seed) alone.
Dataset generate_domain(const DomainSpec& spec, std::size_t n, std::uint64_t seed);

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Raw-pool and balanced-subset sizes with a deliberately skewed raw mix
/// (A~40%, D~5% of raw sequences).
struct DatasetManifest {
    std::vector<std::size_t> raw_counts{8000, 6000, 5000, 1000};
    std::size_t balanced_per_domain = 500;
    std::size_t eval_per_domain = 64;
    double warmup_fraction = 0.4;  // share of the balanced subset used in warmup
    std::uint64_t seed = 1;
    std::size_t vocab = 64, n_channels = 2, seq_len = 64;

    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

/// All materialized splits for one manifest.
struct DataBundle {
    std::vector<DomainSpec> specs;
    std::vector<Dataset> raw;        // per domain
    std::vector<Dataset> balanced;   // per domain
    std::vector<Dataset> warmup;     // disjoint subset of balanced, per domain
    std::vector<Dataset> eval;       // held out, per domain
};

DataBundle build_bundle(const DatasetManifest& manifest);

}  // namespace dcmoe
