// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/data.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dcmoe {

void DomainSpec::validate() const {
    if (transition.size() != n_channels || start.size() != n_channels)
        throw std::invalid_argument("domain spec: channel count mismatch");
    for (const auto& T : transition) {
        if (T.shape != std::vector<std::size_t>{vocab, vocab})
            throw dimension_error("domain spec: bad transition shape");
        for (std::size_t r = 0; r < vocab; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < vocab; ++c) {
                double v = T.at(r, c);
                if (v < 0.0) throw std::invalid_argument("domain spec: negative transition prob");
                s += v;
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw std::invalid_argument("domain spec: degenerate transition row");
        }
    }
}

std::vector<DomainSpec> default_domains(std::size_t vocab, std::size_t n_channels,
                                        std::size_t seq_len) {
    // Domain k: with prob 0.85 apply shift s_k within its band, otherwise a
    // uniform draw from the band. Bands overlap but centers differ.
    const std::size_t shifts[4] = {1, 3, 5, 7};
    const char* names[4] = {"A", "B", "C", "D"};
    std::vector<DomainSpec> out;
    for (std::size_t k = 0; k < 4; ++k) {
        DomainSpec spec;
        spec.id = k;
        spec.name = names[k];
        spec.vocab = vocab;
        spec.n_channels = n_channels;
        spec.seq_len = seq_len;
        const std::size_t band_lo = (k * vocab) / 4;
        const std::size_t band_w = vocab / 2;
        for (std::size_t c = 0; c < n_channels; ++c) {
            Tensor T({vocab, vocab});
            const std::size_t shift = shifts[k] + 2 * c;
            for (std::size_t r = 0; r < vocab; ++r) {
                // deterministic component stays inside the band
                std::size_t rel = (r >= band_lo ? r - band_lo : r + vocab - band_lo) % band_w;
                std::size_t nxt = (band_lo + (rel + shift) % band_w) % vocab;
                for (std::size_t j = 0; j < band_w; ++j)
                    T.at(r, (band_lo + j) % vocab) = 0.15 / static_cast<double>(band_w);
                T.at(r, nxt) += 0.85;
            }
            spec.transition.push_back(std::move(T));
            std::vector<double> s(vocab, 0.0);
            for (std::size_t j = 0; j < band_w; ++j)
                s[(band_lo + j) % vocab] = 1.0 / static_cast<double>(band_w);
            spec.start.push_back(std::move(s));
        }
        spec.validate();
        out.push_back(std::move(spec));
    }
    return out;
}

namespace {

std::size_t sample_categorical(const double* probs, std::size_t n, Rng& rng) {
    double u = rng.uniform();
    double cum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cum += probs[i];
        if (u < cum) return i;
    }
    return n - 1;  // fp slack
}

}  // namespace

Dataset generate_domain(const DomainSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    Dataset ds;
    ds.domain = spec.id;
    ds.n_seqs = n;
    ds.seq = spec.seq_len;
    ds.channels = spec.n_channels;
    ds.tokens.resize(n * spec.seq_len * spec.n_channels);
    Rng base(seed, 0x646174ULL + spec.id);
    for (std::size_t s = 0; s < n; ++s) {
        Rng rng = base.split(s);
        for (std::size_t c = 0; c < spec.n_channels; ++c) {
            std::size_t cur = sample_categorical(spec.start[c].data(), spec.vocab, rng);
            ds.tokens[(s * ds.seq + 0) * ds.channels + c] = cur;
            for (std::size_t t = 1; t < ds.seq; ++t) {
                cur = sample_categorical(&spec.transition[c].data[cur * spec.vocab], spec.vocab, rng);
                ds.tokens[(s * ds.seq + t) * ds.channels + c] = cur;
            }
        }
    }
    return ds;
}

Batch Dataset::batch_of(const std::vector<std::size_t>& seq_indices) const {
    Batch b;
    b.batch = seq_indices.size();
    b.seq = seq;
    b.channels = channels;
    b.tokens.reserve(b.batch * seq * channels);
    for (std::size_t i : seq_indices) {
        if (i >= n_seqs) throw std::out_of_range("batch_of: sequence index out of range");
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t c = 0; c < channels; ++c)
                b.tokens.push_back(tokens[(i * seq + t) * channels + c]);
        b.domains.push_back(domain);
    }
    return b;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
    const char magic[4] = {'D', 'C', 'D', '1'};
    os.write(magic, 4);
    nlohmann::json head{{"domain", ds.domain},
                        {"n_seqs", ds.n_seqs},
                        {"seq", ds.seq},
                        {"channels", ds.channels}};
    std::string h = head.dump();
    std::uint32_t len = static_cast<std::uint32_t>(h.size());
    os.write(reinterpret_cast<const char*>(&len), 4);
    os.write(h.data(), len);
    for (std::size_t v : ds.tokens) {
        std::uint16_t tok = static_cast<std::uint16_t>(v);
        os.write(reinterpret_cast<const char*>(&tok), 2);
    }
    if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DCD1", 4) != 0)
        throw std::runtime_error("dataset: bad magic in " + path);
    std::uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 4);
    std::string h(len, '\0');
    is.read(h.data(), len);
    auto head = nlohmann::json::parse(h);
    Dataset ds;
    ds.domain = head.at("domain");
    ds.n_seqs = head.at("n_seqs");
    ds.seq = head.at("seq");
    ds.channels = head.at("channels");
    ds.tokens.resize(ds.n_seqs * ds.seq * ds.channels);
    for (std::size_t i = 0; i < ds.tokens.size(); ++i) {
        std::uint16_t tok = 0;
        is.read(reinterpret_cast<char*>(&tok), 2);
        ds.tokens[i] = tok;
    }
    if (!is) throw std::runtime_error("dataset: truncated " + path);
    return ds;
}

nlohmann::json DatasetManifest::to_json() const {
    return {{"raw_counts", raw_counts},
            {"balanced_per_domain", balanced_per_domain},
            {"eval_per_domain", eval_per_domain},
            {"warmup_fraction", warmup_fraction},
            {"seed", seed},
            {"vocab", vocab},
            {"n_channels", n_channels},
            {"seq_len", seq_len}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.raw_counts = j.at("raw_counts").get<std::vector<std::size_t>>();
    m.balanced_per_domain = j.at("balanced_per_domain");
    m.eval_per_domain = j.at("eval_per_domain");
    m.warmup_fraction = j.at("warmup_fraction");
    m.seed = j.at("seed");
    m.vocab = j.at("vocab");
    m.n_channels = j.at("n_channels");
    m.seq_len = j.at("seq_len");
    return m;
}

DataBundle build_bundle(const DatasetManifest& manifest) {
    if (manifest.raw_counts.size() != 4)
        throw std::invalid_argument("manifest: expected 4 raw pool counts");
    DataBundle b;
    b.specs = default_domains(manifest.vocab, manifest.n_channels, manifest.seq_len);
    for (std::size_t k = 0; k < 4; ++k) {
        const auto& spec = b.specs[k];
        b.raw.push_back(generate_domain(spec, manifest.raw_counts[k], manifest.seed * 4 + 0));
        Dataset bal = generate_domain(spec, manifest.balanced_per_domain, manifest.seed * 4 + 1);
        // warmup: leading slice of the balanced subset; joint uses the full set
        std::size_t n_warm =
            static_cast<std::size_t>(manifest.warmup_fraction *
                                     static_cast<double>(manifest.balanced_per_domain));
        Dataset warm = bal;
        warm.n_seqs = n_warm;
        warm.tokens.resize(n_warm * warm.seq * warm.channels);
        b.balanced.push_back(std::move(bal));
        b.warmup.push_back(std::move(warm));
        b.eval.push_back(generate_domain(spec, manifest.eval_per_domain, manifest.seed * 4 + 2));
    }
    return b;
}

}  // namespace dcmoe
