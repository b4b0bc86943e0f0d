// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dcmoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'C', 'M', '1'};
constexpr std::uint32_t kDtypeF64 = 0;

template <typename T>
void write_int(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_int(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_int<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    auto len = read_int<std::uint32_t>(is);
    std::string s(len, '\0');
    is.read(s.data(), len);
    if (!is) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    os.write(kMagic, 4);
    write_int<std::uint32_t>(os, Checkpoint::kVersion);
    // nlohmann objects keep keys sorted, so dump() is canonical
    nlohmann::json head{{"config", c.config}, {"metadata", c.metadata}};
    write_string(os, head.dump());
    write_int<std::uint64_t>(os, c.params.size());
    std::uint64_t offset = 0;
    for (const auto& [name, t] : c.params) {
        write_string(os, name);
        write_int<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) write_int<std::uint64_t>(os, d);
        write_int<std::uint32_t>(os, kDtypeF64);
        write_int<std::uint64_t>(os, offset);
        offset += t.numel() * sizeof(double);
    }
    for (const auto& [name, t] : c.params)
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    auto version = read_int<std::uint32_t>(is);
    if (version != Checkpoint::kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint c;
    auto head = nlohmann::json::parse(read_string(is));
    c.config = head.at("config");
    c.metadata = head.at("metadata");
    auto count = read_int<std::uint64_t>(is);
    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> dir;
    dir.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        e.name = read_string(is);
        auto ndim = read_int<std::uint32_t>(is);
        for (std::uint32_t j = 0; j < ndim; ++j)
            e.shape.push_back(static_cast<std::size_t>(read_int<std::uint64_t>(is)));
        auto dtype = read_int<std::uint32_t>(is);
        if (dtype != kDtypeF64)
            throw std::runtime_error("checkpoint: unsupported dtype " + std::to_string(dtype));
        e.offset = read_int<std::uint64_t>(is);
        dir.push_back(std::move(e));
    }
    std::streampos payload_start = is.tellg();
    for (const auto& e : dir) {
        Tensor t(e.shape);
        is.seekg(payload_start + static_cast<std::streamoff>(e.offset));
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
        if (!is) throw std::runtime_error("checkpoint: truncated payload for " + e.name);
        c.params.emplace(e.name, std::move(t));
    }
    return c;
}

}  // namespace dcmoe
