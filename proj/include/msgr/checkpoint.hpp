#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "param.hpp"

namespace msgr {

// Checkpoint layout (magic "MSGR1"): a text manifest followed by one flat
// little-endian float32 block.
//
//   MSGR1
//   meta <n>
//   <key> <value>            x n, keys sorted
//   tensors <n>
//   <name> <ndims> <d0> ...  x n, in parameter registration order
//   data <total-value-count>
//   <raw float32 block>
//
// Values are stored float32; parameters are float32-valued by construction
// (see ParamStore), so save -> load -> save is byte-identical.

struct CheckpointTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    std::string meta_at(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
        return it->second;
    }
};

inline void save_checkpoint(const std::string& path, const ParamStore& store,
                            const std::map<std::string, std::string>& meta) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint " + path);
    f << "MSGR1\n";
    f << "meta " << meta.size() << "\n";
    for (const auto& [k, v] : meta) {
        if (k.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("checkpoint: meta key with space");
        if (v.find('\n') != std::string::npos) throw std::invalid_argument("checkpoint: meta value with newline");
        f << k << " " << v << "\n";
    }
    f << "tensors " << store.size() << "\n";
    std::size_t total = 0;
    for (const auto& p : store.all()) {
        f << p.name << " " << p.value->shape.size();
        for (int d : p.value->shape) f << " " << d;
        f << "\n";
        total += p.value->numel();
    }
    f << "data " << total << "\n";
    std::vector<unsigned char> block(total * 4);
    std::size_t off = 0;
    for (const auto& p : store.all())
        for (double dv : p.value->data) {
            float fv = static_cast<float>(dv);
            std::uint32_t bits;
            std::memcpy(&bits, &fv, 4);
            block[off++] = static_cast<unsigned char>(bits & 0xff);
            block[off++] = static_cast<unsigned char>((bits >> 8) & 0xff);
            block[off++] = static_cast<unsigned char>((bits >> 16) & 0xff);
            block[off++] = static_cast<unsigned char>((bits >> 24) & 0xff);
        }
    f.write(reinterpret_cast<const char*>(block.data()), static_cast<std::streamsize>(block.size()));
    if (!f) throw std::runtime_error("short write for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read checkpoint " + path);
    auto read_line = [&]() {
        std::string line;
        if (!std::getline(f, line)) throw std::runtime_error("checkpoint truncated: " + path);
        return line;
    };
    if (read_line() != "MSGR1") throw std::runtime_error("not a checkpoint (bad magic): " + path);

    Checkpoint ck;
    std::istringstream hs(read_line());
    std::string word;
    std::size_t n = 0;
    if (!(hs >> word >> n) || word != "meta") throw std::runtime_error("checkpoint: bad meta header in " + path);
    for (std::size_t i = 0; i < n; ++i) {
        std::string line = read_line();
        auto sp = line.find(' ');
        if (sp == std::string::npos) throw std::runtime_error("checkpoint: bad meta line in " + path);
        ck.meta[line.substr(0, sp)] = line.substr(sp + 1);
    }

    std::istringstream ts(read_line());
    if (!(ts >> word >> n) || word != "tensors") throw std::runtime_error("checkpoint: bad tensor header in " + path);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::istringstream ls(read_line());
        CheckpointTensor t;
        std::size_t nd = 0;
        if (!(ls >> t.name >> nd)) throw std::runtime_error("checkpoint: bad tensor line in " + path);
        t.shape.resize(nd);
        std::size_t count = 1;
        for (auto& d : t.shape) {
            if (!(ls >> d) || d <= 0) throw std::runtime_error("checkpoint: bad tensor shape in " + path);
            count *= static_cast<std::size_t>(d);
        }
        t.values.resize(count);
        total += count;
        ck.tensors.push_back(std::move(t));
    }

    std::istringstream ds(read_line());
    std::size_t declared = 0;
    if (!(ds >> word >> declared) || word != "data") throw std::runtime_error("checkpoint: bad data header in " + path);
    if (declared != total) throw std::runtime_error("checkpoint: data count disagrees with manifest in " + path);

    std::vector<unsigned char> block(total * 4);
    f.read(reinterpret_cast<char*>(block.data()), static_cast<std::streamsize>(block.size()));
    if (static_cast<std::size_t>(f.gcount()) != block.size())
        throw std::runtime_error("checkpoint truncated: " + path);

    std::size_t off = 0;
    for (auto& t : ck.tensors)
        for (auto& v : t.values) {
            std::uint32_t bits = static_cast<std::uint32_t>(block[off]) |
                                 (static_cast<std::uint32_t>(block[off + 1]) << 8) |
                                 (static_cast<std::uint32_t>(block[off + 2]) << 16) |
                                 (static_cast<std::uint32_t>(block[off + 3]) << 24);
            off += 4;
            float fv;
            std::memcpy(&fv, &bits, 4);
            v = static_cast<double>(fv);
        }
    return ck;
}

// Copy checkpoint values into a registered store; every tensor must match by
// name and shape in both directions.
inline void apply_checkpoint(const Checkpoint& ck, ParamStore& store) {
    if (ck.tensors.size() != store.size())
        throw std::runtime_error("checkpoint: parameter count mismatch (file has " +
                                 std::to_string(ck.tensors.size()) + ", model has " +
                                 std::to_string(store.size()) + ")");
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& p = store.at(i);
        const auto& t = ck.tensors[i];
        if (t.name != p.name) throw std::runtime_error("checkpoint: parameter order mismatch at '" + t.name + "'");
        if (t.shape != p.value->shape)
            throw std::runtime_error("checkpoint: shape mismatch for '" + t.name + "'");
        p.value->data = t.values;
        p.value->zero_grad();
    }
}

} // namespace msgr
