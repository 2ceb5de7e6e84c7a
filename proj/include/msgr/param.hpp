#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace msgr {

// All learnable state lives in float32 even though arithmetic runs in double:
// values are snapped to the nearest float after initialization and after every
// optimizer step, so a checkpoint written as float32 restores bitwise.
inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct InitSpec {
    enum class Kind { Zero, Uniform, HeNormal } kind = Kind::Zero;
    double lo = 0.0, hi = 0.0; // Uniform bounds
    int fan_in = 0;            // HeNormal fan-in

    static InitSpec zero() { return {}; }
    static InitSpec uniform(double lo, double hi) { return {Kind::Uniform, lo, hi, 0}; }
    static InitSpec he_normal(int fan_in) { return {Kind::HeNormal, 0.0, 0.0, fan_in}; }
};

struct Parameter {
    std::string name;
    TensorPtr value;
    InitSpec init;
};

// Ordered, name-addressable collection of learnable tensors. Registration
// order defines both the initialization draw order and the checkpoint layout,
// so construction order must be deterministic.
class ParamStore {
public:
    TensorPtr add(const std::string& name, std::vector<int> shape, InitSpec init) {
        if (index_.count(name)) throw std::invalid_argument("param: duplicate name '" + name + "'");
        auto t = Tensor::create(std::move(shape), true);
        index_[name] = params_.size();
        params_.push_back({name, t, init});
        return t;
    }

    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& p : params_) {
            switch (p.init.kind) {
                case InitSpec::Kind::Zero:
                    std::fill(p.value->data.begin(), p.value->data.end(), 0.0);
                    break;
                case InitSpec::Kind::Uniform: {
                    std::uniform_real_distribution<double> d(p.init.lo, p.init.hi);
                    for (auto& v : p.value->data) v = quantize_f32(d(rng));
                    break;
                }
                case InitSpec::Kind::HeNormal: {
                    if (p.init.fan_in <= 0) throw std::logic_error("param: he_normal needs fan-in");
                    std::normal_distribution<double> d(0.0, std::sqrt(2.0 / p.init.fan_in));
                    for (auto& v : p.value->data) v = quantize_f32(d(rng));
                    break;
                }
            }
            p.value->zero_grad();
        }
    }

    void zero_grads() {
        for (auto& p : params_) p.value->zero_grad();
    }

    std::size_t size() const { return params_.size(); }
    std::size_t total_values() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value->numel();
        return n;
    }

    Parameter& at(std::size_t i) { return params_.at(i); }
    const Parameter& at(std::size_t i) const { return params_.at(i); }

    const Parameter* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

} // namespace msgr
