#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "model_config.hpp"
#include "param.hpp"
#include "tensor.hpp"

namespace msgr {

struct ConvParam {
    TensorPtr w, b;
};

// Register a conv weight [out_c,in_c,kh,kw] (He-normal over fan-in) plus a
// zero bias under `name`.w / `name`.b.
inline ConvParam add_conv(ParamStore& ps, const std::string& name, int out_c, int in_c, int kh, int kw,
                          bool zero_weight = false) {
    ConvParam p;
    p.w = ps.add(name + ".w", {out_c, in_c, kh, kw},
                 zero_weight ? InitSpec::zero() : InitSpec::he_normal(in_c * kh * kw));
    p.b = ps.add(name + ".b", {out_c}, InitSpec::zero());
    return p;
}

// Four-level feature pyramid per view. Each modality runs through its own
// weight set; per level the two modality maps are concatenated. Level index 0
// is the coarsest (1/8 resolution), level 3 runs at full resolution.
struct FeaturePyramid {
    std::array<TensorPtr, 4> ir;     // per-modality level features, coarsest first
    std::array<TensorPtr, 4> vis;
    std::array<TensorPtr, 4> concat; // channel-concat of the two modalities
};

class Encoder {
public:
    Encoder(ParamStore& ps, const ModelConfig& cfg) : channels_(cfg.channels) {
        for (int m = 0; m < 2; ++m) {
            std::string mod = m == 0 ? "ir" : "vis";
            // Registration follows computation order: finest level first.
            for (int lvl = 3; lvl >= 0; --lvl) {
                int in_c = lvl == 3 ? 1 : channels_[static_cast<std::size_t>(lvl) + 1];
                int out_c = channels_[static_cast<std::size_t>(lvl)];
                std::string base = "enc." + mod + ".l" + std::to_string(lvl + 1);
                branch_[m][static_cast<std::size_t>(lvl)] = {
                    add_conv(ps, base + ".c1", out_c, in_c, 3, 3),
                    add_conv(ps, base + ".c2", out_c, out_c, 3, 3)};
            }
        }
    }

    // ir/vis: [1,H,W] images in [0,1], H and W divisible by 8.
    FeaturePyramid forward(const TensorPtr& ir, const TensorPtr& vis) const {
        FeaturePyramid p;
        p.ir = branch_forward(0, ir);
        p.vis = branch_forward(1, vis);
        for (int i = 0; i < 4; ++i)
            p.concat[static_cast<std::size_t>(i)] =
                concat_channels({p.ir[static_cast<std::size_t>(i)], p.vis[static_cast<std::size_t>(i)]});
        return p;
    }

    const std::vector<int>& channels() const { return channels_; }

private:
    struct LevelParams {
        ConvParam c1, c2;
    };

    std::array<TensorPtr, 4> branch_forward(int m, const TensorPtr& img) const {
        if (img->shape.size() != 3 || img->shape[0] != 1)
            throw std::invalid_argument("encoder: input must be a [1,H,W] image");
        if (img->shape[1] % 8 != 0 || img->shape[2] % 8 != 0)
            throw std::invalid_argument("encoder: extent must be divisible by 8 (pad upstream)");
        std::array<TensorPtr, 4> out;
        TensorPtr x = img;
        for (int lvl = 3; lvl >= 0; --lvl) {
            const auto& lp = branch_[m][static_cast<std::size_t>(lvl)];
            TensorPtr y = relu(conv2d(x, lp.c1.w, lp.c1.b, 1, 1, 1));
            y = relu(conv2d(y, lp.c2.w, lp.c2.b, 1, 1, 1));
            out[static_cast<std::size_t>(lvl)] = y;
            if (lvl > 0) x = avg_pool(y, 2);
        }
        return out;
    }

    std::vector<int> channels_;
    std::array<std::array<LevelParams, 4>, 2> branch_; // [modality][level]
};

// Fixed random-weight feature stack standing in for a pretrained extractor in
// the feature-consistency loss. Weights are regenerated from the seed at
// construction, never stored in checkpoints, and never receive gradients.
class PerceptualExtractor {
public:
    static constexpr int kChannels[3] = {8, 8, 8};

    explicit PerceptualExtractor(std::uint64_t seed = 20177) : seed_(seed) {
        std::mt19937_64 rng(seed);
        int in_c = 1;
        for (int i = 0; i < 3; ++i) {
            int out_c = kChannels[i];
            w_[static_cast<std::size_t>(i)] = Tensor::create({out_c, in_c, 3, 3}, false);
            std::normal_distribution<double> d(0.0, std::sqrt(2.0 / (in_c * 9)));
            for (auto& v : w_[static_cast<std::size_t>(i)]->data) v = d(rng);
            b_[static_cast<std::size_t>(i)] = Tensor::create({out_c}, false);
            in_c = out_c;
        }
    }

    TensorPtr forward(const TensorPtr& x) const {
        TensorPtr y = x;
        for (int i = 0; i < 3; ++i)
            y = relu(conv2d(y, w_[static_cast<std::size_t>(i)], b_[static_cast<std::size_t>(i)], 1, 1, 1));
        return y;
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::array<TensorPtr, 3> w_, b_;
};

} // namespace msgr
