#pragma once

#include <array>
#include <limits>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "model_config.hpp"
#include "param.hpp"
#include "tensor.hpp"

namespace msgr {

using NodeSet = std::vector<TensorPtr>;

// Per-round gate statistics, recorded so the fixed schedule is observable:
// two intra rounds then two inter rounds, every pair visited once per round.
struct MessageTrace {
    struct Round {
        int pair_updates = 0;
        double gate_min = std::numeric_limits<double>::infinity();
        double gate_max = -std::numeric_limits<double>::infinity();
    };
    std::vector<std::array<Round, 4>> levels;
};

struct MessageResult {
    TensorPtr m_kl, m_lk;   // messages k->l and l->k
    TensorPtr n_k, n_l;     // updated nodes
    TensorPtr gate_kl, gate_lk;
};

// One gated exchange between two nodes; the same conv weights serve both
// directions. The updates use the pre-exchange values, so the result is
// symmetric under swapping the arguments.
inline MessageResult pass_message(const TensorPtr& n_k, const TensorPtr& n_l, const ConvParam& conv) {
    if (n_k->shape != n_l->shape) throw std::invalid_argument("pass_message: node shapes differ");
    MessageResult r;
    r.gate_kl = sigmoid(conv2d(sub(n_k, n_l), conv.w, conv.b, 1, 1, 1));
    r.gate_lk = sigmoid(conv2d(sub(n_l, n_k), conv.w, conv.b, 1, 1, 1));
    r.m_kl = mul(n_k, r.gate_kl);
    r.m_lk = mul(n_l, r.gate_lk);
    r.n_k = add(n_k, r.m_lk);
    r.n_l = add(n_l, r.m_kl);
    return r;
}

namespace detail {

inline void trace_gates(MessageTrace::Round* round, const MessageResult& r) {
    if (!round) return;
    round->pair_updates += 1;
    for (const TensorPtr& g : {r.gate_kl, r.gate_lk})
        for (double v : g->data) {
            round->gate_min = std::min(round->gate_min, v);
            round->gate_max = std::max(round->gate_max, v);
        }
}

} // namespace detail

struct AlignLevelParams {
    std::vector<ConvParam> embed;   // 1x1, level channels -> d, one per node branch
    std::array<ConvParam, 4> msg;   // 3x3, d -> d, one per schedule round
    ConvParam guide_ref, guide_tar; // 1x1, N*d -> d
};

// N parallel branches: adaptive-average-pool onto grid g_k, 1x1 conv to the
// node dimension, bilinear resize back to the level extent.
inline NodeSet embed_nodes(const TensorPtr& f, const AlignLevelParams& lvl) {
    int h = f->shape[1], w = f->shape[2];
    int n = static_cast<int>(lvl.embed.size());
    int largest = kPoolGrids[n - 1];
    if (h < largest || w < largest)
        throw std::invalid_argument("embed_nodes: level extent smaller than the largest pooling grid");
    NodeSet nodes;
    nodes.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        int g = kPoolGrids[k];
        TensorPtr e = conv2d(adaptive_avg_pool(f, g, g), lvl.embed[static_cast<std::size_t>(k)].w,
                             lvl.embed[static_cast<std::size_t>(k)].b);
        nodes.push_back(g == h && g == w ? e : bilinear_upsample(e, h, w));
    }
    return nodes;
}

// Two intra rounds (all unordered pairs inside each view, ref first) followed
// by two inter rounds (all N^2 cross pairs), ascending pair order, each round
// with its own conv weights. Nodes are updated in place between pairs.
inline void reason_level(NodeSet& ref, NodeSet& tar, const AlignLevelParams& lvl,
                         std::array<MessageTrace::Round, 4>* rounds = nullptr) {
    if (ref.size() != tar.size()) throw std::invalid_argument("reason_level: node counts differ");
    int n = static_cast<int>(ref.size());
    for (int r = 0; r < 4; ++r) {
        MessageTrace::Round* round = rounds ? &(*rounds)[static_cast<std::size_t>(r)] : nullptr;
        const ConvParam& conv = lvl.msg[static_cast<std::size_t>(r)];
        if (r < 2) {
            for (NodeSet* view : {&ref, &tar})
                for (int k = 0; k < n; ++k)
                    for (int l = k + 1; l < n; ++l) {
                        auto m = pass_message((*view)[static_cast<std::size_t>(k)],
                                              (*view)[static_cast<std::size_t>(l)], conv);
                        (*view)[static_cast<std::size_t>(k)] = m.n_k;
                        (*view)[static_cast<std::size_t>(l)] = m.n_l;
                        detail::trace_gates(round, m);
                    }
        } else {
            for (int k = 0; k < n; ++k)
                for (int l = 0; l < n; ++l) {
                    auto m = pass_message(ref[static_cast<std::size_t>(k)], tar[static_cast<std::size_t>(l)], conv);
                    ref[static_cast<std::size_t>(k)] = m.n_k;
                    tar[static_cast<std::size_t>(l)] = m.n_l;
                    detail::trace_gates(round, m);
                }
        }
    }
}

// Channel-concat the reasoned nodes and project back to d channels.
inline TensorPtr aggregate_guidance(const NodeSet& nodes, const ConvParam& conv) {
    return conv2d(concat_channels(nodes), conv.w, conv.b);
}

// Seed the next level's nodes with the previous guidance: a per-channel gate
// from the pooled guidance map scales each node on top of a residual pass.
inline NodeSet init_guided(const NodeSet& nodes, const TensorPtr& g_prev) {
    if (nodes.empty()) return nodes;
    if (g_prev->shape[0] != nodes[0]->shape[0])
        throw std::invalid_argument("init_guided: guidance channels do not match node channels");
    int h = nodes[0]->shape[1], w = nodes[0]->shape[2];
    TensorPtr gate = broadcast_hw(sigmoid(reshape(global_avg_pool(g_prev), {g_prev->shape[0]})), h, w);
    NodeSet out;
    out.reserve(nodes.size());
    for (const auto& n : nodes) out.push_back(add(mul(n, gate), n));
    return out;
}

struct AlignResult {
    TensorPtr offsets;             // [8] corner displacements in pixels, TL,TR,BR,BL order
    std::vector<TensorPtr> guidance; // ref,tar per level, level-major
};

class AlignModule {
public:
    AlignModule(ParamStore& ps, const ModelConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        levels_.resize(static_cast<std::size_t>(cfg.num_levels));
        for (int t = 0; t < cfg.num_levels; ++t) {
            auto& lvl = levels_[static_cast<std::size_t>(t)];
            int level_c = 2 * cfg.channels[static_cast<std::size_t>(t)];
            std::string base = "align.l" + std::to_string(t + 1);
            for (int k = 0; k < cfg.num_nodes; ++k)
                lvl.embed.push_back(add_conv(ps, base + ".embed" + std::to_string(k), cfg.node_dim, level_c, 1, 1));
            for (int r = 0; r < 4; ++r)
                lvl.msg[static_cast<std::size_t>(r)] =
                    add_conv(ps, base + ".msg" + std::to_string(r), cfg.node_dim, cfg.node_dim, 3, 3);
            lvl.guide_ref = add_conv(ps, base + ".guide.ref", cfg.node_dim, cfg.num_nodes * cfg.node_dim, 1, 1);
            lvl.guide_tar = add_conv(ps, base + ".guide.tar", cfg.node_dim, cfg.num_nodes * cfg.node_dim, 1, 1);
        }
        int head_in = 2 * cfg.num_levels * cfg.node_dim * 16;
        fc1_w_ = ps.add("align.head.fc1.w", {cfg.head_hidden, head_in}, InitSpec::he_normal(head_in));
        fc1_b_ = ps.add("align.head.fc1.b", {cfg.head_hidden}, InitSpec::zero());
        // Zero-initialized final layer: a fresh model regresses the identity.
        fc2_w_ = ps.add("align.head.fc2.w", {8, cfg.head_hidden}, InitSpec::zero());
        fc2_b_ = ps.add("align.head.fc2.b", {8}, InitSpec::zero());
    }

    // Runs the progressive schedule over the two pyramids (coarsest level
    // first) and regresses the corner offsets from the pooled guidance maps.
    AlignResult forward(const FeaturePyramid& ref, const FeaturePyramid& tar,
                        MessageTrace* trace = nullptr) const {
        if (trace) trace->levels.assign(static_cast<std::size_t>(cfg_.num_levels), {});
        AlignResult out;
        TensorPtr g_ref_prev, g_tar_prev;
        for (int t = 0; t < cfg_.num_levels; ++t) {
            const auto& lvl = levels_[static_cast<std::size_t>(t)];
            NodeSet ref_nodes = embed_nodes(ref.concat[static_cast<std::size_t>(t)], lvl);
            NodeSet tar_nodes = embed_nodes(tar.concat[static_cast<std::size_t>(t)], lvl);
            if (t > 0) {
                ref_nodes = init_guided(ref_nodes, g_ref_prev);
                tar_nodes = init_guided(tar_nodes, g_tar_prev);
            }
            reason_level(ref_nodes, tar_nodes, lvl,
                         trace ? &trace->levels[static_cast<std::size_t>(t)] : nullptr);
            g_ref_prev = aggregate_guidance(ref_nodes, lvl.guide_ref);
            g_tar_prev = aggregate_guidance(tar_nodes, lvl.guide_tar);
            out.guidance.push_back(g_ref_prev);
            out.guidance.push_back(g_tar_prev);
        }
        out.offsets = regress(out.guidance);
        return out;
    }

    // Pool each guidance map to 4x4, flatten, concatenate, and run the
    // two-layer head; raw outputs scale to pixel offsets.
    TensorPtr regress(const std::vector<TensorPtr>& guidance) const {
        if (static_cast<int>(guidance.size()) != 2 * cfg_.num_levels)
            throw std::invalid_argument("regress: expected ref+tar guidance per level");
        std::vector<TensorPtr> pooled;
        pooled.reserve(guidance.size());
        for (const auto& g : guidance)
            pooled.push_back(reshape(adaptive_avg_pool(g, 4, 4), {g->shape[0] * 16, 1, 1}));
        TensorPtr flat = reshape(concat_channels(pooled), {2 * cfg_.num_levels * cfg_.node_dim * 16});
        TensorPtr hidden = relu(linear(flat, fc1_w_, fc1_b_));
        return affine(linear(hidden, fc2_w_, fc2_b_), cfg_.offset_scale, 0.0);
    }

    const AlignLevelParams& level(int t) const { return levels_.at(static_cast<std::size_t>(t)); }
    const ModelConfig& config() const { return cfg_; }

private:
    ModelConfig cfg_;
    std::vector<AlignLevelParams> levels_;
    TensorPtr fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

} // namespace msgr
