#pragma once

// Finite-difference verification of every learnable block at toy shapes,
// shared by the command-line entry point and the acceptance checks.
//
// Each module builds a small deterministic instance, runs grad_check over its
// parameters (and usually its inputs), and reports one row per parameter
// group. Constructions avoid the kinks of piecewise-smooth ops by design:
// absolute-difference losses use value ranges separated by more than the
// probe step, and sampling grids are screened so no coordinate sits within
// 2e-3 of a bilinear cell boundary.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "align.hpp"
#include "encoder.hpp"
#include "gradcheck.hpp"
#include "losses.hpp"
#include "model_config.hpp"
#include "recon.hpp"
#include "synth.hpp"

namespace msgr {

struct GradRow {
    std::string group;
    GradCheckResult result;
};

namespace detail {

inline TensorPtr rand_tensor(const std::vector<int>& shape, std::mt19937_64& rng, double lo, double hi,
                             bool grad) {
    auto t = Tensor::create(shape, grad);
    for (auto& v : t->data) v = uniform_real(rng, lo, hi);
    return t;
}

// Scalar probe: mean of the elementwise product with a fixed random map, so
// every output element contributes a distinct weight to the gradient.
inline TensorPtr probe(const TensorPtr& x, std::mt19937_64& rng) {
    return mean(mul(x, rand_tensor(x->shape, rng, -1.0, 1.0, false)));
}

inline std::vector<std::pair<std::string, TensorPtr>> store_tensors(ParamStore& ps) {
    std::vector<std::pair<std::string, TensorPtr>> out;
    for (auto& p : ps.all()) out.emplace_back(p.name, p.value);
    return out;
}

} // namespace detail

inline const std::vector<std::string>& gradcheck_module_names() {
    static const std::vector<std::string> names = {"encoder", "embed", "message", "reason", "head", "align",
                                                   "sgr",     "dcm",   "cgr",     "fuse",   "decoder", "losses"};
    return names;
}

namespace gradsuite {

inline std::vector<GradRow> encoder_rows(std::uint64_t seed) {
    ParamStore ps;
    ModelConfig cfg;
    cfg.channels = {5, 4, 3, 2};
    Encoder enc(ps, cfg);
    ps.initialize(seed);
    // With the production zero bias init, a 3x3 patch clamped to zero by one
    // rectifier puts the next pre-activation exactly on its kink, where the
    // two-sided difference measures the average of the one-sided slopes
    // rather than the subgradient. Evaluate at biases bounded away from zero
    // so every comparison point is differentiable.
    std::mt19937_64 brng(seed ^ 0x55AA);
    for (auto& p : ps.all())
        if (p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".b") == 0)
            for (auto& v : p.value->data)
                v = (detail::uniform_int(brng, 0, 1) ? 1.0 : -1.0) * detail::uniform_real(brng, 0.1, 0.3);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto ir = detail::rand_tensor({1, 16, 16}, rng, 0.0, 1.0, true);
    auto vis = detail::rand_tensor({1, 16, 16}, rng, 0.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("input.ir", ir);
    checked.emplace_back("input.vis", vis);
    auto f = [&]() {
        auto fp = enc.forward(ir, vis);
        TensorPtr acc;
        std::mt19937_64 prng(seed ^ 0x77);
        for (const auto& level : fp.concat) {
            auto p = detail::probe(level, prng);
            acc = acc ? add(acc, p) : p;
        }
        return acc;
    };
    return {{"encoder", grad_check_tensors(f, checked, 1e-5, 2)}};
}

inline std::vector<GradRow> embed_rows(std::uint64_t seed) {
    ParamStore ps;
    AlignLevelParams lvl;
    for (int k = 0; k < 3; ++k) lvl.embed.push_back(add_conv(ps, "embed" + std::to_string(k), 3, 4, 1, 1));
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto x = detail::rand_tensor({4, 8, 8}, rng, -1.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("input", x);
    auto f = [&]() {
        auto nodes = embed_nodes(x, lvl);
        TensorPtr acc;
        std::mt19937_64 prng(seed ^ 0x78);
        for (const auto& n : nodes) {
            auto p = detail::probe(n, prng);
            acc = acc ? add(acc, p) : p;
        }
        return acc;
    };
    return {{"embed", grad_check_tensors(f, checked)}};
}

inline std::vector<GradRow> message_rows(std::uint64_t seed) {
    ParamStore ps;
    auto conv = add_conv(ps, "msg", 3, 3, 3, 3);
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto a = detail::rand_tensor({3, 5, 5}, rng, -1.0, 1.0, true);
    auto b = detail::rand_tensor({3, 5, 5}, rng, -1.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("node.k", a);
    checked.emplace_back("node.l", b);
    auto f = [&]() {
        auto r = pass_message(a, b, conv);
        std::mt19937_64 prng(seed ^ 0x79);
        return add(detail::probe(r.n_k, prng), detail::probe(r.n_l, prng));
    };
    return {{"message", grad_check_tensors(f, checked)}};
}

inline std::vector<GradRow> reason_rows(std::uint64_t seed) {
    ParamStore ps;
    AlignLevelParams lvl;
    for (int r = 0; r < 4; ++r)
        lvl.msg[static_cast<std::size_t>(r)] = add_conv(ps, "msg" + std::to_string(r), 3, 3, 3, 3);
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    std::vector<TensorPtr> inputs;
    for (int i = 0; i < 4; ++i) inputs.push_back(detail::rand_tensor({3, 6, 6}, rng, -1.0, 1.0, true));
    auto checked = detail::store_tensors(ps);
    for (std::size_t i = 0; i < inputs.size(); ++i)
        checked.emplace_back("node" + std::to_string(i), inputs[i]);
    auto f = [&]() {
        NodeSet ref = {inputs[0], inputs[1]}, tar = {inputs[2], inputs[3]};
        reason_level(ref, tar, lvl, nullptr);
        TensorPtr acc;
        std::mt19937_64 prng(seed ^ 0x7A);
        for (const auto& n : {ref[0], ref[1], tar[0], tar[1]}) {
            auto p = detail::probe(n, prng);
            acc = acc ? add(acc, p) : p;
        }
        return acc;
    };
    return {{"reason", grad_check_tensors(f, checked, 1e-5, 2)}};
}

namespace detail2 {

inline ModelConfig tiny_align_config() {
    ModelConfig cfg;
    cfg.channels = {2, 2, 2, 2};
    cfg.num_nodes = 2;
    cfg.num_levels = 2;
    cfg.node_dim = 3;
    cfg.head_hidden = 5;
    cfg.offset_scale = 2.0;
    return cfg;
}

// The regression head initializes its last layer to zero so a fresh model is
// the identity; for gradient checking that layer gets small nonzero weights,
// otherwise everything upstream of it would receive exactly zero gradient.
inline void unfreeze_head(ParamStore& ps, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0xFEED);
    for (const char* name : {"align.head.fc2.w", "align.head.fc2.b"}) {
        const Parameter* p = ps.find(name);
        for (auto& v : p->value->data) v = quantize_f32(msgr::detail::uniform_real(rng, -0.2, 0.2));
    }
}

} // namespace detail2

inline std::vector<GradRow> head_rows(std::uint64_t seed) {
    ParamStore ps;
    auto cfg = detail2::tiny_align_config();
    AlignModule align(ps, cfg);
    ps.initialize(seed);
    detail2::unfreeze_head(ps, seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    std::vector<TensorPtr> guidance;
    for (int i = 0; i < 4; ++i) guidance.push_back(detail::rand_tensor({3, 7, 5}, rng, -1.0, 1.0, true));
    std::vector<std::pair<std::string, TensorPtr>> checked;
    for (auto& p : ps.all())
        if (p.name.rfind("align.head.", 0) == 0) checked.emplace_back(p.name, p.value);
    for (std::size_t i = 0; i < guidance.size(); ++i)
        checked.emplace_back("guidance" + std::to_string(i), guidance[i]);
    auto f = [&]() {
        std::mt19937_64 prng(seed ^ 0x7B);
        return detail::probe(align.regress(guidance), prng);
    };
    return {{"head", grad_check_tensors(f, checked)}};
}

inline std::vector<GradRow> align_rows(std::uint64_t seed) {
    ParamStore ps;
    auto cfg = detail2::tiny_align_config();
    AlignModule align(ps, cfg);
    ps.initialize(seed);
    detail2::unfreeze_head(ps, seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    FeaturePyramid ref, tar;
    std::vector<TensorPtr> inputs;
    for (int t = 0; t < cfg.num_levels; ++t) {
        int ext = t == 0 ? 4 : 8;
        ref.concat[static_cast<std::size_t>(t)] = detail::rand_tensor({4, ext, ext}, rng, -1.0, 1.0, true);
        tar.concat[static_cast<std::size_t>(t)] = detail::rand_tensor({4, ext, ext}, rng, -1.0, 1.0, true);
        inputs.push_back(ref.concat[static_cast<std::size_t>(t)]);
        inputs.push_back(tar.concat[static_cast<std::size_t>(t)]);
    }
    auto checked = detail::store_tensors(ps);
    for (std::size_t i = 0; i < inputs.size(); ++i)
        checked.emplace_back("input" + std::to_string(i), inputs[i]);
    auto f = [&]() {
        auto out = align.forward(ref, tar);
        std::mt19937_64 prng(seed ^ 0x7C);
        return detail::probe(out.offsets, prng);
    };
    return {{"align", grad_check_tensors(f, checked, 1e-5, 3)}};
}

inline std::vector<GradRow> sgr_rows(std::uint64_t seed) {
    std::vector<GradRow> rows;
    for (int variant = 0; variant < 2; ++variant) {
        ParamStore ps;
        SGRParams p;
        p.q = add_conv(ps, "q", 2, 4, 1, 1);
        p.k = add_conv(ps, "k", 2, 4, 1, 1);
        p.v = add_conv(ps, "v", 2, 4, 1, 1);
        p.o = add_conv(ps, "o", 4, 2, 1, 1);
        ps.initialize(seed);
        std::mt19937_64 rng(seed ^ 0xABCD);
        auto x = detail::rand_tensor({4, 5, 5}, rng, -1.0, 1.0, true);
        auto checked = detail::store_tensors(ps);
        checked.emplace_back("input", x);
        int key_side = variant == 0 ? 16 : 3; // dense, then pooled keys
        auto f = [&]() {
            std::mt19937_64 prng(seed ^ 0x7D);
            return detail::probe(sgr_forward(x, p, key_side), prng);
        };
        rows.push_back({variant == 0 ? "sgr.dense" : "sgr.pooled", grad_check_tensors(f, checked)});
    }
    return rows;
}

inline std::vector<GradRow> dcm_rows(std::uint64_t seed) {
    ParamStore ps;
    DCMParams p;
    p.a1 = add_conv(ps, "a1", 3, 3, 3, 3);
    p.a2 = add_conv(ps, "a2", 3, 3, 3, 3);
    p.b1 = add_conv(ps, "b1", 3, 3, 3, 3);
    p.b2 = add_conv(ps, "b2", 3, 3, 3, 3);
    p.fuse = add_conv(ps, "fuse", 3, 15, 1, 1);
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto x = detail::rand_tensor({3, 6, 6}, rng, -1.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("input", x);
    auto f = [&]() {
        std::mt19937_64 prng(seed ^ 0x7E);
        return detail::probe(dcm_forward(x, p), prng);
    };
    return {{"dcm", grad_check_tensors(f, checked, 1e-5, 2)}};
}

inline std::vector<GradRow> cgr_rows(std::uint64_t seed) {
    ParamStore ps;
    CGRParams p;
    p.u = add_conv(ps, "u", 2, 4, 1, 1);
    p.w = add_conv(ps, "w", 2, 4, 1, 1);
    p.rel = add_conv(ps, "rel", 1, 1, 1, 3);
    p.cmix = add_conv(ps, "cmix", 2, 2, 1, 1);
    p.d = add_conv(ps, "d", 2, 4, 1, 1);
    p.e = add_conv(ps, "e", 4, 2, 1, 1);
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto x = detail::rand_tensor({4, 5, 5}, rng, -1.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("input", x);
    auto f = [&]() {
        std::mt19937_64 prng(seed ^ 0x7F);
        return detail::probe(cgr_forward(x, p), prng);
    };
    return {{"cgr", grad_check_tensors(f, checked)}};
}

inline std::vector<GradRow> fuse_rows(std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0xABCD);
    // Positive inputs keep the per-pixel activity away from the |.| kink.
    auto a = detail::rand_tensor({3, 6, 6}, rng, 0.2, 1.0, true);
    auto b = detail::rand_tensor({3, 6, 6}, rng, 0.2, 1.0, true);
    auto f = [&]() {
        std::mt19937_64 prng(seed ^ 0x80);
        return detail::probe(l1_fuse(a, b), prng);
    };
    return {{"fuse", grad_check_tensors(f, {{"f.ir", a}, {"f.vis", b}})}};
}

inline std::vector<GradRow> decoder_rows(std::uint64_t seed) {
    ParamStore ps;
    DecoderParams p;
    p.c1 = add_conv(ps, "c1", 4, 4, 3, 3);
    p.c2 = add_conv(ps, "c2", 2, 4, 3, 3);
    p.c3 = add_conv(ps, "c3", 1, 2, 3, 3);
    ps.initialize(seed);
    std::mt19937_64 rng(seed ^ 0xABCD);
    auto x = detail::rand_tensor({4, 8, 8}, rng, -1.0, 1.0, true);
    auto checked = detail::store_tensors(ps);
    checked.emplace_back("input", x);
    auto f = [&]() {
        std::mt19937_64 prng(seed ^ 0x81);
        return detail::probe(decode(x, p), prng);
    };
    return {{"decoder", grad_check_tensors(f, checked, 1e-5, 2)}};
}

// Screens a candidate offset vector: every in-bounds sampling coordinate must
// sit further than `margin` from the bilinear cell boundaries, so the probe
// step never crosses a derivative kink.
inline bool coords_clear_of_cells(const std::array<double, 8>& off, int size, double margin) {
    auto offsets = Tensor::from_data({8}, std::vector<double>(off.begin(), off.end()));
    Canvas cv{size, size, 0.0, 0.0};
    TensorPtr coords;
    try {
        coords = homography_grid(offsets, size, size, cv);
    } catch (const DegenerateHomography&) {
        return false;
    }
    std::size_t n = coords->data.size() / 2;
    bool any_valid = false;
    for (std::size_t i = 0; i < n; ++i) {
        double u = coords->data[i], v = coords->data[n + i];
        if (u < 0.0 || u > size - 1.0 || v < 0.0 || v > size - 1.0) continue;
        any_valid = true;
        for (double c : {u, v}) {
            double d = std::fabs(c - std::round(c));
            if (d < margin) return false;
        }
    }
    return any_valid;
}

inline std::vector<GradRow> losses_rows(std::uint64_t seed) {
    std::vector<GradRow> rows;
    std::mt19937_64 rng(seed ^ 0xABCD);

    // Alignment: disjoint value ranges keep |warped - ref| away from zero; the
    // offsets are screened against bilinear cell boundaries.
    {
        int size = 12;
        auto tex1 = detail::rand_tensor({1, size, size}, rng, 0.0, 1.0, false);
        auto tex2 = detail::rand_tensor({1, size, size}, rng, 0.0, 1.0, false);
        TensorPtr ref_ir = Tensor::create({1, size, size}), ref_vis = Tensor::create({1, size, size});
        TensorPtr tar_ir = Tensor::create({1, size, size}), tar_vis = Tensor::create({1, size, size});
        for (std::size_t i = 0; i < tex1->data.size(); ++i) {
            ref_ir->data[i] = 0.05 + 0.25 * tex1->data[i];
            ref_vis->data[i] = 0.05 + 0.25 * tex2->data[i];
            tar_ir->data[i] = 0.55 + 0.40 * tex2->data[i];
            tar_vis->data[i] = 0.55 + 0.40 * tex1->data[i];
        }
        std::array<double, 8> off{};
        bool found = false;
        for (int attempt = 0; attempt < 64 && !found; ++attempt) {
            for (double& o : off) o = msgr::detail::uniform_real(rng, -1.8, 1.8);
            found = coords_clear_of_cells(off, size, 2e-3);
        }
        if (!found) throw std::logic_error("losses gradcheck: no kink-free offsets found");
        auto offsets = Tensor::create({8}, true);
        for (int i = 0; i < 8; ++i) offsets->data[static_cast<std::size_t>(i)] = off[static_cast<std::size_t>(i)];
        auto f = [&]() { return loss_alignment(ref_ir, ref_vis, tar_ir, tar_vis, offsets).value; };
        rows.push_back({"alignment", grad_check_tensors(f, {{"offsets", offsets}}, 1e-6)});
    }

    // Seam: the panorama sits above every view by at least 0.2 everywhere, so
    // the masked absolute differences never change sign under probing.
    {
        int size = 12;
        std::array<double, 8> off = {2.3, -1.7, -2.1, 1.3, 1.9, 2.4, -1.5, -2.2};
        Mat3 h = offsets_to_h(off, size, size);
        Canvas cv = canvas_for(h, size, size, size, size);
        auto ir = detail::rand_tensor({1, size, size}, rng, 0.0, 1.0, false);
        auto vis = detail::rand_tensor({1, size, size}, rng, 0.0, 1.0, false);
        WarpedViews views;
        auto pr_ir = place_image(ir, cv), pr_vis = place_image(vis, cv);
        auto wt_ir = warp_image(ir, h, cv), wt_vis = warp_image(vis, h, cv);
        // Snapshot the warped content into fresh gradient leaves: the views
        // are probed directly, and only leaf gradients persist after a sweep.
        auto leaf = [](const TensorPtr& t) {
            auto c = Tensor::create(t->shape, true);
            c->data = t->data;
            return c;
        };
        views.ir_ref = leaf(pr_ir.values);
        views.vis_ref = leaf(pr_vis.values);
        views.ir_tar = leaf(wt_ir.values);
        views.vis_tar = leaf(wt_vis.values);
        SeamMasks seams = make_seam_masks(pr_ir.validity, wt_ir.validity, 2);
        auto pano = detail::rand_tensor({1, cv.height, cv.width}, rng, 1.2, 1.5, true);
        auto f = [&]() { return loss_seam(pano, views, seams, 1.0, 1.5); };
        std::vector<std::pair<std::string, TensorPtr>> checked = {{"pano", pano},
                                                                  {"view.ir_ref", views.ir_ref},
                                                                  {"view.vis_tar", views.vis_tar}};
        rows.push_back({"seam", grad_check_tensors(f, checked, 1e-5, 2)});
    }

    // Structural: smooth everywhere.
    {
        int size = 16;
        auto mask = Tensor::create({1, size, size});
        std::fill(mask->data.begin(), mask->data.end(), 1.0);
        WarpedViews views;
        views.ir_ref = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        views.ir_tar = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        views.vis_ref = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        views.vis_tar = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        auto pano = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        auto f = [&]() { return loss_ssim(pano, views, mask, mask, 10.0, 15.0); };
        std::vector<std::pair<std::string, TensorPtr>> checked = {{"pano", pano},
                                                                  {"view.ir_ref", views.ir_ref},
                                                                  {"view.vis_tar", views.vis_tar}};
        rows.push_back({"structural", grad_check_tensors(f, checked, 1e-5, 3)});
    }

    // Perceptual: fixed extractor weights and fixed inputs; the rectifier
    // pre-activations of this construction stay clear of zero.
    {
        int size = 12;
        PerceptualExtractor V;
        auto mask = Tensor::create({1, size, size});
        std::fill(mask->data.begin(), mask->data.end(), 1.0);
        WarpedViews views;
        views.ir_ref = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, false);
        views.ir_tar = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, false);
        views.vis_ref = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, false);
        views.vis_tar = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, false);
        auto pano = detail::rand_tensor({1, size, size}, rng, 0.1, 0.9, true);
        auto f = [&]() { return loss_perceptual(pano, views, mask, mask, V, 1e-3, 1e-3); };
        rows.push_back({"perceptual", grad_check_tensors(f, {{"pano", pano}})});
    }
    return rows;
}

} // namespace gradsuite

// Runs the named module's checks; throws std::invalid_argument for an
// unknown name (the documented set is gradcheck_module_names()).
inline std::vector<GradRow> run_gradcheck_module(const std::string& module, std::uint64_t seed) {
    if (module == "encoder") return gradsuite::encoder_rows(seed);
    if (module == "embed") return gradsuite::embed_rows(seed);
    if (module == "message") return gradsuite::message_rows(seed);
    if (module == "reason") return gradsuite::reason_rows(seed);
    if (module == "head") return gradsuite::head_rows(seed);
    if (module == "align") return gradsuite::align_rows(seed);
    if (module == "sgr") return gradsuite::sgr_rows(seed);
    if (module == "dcm") return gradsuite::dcm_rows(seed);
    if (module == "cgr") return gradsuite::cgr_rows(seed);
    if (module == "fuse") return gradsuite::fuse_rows(seed);
    if (module == "decoder") return gradsuite::decoder_rows(seed);
    if (module == "losses") return gradsuite::losses_rows(seed);
    throw std::invalid_argument("unknown gradcheck module: " + module);
}

} // namespace msgr
