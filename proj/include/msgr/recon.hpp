#pragma once

#include <array>
#include <string>

#include "encoder.hpp"
#include "model_config.hpp"
#include "param.hpp"
#include "tensor.hpp"

namespace msgr {

struct SGRParams {
    ConvParam q, k, v, o; // 1x1: C->C', C->C', C->C', C'->C
};

struct DCMParams {
    ConvParam a1, a2;   // 3x3, dilation 1, padding 1
    ConvParam b1, b2;   // 3x3, dilation 2, padding 2
    ConvParam fuse;     // 1x1, 5C -> C
};

struct CGRParams {
    ConvParam u, w;     // 1x1: C -> C'
    ConvParam rel;      // 1x3 conv sliding along each relation row
    ConvParam cmix;     // 1x1 mixing the C' relation rows
    ConvParam d, e;     // 1x1: C -> C', C' -> C
};

struct SCGRTriple {
    SGRParams sgr;
    DCMParams dcm;
    CGRParams cgr;
};

inline int reduced_channels(int c) { return c > 1 ? c / 2 : 1; }

struct SGRTrace {
    TensorPtr affinity; // [sites, key sites]; rows sum to 1
};

struct CGRTrace {
    TensorPtr relation; // [C',C']; rows sum to 1
};

// Spatial reasoning: every site aggregates all sites through a softmax
// affinity over query/key projections, with a residual add. Beyond
// `key_side` x `key_side` the keys and values are average-pooled onto that
// grid so the affinity stays linear in the canvas area.
inline TensorPtr sgr_forward(const TensorPtr& f, const SGRParams& p, int key_side, SGRTrace* trace = nullptr) {
    int C = f->shape[0], H = f->shape[1], W = f->shape[2];
    if (H < 1 || W < 1) throw std::invalid_argument("sgr: empty spatial extent");
    int cr = reduced_channels(C);
    TensorPtr q = conv2d(f, p.q.w, p.q.b);
    TensorPtr k = conv2d(f, p.k.w, p.k.b);
    TensorPtr v = conv2d(f, p.v.w, p.v.b);
    int kh = std::min(H, key_side), kw = std::min(W, key_side);
    if (kh != H || kw != W) {
        k = adaptive_avg_pool(k, kh, kw);
        v = adaptive_avg_pool(v, kh, kw);
    }
    TensorPtr qt = transpose(reshape(q, {cr, H * W}));          // [HW, C']
    TensorPtr affinity = softmax(matmul(qt, reshape(k, {cr, kh * kw})), 1);
    if (trace) trace->affinity = affinity;
    TensorPtr agg = matmul(affinity, transpose(reshape(v, {cr, kh * kw}))); // [HW, C']
    TensorPtr back = reshape(transpose(agg), {cr, H, W});
    return add(f, conv2d(back, p.o.w, p.o.b));
}

// Receptive-field expansion: a plain 3x3 pair and a dilated 3x3 pair; the
// input and all four intermediates fuse through a 1x1 conv. The residual add
// keeps the block an exact identity under zero weights, which the cascaded
// paths rely on.
inline TensorPtr dcm_forward(const TensorPtr& f, const DCMParams& p) {
    TensorPtr a1 = conv2d(f, p.a1.w, p.a1.b, 1, 1, 1);
    TensorPtr a2 = conv2d(a1, p.a2.w, p.a2.b, 1, 1, 1);
    TensorPtr b1 = conv2d(f, p.b1.w, p.b1.b, 1, 2, 2);
    TensorPtr b2 = conv2d(b1, p.b2.w, p.b2.b, 1, 2, 2);
    TensorPtr cat = concat_channels({f, a1, a2, b1, b2});
    return add(f, conv2d(cat, p.fuse.w, p.fuse.b));
}

// Channel reasoning: a softmax-normalized C'xC' relation matrix from two
// projections, refined by a row-wise 1x3 conv (residual) and a row-mixing
// 1x1 conv, then applied to a third projection to reweight channel slices.
inline TensorPtr cgr_forward(const TensorPtr& f, const CGRParams& p, CGRTrace* trace = nullptr) {
    int C = f->shape[0], H = f->shape[1], W = f->shape[2];
    int cr = reduced_channels(C);
    TensorPtr u = reshape(conv2d(f, p.u.w, p.u.b), {cr, H * W});
    TensorPtr w = reshape(conv2d(f, p.w.w, p.w.b), {cr, H * W});
    TensorPtr fc = softmax(matmul(u, transpose(w)), 1); // [C',C']
    if (trace) trace->relation = fc;
    TensorPtr slid = conv2d_asym(reshape(fc, {1, cr, cr}), p.rel.w, p.rel.b, 1, 1, 0, 1);
    TensorPtr fc2 = add(fc, reshape(slid, {cr, cr}));
    TensorPtr mixed = reshape(conv2d(reshape(fc2, {cr, cr, 1}), p.cmix.w, p.cmix.b), {cr, cr});
    TensorPtr dd = reshape(conv2d(f, p.d.w, p.d.b), {cr, H * W});
    TensorPtr out = reshape(matmul(mixed, dd), {cr, H, W});
    return add(f, conv2d(out, p.e.w, p.e.b));
}

struct DecoderParams {
    ConvParam c1, c2, c3;
};

// Three 3x3 convs with rectifiers and a final sigmoid onto one channel.
inline TensorPtr decode(const TensorPtr& f, const DecoderParams& p) {
    TensorPtr y = relu(conv2d(f, p.c1.w, p.c1.b, 1, 1, 1));
    y = relu(conv2d(y, p.c2.w, p.c2.b, 1, 1, 1));
    return sigmoid(conv2d(y, p.c3.w, p.c3.b, 1, 1, 1));
}

// Activity-weighted fusion of the two modality maps: per-pixel channel L1
// magnitudes, box-smoothed 3x3, normalized so the two weights sum to one
// exactly (the epsilon splits evenly between the modalities).
inline TensorPtr l1_fuse(const TensorPtr& f_ir, const TensorPtr& f_vis) {
    if (f_ir->shape != f_vis->shape) throw std::invalid_argument("l1_fuse: shape mismatch");
    constexpr double eps = 1e-8;
    int C = f_ir->shape[0];
    auto box = Tensor::create({1, 1, 3, 3}, false);
    for (auto& v : box->data) v = 1.0 / 9.0;
    TensorPtr a_ir = conv2d(sum_channels(abs(f_ir)), box, nullptr, 1, 1, 1);
    TensorPtr a_vis = conv2d(sum_channels(abs(f_vis)), box, nullptr, 1, 1, 1);
    TensorPtr w_ir = div(affine(a_ir, 1.0, eps / 2), affine(add(a_ir, a_vis), 1.0, eps));
    TensorPtr w_vis = affine(w_ir, -1.0, 1.0);
    return add(mul(f_ir, broadcast_c(w_ir, C)), mul(f_vis, broadcast_c(w_vis, C)));
}

class ReconModule {
public:
    ReconModule(ParamStore& ps, const ModelConfig& cfg)
        : channels_(cfg.channels.back()), key_side_(cfg.sgr_key_side) {
        int C = channels_;
        int cr = reduced_channels(C);
        // Each block's residual branch ends in a zero-initialized conv, so a
        // fresh model runs all nine blocks per path as the exact identity.
        // Random output convs compound to huge magnitudes over the cascade and
        // saturate the decoder sigmoid, which also flattens its gradients.
        for (int m = 0; m < 2; ++m) {
            std::string mod = m == 0 ? "ir" : "vis";
            for (int j = 0; j < 3; ++j) {
                std::string base = "recon." + mod + ".b" + std::to_string(j);
                auto& t = path_[m][static_cast<std::size_t>(j)];
                t.sgr.q = add_conv(ps, base + ".sgr.q", cr, C, 1, 1);
                t.sgr.k = add_conv(ps, base + ".sgr.k", cr, C, 1, 1);
                t.sgr.v = add_conv(ps, base + ".sgr.v", cr, C, 1, 1);
                t.sgr.o = add_conv(ps, base + ".sgr.o", C, cr, 1, 1, /*zero_weight=*/true);
                t.dcm.a1 = add_conv(ps, base + ".dcm.a1", C, C, 3, 3);
                t.dcm.a2 = add_conv(ps, base + ".dcm.a2", C, C, 3, 3);
                t.dcm.b1 = add_conv(ps, base + ".dcm.b1", C, C, 3, 3);
                t.dcm.b2 = add_conv(ps, base + ".dcm.b2", C, C, 3, 3);
                t.dcm.fuse = add_conv(ps, base + ".dcm.fuse", C, 5 * C, 1, 1, /*zero_weight=*/true);
                t.cgr.u = add_conv(ps, base + ".cgr.u", cr, C, 1, 1);
                t.cgr.w = add_conv(ps, base + ".cgr.w", cr, C, 1, 1);
                t.cgr.rel = add_conv(ps, base + ".cgr.rel", 1, 1, 1, 3);
                t.cgr.cmix = add_conv(ps, base + ".cgr.cmix", cr, cr, 1, 1);
                t.cgr.d = add_conv(ps, base + ".cgr.d", cr, C, 1, 1);
                t.cgr.e = add_conv(ps, base + ".cgr.e", C, cr, 1, 1, /*zero_weight=*/true);
            }
        }
        dec_.c1 = add_conv(ps, "recon.dec.c1", C, C, 3, 3);
        dec_.c2 = add_conv(ps, "recon.dec.c2", reduced_channels(C), C, 3, 3);
        dec_.c3 = add_conv(ps, "recon.dec.c3", 1, reduced_channels(C), 3, 3);
    }

    // modality: 0 = ir, 1 = vis
    TensorPtr run_path(const TensorPtr& f, int modality) const {
        TensorPtr x = f;
        for (const auto& t : path_[modality]) {
            x = sgr_forward(x, t.sgr, key_side_);
            x = dcm_forward(x, t.dcm);
            x = cgr_forward(x, t.cgr);
        }
        return x;
    }

    TensorPtr fuse_and_decode(const TensorPtr& r_ir, const TensorPtr& r_vis) const {
        return decode(l1_fuse(r_ir, r_vis), dec_);
    }

    const SCGRTriple& triple(int modality, int j) const { return path_[modality].at(static_cast<std::size_t>(j)); }
    const DecoderParams& decoder() const { return dec_; }
    int channels() const { return channels_; }
    int key_side() const { return key_side_; }

private:
    int channels_;
    int key_side_;
    std::array<std::array<SCGRTriple, 3>, 2> path_;
    DecoderParams dec_;
};

} // namespace msgr
