#pragma once

#include <cmath>
#include <string>

#include "encoder.hpp"
#include "homography.hpp"
#include "tensor.hpp"

namespace msgr {

// Balancing weights: lambda1/2 seam, lambda3/4 structural, lambda5/6 feature
// consistency (IR first in each pair).
struct LossWeights {
    double l1 = 1.0, l2 = 1.5, l3 = 10.0, l4 = 15.0, l5 = 1e-3, l6 = 1e-3;
};

// The four warped views on the canvas, used as reconstruction targets.
struct WarpedViews {
    TensorPtr ir_ref, ir_tar, vis_ref, vis_tar;
};

// Mean absolute difference over the masked sites; an empty mask contributes
// zero. The mask is a constant 0/1 map and carries no gradient.
inline TensorPtr masked_l1(const TensorPtr& a, const TensorPtr& b, const TensorPtr& mask) {
    double count = 0.0;
    for (double v : mask->data) count += v;
    if (count == 0.0) return Tensor::scalar(0.0);
    return affine(sum(mul(abs(sub(a, b)), mask)), 1.0 / count, 0.0);
}

struct AlignmentLoss {
    TensorPtr value;
    bool empty_overlap = false;
    double coverage = 0.0; // valid fraction of the reference extent
};

// Photometric alignment: warp the target views by the regressed offsets and
// compare against the reference inside the common valid region. The overlap
// always lies inside the reference extent, so the loss is evaluated on that
// grid directly (mean per masked pixel, VIS term then IR term).
inline AlignmentLoss loss_alignment(const TensorPtr& ref_ir, const TensorPtr& ref_vis,
                                    const TensorPtr& tar_ir, const TensorPtr& tar_vis,
                                    const TensorPtr& offsets) {
    Canvas cv;
    cv.height = ref_ir->shape[1];
    cv.width = ref_ir->shape[2];
    TensorPtr coords = homography_grid(offsets, tar_ir->shape[2], tar_ir->shape[1], cv);
    auto w_ir = grid_sample(tar_ir, coords);
    auto w_vis = grid_sample(tar_vis, coords);
    const TensorPtr& mask = w_ir.validity;
    double count = 0.0;
    for (double v : mask->data) count += v;
    AlignmentLoss out;
    out.coverage = count / static_cast<double>(mask->numel());
    if (count == 0.0) {
        out.value = Tensor::scalar(0.0);
        out.empty_overlap = true;
        return out;
    }
    TensorPtr vis_term = affine(sum(mul(abs(sub(ref_vis, w_vis.values)), mask)), 1.0 / count, 0.0);
    TensorPtr ir_term = affine(sum(mul(abs(sub(ref_ir, w_ir.values)), mask)), 1.0 / count, 0.0);
    out.value = add(vis_term, ir_term);
    return out;
}

struct SeamMasks {
    TensorPtr s1, s2; // band restricted to the reference / target visibility
};

// Band around the visibility boundary between the two views: pixels of the
// union within Chebyshev distance `radius` of the overlap's rim.
inline SeamMasks make_seam_masks(const TensorPtr& v_ref, const TensorPtr& v_tar, int radius = 2) {
    if (v_ref->shape != v_tar->shape) throw std::invalid_argument("seam masks: shape mismatch");
    int h = v_ref->shape[1], w = v_ref->shape[2];
    auto at = [w](int y, int x) { return static_cast<std::size_t>(y) * w + x; };
    std::vector<char> ov(static_cast<std::size_t>(h) * w), un(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < ov.size(); ++i) {
        bool r = v_ref->data[i] != 0.0, t = v_tar->data[i] != 0.0;
        ov[i] = r && t;
        un[i] = r || t;
    }
    std::vector<char> rim(ov.size(), 0);
    const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t i = at(y, x);
            if (!un[i]) continue;
            for (int k = 0; k < 4; ++k) {
                int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                std::size_t j = at(ny, nx);
                if (un[j] && ov[i] != ov[j]) {
                    rim[i] = 1;
                    break;
                }
            }
        }
    SeamMasks m;
    m.s1 = Tensor::create({1, h, w});
    m.s2 = Tensor::create({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::size_t i = at(y, x);
            if (!un[i]) continue;
            bool near = false;
            for (int ny = std::max(0, y - radius); !near && ny <= std::min(h - 1, y + radius); ++ny)
                for (int nx = std::max(0, x - radius); nx <= std::min(w - 1, x + radius); ++nx)
                    if (rim[at(ny, nx)]) {
                        near = true;
                        break;
                    }
            if (!near) continue;
            if (v_ref->data[i] != 0.0) m.s1->data[i] = 1.0;
            if (v_tar->data[i] != 0.0) m.s2->data[i] = 1.0;
        }
    return m;
}

// Seam consistency with the printed coefficient pattern: the first weight on
// the reference-IR term, the second on the remaining three.
inline TensorPtr loss_seam(const TensorPtr& pano, const WarpedViews& views, const SeamMasks& seams,
                           double lambda1, double lambda2) {
    TensorPtr t1 = masked_l1(pano, views.ir_ref, seams.s1);
    TensorPtr rest = add(add(masked_l1(pano, views.ir_tar, seams.s2), masked_l1(pano, views.vis_ref, seams.s1)),
                         masked_l1(pano, views.vis_tar, seams.s2));
    return add(affine(t1, lambda1, 0.0), affine(rest, lambda2, 0.0));
}

namespace detail {

inline TensorPtr gaussian_window_11() {
    static TensorPtr w = [] {
        auto t = Tensor::create({1, 1, 11, 11}, false);
        double sigma = 1.5, total = 0.0;
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 11; ++x) {
                double dy = y - 5, dx = x - 5;
                double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                t->data[static_cast<std::size_t>(y) * 11 + x] = v;
                total += v;
            }
        for (auto& v : t->data) v /= total;
        return t;
    }();
    return w;
}

inline TensorPtr ones_window_11() {
    static TensorPtr w = [] {
        auto t = Tensor::create({1, 1, 11, 11}, false);
        std::fill(t->data.begin(), t->data.end(), 1.0);
        return t;
    }();
    return w;
}

} // namespace detail

// Windowed structural similarity on [0,1] images (11x11 Gaussian, sigma 1.5),
// averaged over windows lying fully inside the mask.
inline TensorPtr ssim(const TensorPtr& x, const TensorPtr& y, const TensorPtr& mask) {
    if (x->shape != y->shape || x->shape != mask->shape)
        throw std::invalid_argument("ssim: operands must share one shape");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    TensorPtr win = detail::gaussian_window_11();
    TensorPtr mu_x = conv2d(x, win, nullptr, 1, 1, 5);
    TensorPtr mu_y = conv2d(y, win, nullptr, 1, 1, 5);
    TensorPtr sxx = sub(conv2d(mul(x, x), win, nullptr, 1, 1, 5), mul(mu_x, mu_x));
    TensorPtr syy = sub(conv2d(mul(y, y), win, nullptr, 1, 1, 5), mul(mu_y, mu_y));
    TensorPtr sxy = sub(conv2d(mul(x, y), win, nullptr, 1, 1, 5), mul(mu_x, mu_y));
    TensorPtr num = mul(affine(mul(mu_x, mu_y), 2.0, c1), affine(sxy, 2.0, c2));
    TensorPtr den = mul(affine(add(mul(mu_x, mu_x), mul(mu_y, mu_y)), 1.0, c1), affine(add(sxx, syy), 1.0, c2));
    TensorPtr map = div(num, den);

    TensorPtr cover = conv2d(mask, detail::ones_window_11(), nullptr, 1, 1, 5);
    auto wmask = Tensor::create(mask->shape);
    double count = 0.0;
    for (std::size_t i = 0; i < cover->data.size(); ++i)
        if (cover->data[i] == 121.0) {
            wmask->data[i] = 1.0;
            count += 1.0;
        }
    if (count == 0.0) throw std::invalid_argument("ssim: mask smaller than one window");
    return affine(sum(mul(map, wmask)), 1.0 / count, 0.0);
}

// Structural terms over the two view content masks; the first weight on the
// IR pair, the second on the VIS pair.
inline TensorPtr loss_ssim(const TensorPtr& pano, const WarpedViews& views, const TensorPtr& c1_mask,
                           const TensorPtr& c2_mask, double lambda3, double lambda4) {
    auto one_minus = [](TensorPtr s) { return affine(s, -1.0, 1.0); };
    TensorPtr ir = add(one_minus(ssim(pano, views.ir_ref, c1_mask)), one_minus(ssim(pano, views.ir_tar, c2_mask)));
    TensorPtr vis = add(one_minus(ssim(pano, views.vis_ref, c1_mask)), one_minus(ssim(pano, views.vis_tar, c2_mask)));
    return add(affine(ir, lambda3, 0.0), affine(vis, lambda4, 0.0));
}

// Feature consistency: squared distances between extractor features of the
// mask-applied images (mean over feature elements).
inline TensorPtr loss_perceptual(const TensorPtr& pano, const WarpedViews& views, const TensorPtr& c1_mask,
                                 const TensorPtr& c2_mask, const PerceptualExtractor& V, double lambda5,
                                 double lambda6) {
    auto term = [&](const TensorPtr& target, const TensorPtr& m) {
        return mean(square(sub(V.forward(mul(pano, m)), V.forward(mul(target, m)))));
    };
    TensorPtr ir = add(term(views.ir_ref, c1_mask), term(views.ir_tar, c2_mask));
    TensorPtr vis = add(term(views.vis_ref, c1_mask), term(views.vis_tar, c2_mask));
    return add(affine(ir, lambda5, 0.0), affine(vis, lambda6, 0.0));
}

struct LossBreakdown {
    TensorPtr alignment, seam, structural, perceptual; // any may be null
};

// Sum of the supplied parts; a non-finite part aborts with its name.
inline TensorPtr loss_total(const LossBreakdown& parts) {
    TensorPtr total;
    auto fold = [&](const TensorPtr& p, const char* name) {
        if (!p) return;
        if (!std::isfinite(p->data[0])) throw std::runtime_error(std::string("loss_total: non-finite ") + name);
        total = total ? add(total, p) : p;
    };
    fold(parts.alignment, "alignment");
    fold(parts.seam, "seam");
    fold(parts.structural, "structural");
    fold(parts.perceptual, "perceptual");
    return total ? total : Tensor::scalar(0.0);
}

} // namespace msgr
