#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>

#include "align.hpp"
#include "checkpoint.hpp"
#include "encoder.hpp"
#include "homography.hpp"
#include "losses.hpp"
#include "model_config.hpp"
#include "param.hpp"
#include "recon.hpp"
#include "tensor.hpp"

namespace msgr {

struct ImageSet {
    TensorPtr ref_ir, ref_vis, tar_ir, tar_vis;
};

struct AlignForward {
    FeaturePyramid ref, tar;
    AlignResult result;

    std::array<double, 8> offsets_raw() const {
        std::array<double, 8> o{};
        for (int i = 0; i < 8; ++i) o[static_cast<std::size_t>(i)] = result.offsets->data[static_cast<std::size_t>(i)];
        return o;
    }
};

struct ReconForward {
    Mat3 h;            // target -> reference plane
    Canvas cv;
    TensorPtr pano;    // [1,H,W], zero outside the union region
    WarpedViews views; // constant warped input images (loss targets)
    TensorPtr c1, c2;  // reference / target visibility masks on the canvas
    TensorPtr union_mask;
    SeamMasks seams;
};

// The complete stitcher: two modality encoders, the progressive alignment
// reasoner, and the dual-path reconstruction stage, all parameterized through
// one ordered store so checkpoints lay out deterministically.
class StitchModel {
public:
    explicit StitchModel(const ModelConfig& c) : cfg(c), enc(store, c), align(store, c), recon(store, c) {
        c.validate();
    }
    StitchModel(const StitchModel&) = delete;
    StitchModel& operator=(const StitchModel&) = delete;

    void initialize(std::uint64_t seed) { store.initialize(seed); }

    AlignForward align_forward(const ImageSet& im, MessageTrace* trace = nullptr) const {
        AlignForward out;
        out.ref = enc.forward(im.ref_ir, im.ref_vis);
        out.tar = enc.forward(im.tar_ir, im.tar_vis);
        out.result = align.forward(out.ref, out.tar, trace);
        return out;
    }

    // Differentiable reconstruction (training): canvas geometry follows the
    // regressed homography, warp coordinates keep their dependence on the
    // offsets. Throws DegenerateHomography when the regression collapses.
    ReconForward recon_forward(const AlignForward& af, const ImageSet& im) const {
        int tw = im.tar_ir->shape[2], th = im.tar_ir->shape[1];
        Mat3 h = offsets_to_h(af.offsets_raw(), tw, th);
        Canvas cv = canvas_for(h, im.ref_ir->shape[2], im.ref_ir->shape[1], tw, th);
        TensorPtr coords = homography_grid(af.result.offsets, tw, th, cv);
        return recon_with(af, im, h, cv, coords);
    }

    // Reconstruction with fixed geometry (inference, evaluation, fallback):
    // the canvas and homography are supplied, coordinates are constant.
    ReconForward recon_forward_fixed(const AlignForward& af, const ImageSet& im, const Mat3& h,
                                     const Canvas& cv) const {
        return recon_with(af, im, h, cv, warp_coords(h, cv));
    }

    ModelConfig cfg;
    ParamStore store;
    Encoder enc;
    AlignModule align;
    ReconModule recon;
    PerceptualExtractor percep;

private:
    ReconForward recon_with(const AlignForward& af, const ImageSet& im, const Mat3& h, const Canvas& cv,
                            const TensorPtr& coords) const {
        ReconForward out;
        out.h = h;
        out.cv = cv;

        // Constant coordinate copy for the loss targets, so gradients reach
        // the offsets only through the feature path.
        auto coords_const = Tensor::create(coords->shape);
        coords_const->data = coords->data;

        auto placed_ir = place_image(af.ref.ir[3], cv);
        auto placed_vis = place_image(af.ref.vis[3], cv);
        auto warped_ir = grid_sample(af.tar.ir[3], coords);
        auto warped_vis = grid_sample(af.tar.vis[3], coords);
        out.c1 = placed_ir.validity;
        out.c2 = warped_ir.validity;

        // Validity-weighted placement: single-view regions keep that view's
        // features, the overlap averages the two.
        auto recip = Tensor::create(out.c1->shape);
        auto uni = Tensor::create(out.c1->shape);
        for (std::size_t i = 0; i < recip->data.size(); ++i) {
            double s = out.c1->data[i] + out.c2->data[i];
            recip->data[i] = 1.0 / std::max(s, 1.0);
            uni->data[i] = s > 0.0 ? 1.0 : 0.0;
        }
        out.union_mask = uni;
        int C = recon.channels();
        TensorPtr g_ir = mul(add(placed_ir.values, warped_ir.values), broadcast_c(recip, C));
        TensorPtr g_vis = mul(add(placed_vis.values, warped_vis.values), broadcast_c(recip, C));

        TensorPtr r_ir = recon.run_path(g_ir, 0);
        TensorPtr r_vis = recon.run_path(g_vis, 1);
        out.pano = mul(recon.fuse_and_decode(r_ir, r_vis), uni);

        out.views.ir_ref = place_image(im.ref_ir, cv).values;
        out.views.vis_ref = place_image(im.ref_vis, cv).values;
        out.views.ir_tar = grid_sample(im.tar_ir, coords_const).values;
        out.views.vis_tar = grid_sample(im.tar_vis, coords_const).values;

        out.seams = make_seam_masks(out.c1, out.c2);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Checkpoint plumbing: the model config rides in the meta section, so loading
// needs nothing but the file.
// ---------------------------------------------------------------------------
inline void save_model(const std::string& path, const StitchModel& model,
                       std::map<std::string, std::string> extra_meta = {}) {
    model.cfg.to_meta(extra_meta);
    save_checkpoint(path, model.store, extra_meta);
}

struct LoadedModel {
    std::unique_ptr<StitchModel> model;
    std::map<std::string, std::string> meta;
};

inline LoadedModel load_model(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    LoadedModel out;
    out.meta = ck.meta;
    out.model = std::make_unique<StitchModel>(ModelConfig::from_meta(ck.meta));
    apply_checkpoint(ck, out.model->store);
    return out;
}

} // namespace msgr
