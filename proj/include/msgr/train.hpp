#pragma once

// Staged training: first-order adaptive-moment updates with per-epoch
// learning-rate decay, per-sample gradient accumulation, and a checkpoint
// written after initialization and after every epoch.
//
// Stages:
//   align  trains the encoder and alignment head on the alignment loss;
//   recon  trains the reconstruction paths on seam + structural + perceptual
//          losses with encoder/alignment parameters frozen (realized as a
//          skipped update, so gradients still flow through the whole graph);
//   joint  trains everything on the full objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "synth.hpp"

namespace msgr {

struct TrainOptions {
    std::string stage = "align"; // align | recon | joint
    int epochs = 150;
    double lr = 1e-4;
    double decay = 0.96; // per-epoch multiplicative
    int batch = 4;
    std::uint64_t seed = 1;
    LossWeights weights;

    // Stage defaults (align 150 epochs at lr 1e-4, recon 10, joint 50 at
    // 5e-5, decay 0.96 throughout), overridable from a config file via the
    // train.* and loss.* keys.
    static TrainOptions from_config(const std::string& stage, const Config& cfg) {
        TrainOptions o;
        o.stage = stage;
        if (stage == "align") {
            o.epochs = 150;
            o.lr = 1e-4;
        } else if (stage == "recon") {
            o.epochs = 10;
            o.lr = 1e-4;
        } else if (stage == "joint") {
            o.epochs = 50;
            o.lr = 5e-5;
        } else {
            throw std::invalid_argument("unknown training stage: " + stage);
        }
        o.epochs = cfg.get_int("train.epochs", o.epochs);
        o.lr = cfg.get_double("train.lr", o.lr);
        o.decay = cfg.get_double("train.decay", o.decay);
        o.batch = cfg.get_int("train.batch", o.batch);
        o.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", 1));
        o.weights.l1 = cfg.get_double("loss.lambda1", o.weights.l1);
        o.weights.l2 = cfg.get_double("loss.lambda2", o.weights.l2);
        o.weights.l3 = cfg.get_double("loss.lambda3", o.weights.l3);
        o.weights.l4 = cfg.get_double("loss.lambda4", o.weights.l4);
        o.weights.l5 = cfg.get_double("loss.lambda5", o.weights.l5);
        o.weights.l6 = cfg.get_double("loss.lambda6", o.weights.l6);
        if (o.epochs < 0) throw std::invalid_argument("train.epochs must be non-negative");
        if (o.batch < 1) throw std::invalid_argument("train.batch must be positive");
        return o;
    }
};

// ---------------------------------------------------------------------------
// Adam. Moment buffers live only for the duration of a stage; they are not
// checkpointed.
// ---------------------------------------------------------------------------
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int t = 0;
    std::vector<std::vector<double>> m, v;

    explicit Adam(const ParamStore& store) {
        m.resize(store.size());
        v.resize(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            m[i].assign(store.all()[i].value->data.size(), 0.0);
            v[i].assign(store.all()[i].value->data.size(), 0.0);
        }
    }

    void step(ParamStore& store, const std::vector<char>& trainable, double lr) {
        ++t;
        double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < store.size(); ++i) {
            if (!trainable[i]) continue;
            auto& p = *store.all()[i].value;
            for (std::size_t k = 0; k < p.data.size(); ++k) {
                double g = p.grad[k];
                m[i][k] = beta1 * m[i][k] + (1.0 - beta1) * g;
                v[i][k] = beta2 * v[i][k] + (1.0 - beta2) * g * g;
                p.data[k] = quantize_f32(p.data[k] - lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + eps));
            }
        }
    }
};

inline std::vector<char> trainable_mask(const ParamStore& store, const std::string& stage) {
    std::vector<char> mask(store.size(), 1);
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.all()[i].name;
        bool recon_param = name.rfind("recon.", 0) == 0;
        if (stage == "align" && recon_param) mask[i] = 0;
        if (stage == "recon" && !recon_param) mask[i] = 0;
    }
    return mask;
}

struct TrainResult {
    std::vector<double> epoch_loss; // mean loss per epoch (contributing samples)
    int skipped = 0;                // degenerate or empty-overlap samples, all epochs
    bool aborted = false;
    std::string abort_reason;
};

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(i) - 1))]);
}

} // namespace detail

// Runs one training stage over the dataset, writing a checkpoint to ckpt_out
// after initialization and after every epoch (a non-finite loss aborts and
// leaves the last good checkpoint in place). The log receives one line per
// epoch; identical inputs produce identical logs.
inline TrainResult train(StitchModel& model, const std::vector<DatasetSample>& data, const TrainOptions& opt,
                         const std::string& ckpt_out, std::ostream& log) {
    if (opt.stage != "align" && opt.stage != "recon" && opt.stage != "joint")
        throw std::invalid_argument("unknown training stage: " + opt.stage);
    if (data.empty()) throw std::invalid_argument("train: dataset is empty");

    auto trainable = trainable_mask(model.store, opt.stage);
    Adam adam(model.store);
    TrainResult res;
    char line[160];

    auto save = [&](int epoch, double loss) {
        std::map<std::string, std::string> meta;
        meta["train.stage"] = opt.stage;
        meta["train.epoch"] = std::to_string(epoch);
        std::snprintf(line, sizeof line, "%.17g", loss);
        meta["train.loss"] = line;
        meta["train.seed"] = std::to_string(opt.seed);
        save_model(ckpt_out, model, meta);
    };
    save(0, 0.0);

    std::snprintf(line, sizeof line, "stage %s  samples %zu  epochs %d  lr %.8g  decay %.8g  batch %d\n",
                  opt.stage.c_str(), data.size(), opt.epochs, opt.lr, opt.decay, opt.batch);
    log << line;

    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        double lr_e = opt.lr * std::pow(opt.decay, epoch);
        std::mt19937_64 erng(opt.seed ^ (0xD1B54A32D192ED03ULL * (static_cast<std::uint64_t>(epoch) + 1)));
        detail::shuffle_indices(idx, erng);

        double epoch_acc = 0.0;
        long epoch_n = 0;
        int epoch_skipped = 0;
        try {
            for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(opt.batch)) {
                std::size_t stop = std::min(idx.size(), start + static_cast<std::size_t>(opt.batch));
                double inv_b = 1.0 / static_cast<double>(stop - start);
                model.store.zero_grads();
                int batch_ok = 0;
                for (std::size_t s = start; s < stop; ++s) {
                    const DatasetSample& d = data[idx[s]];
                    try {
                        auto af = model.align_forward(d.images);
                        LossBreakdown parts;
                        if (opt.stage != "recon") {
                            auto al = loss_alignment(d.images.ref_ir, d.images.ref_vis, d.images.tar_ir,
                                                     d.images.tar_vis, af.result.offsets);
                            if (al.empty_overlap) {
                                ++epoch_skipped;
                                continue;
                            }
                            parts.alignment = al.value;
                        }
                        if (opt.stage != "align") {
                            auto rf = model.recon_forward(af, d.images);
                            parts.seam = loss_seam(rf.pano, rf.views, rf.seams, opt.weights.l1, opt.weights.l2);
                            parts.structural = loss_ssim(rf.pano, rf.views, rf.c1, rf.c2, opt.weights.l3, opt.weights.l4);
                            parts.perceptual = loss_perceptual(rf.pano, rf.views, rf.c1, rf.c2, model.percep,
                                                               opt.weights.l5, opt.weights.l6);
                        }
                        TensorPtr total = loss_total(parts);
                        backward(affine(total, inv_b, 0.0));
                        epoch_acc += total->data[0];
                        ++epoch_n;
                        ++batch_ok;
                    } catch (const DegenerateHomography&) {
                        ++epoch_skipped;
                    }
                }
                if (batch_ok > 0) adam.step(model.store, trainable, lr_e);
            }
        } catch (const std::runtime_error& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            res.skipped += epoch_skipped;
            std::snprintf(line, sizeof line, "epoch %3d  aborted: %s\n", epoch + 1, e.what());
            log << line;
            return res;
        }
        double epoch_loss = epoch_n > 0 ? epoch_acc / static_cast<double>(epoch_n) : 0.0;
        res.epoch_loss.push_back(epoch_loss);
        res.skipped += epoch_skipped;
        save(epoch + 1, epoch_loss);
        std::snprintf(line, sizeof line, "epoch %3d  lr %.8g  loss %.8g  skipped %d\n", epoch + 1, lr_e,
                      epoch_loss, epoch_skipped);
        log << line;
    }
    return res;
}

} // namespace msgr
