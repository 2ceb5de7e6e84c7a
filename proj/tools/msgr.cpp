// Command-line front end: dataset generation, staged training, stitching,
// evaluation, and gradient checking.
//
// Exit statuses: 0 ok, 1 runtime failure, 2 usage error, 3 stitching fell
// back to the identity homography.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "../vendor/CLI11.hpp"
#include "msgr/config.hpp"
#include "msgr/gradsuite.hpp"
#include "msgr/metrics.hpp"
#include "msgr/model.hpp"
#include "msgr/synth.hpp"
#include "msgr/train.hpp"

namespace {

int cmd_gen_syn(const std::string& src, const std::string& out, int count, int size, double rho,
                std::uint64_t seed) {
    auto gs = msgr::generate_set(src, out, count, size, rho, seed);
    std::printf("wrote %d samples to %s\n", gs.written, out.c_str());
    return 0;
}

int cmd_train(const std::string& data, const std::string& stage, const std::string& config_path,
              const std::string& ckpt_in, const std::string& ckpt_out) {
    msgr::Config cfg = config_path.empty() ? msgr::Config() : msgr::Config::from_file(config_path);
    auto opt = msgr::TrainOptions::from_config(stage, cfg);
    if ((stage == "recon" || stage == "joint") && ckpt_in.empty())
        throw CLI::ValidationError("--ckpt-in", "stage " + stage + " requires an alignment checkpoint");

    std::unique_ptr<msgr::StitchModel> model;
    if (!ckpt_in.empty()) {
        auto loaded = msgr::load_model(ckpt_in);
        model = std::move(loaded.model);
    } else {
        model = std::make_unique<msgr::StitchModel>(msgr::ModelConfig::from_config(cfg));
        model->store.initialize(opt.seed);
    }
    auto ds = msgr::load_dataset(data);
    auto res = msgr::train(*model, ds, opt, ckpt_out, std::cout);
    if (res.aborted) {
        std::fprintf(stderr, "training aborted: %s\n", res.abort_reason.c_str());
        return 1;
    }
    return 0;
}

int cmd_stitch(const std::string& ref_ir_p, const std::string& ref_vis_p, const std::string& tar_ir_p,
               const std::string& tar_vis_p, const std::string& ckpt, const std::string& out) {
    auto loaded = msgr::load_model(ckpt);
    msgr::ImageSet im;
    im.ref_ir = msgr::read_png(ref_ir_p);
    im.ref_vis = msgr::read_png(ref_vis_p);
    im.tar_ir = msgr::read_png(tar_ir_p);
    im.tar_vis = msgr::read_png(tar_vis_p);

    auto af = loaded.model->align_forward(im);
    int tw = im.tar_ir->shape[2], th = im.tar_ir->shape[1];
    msgr::Mat3 h;
    msgr::Canvas cv;
    bool fallback = false;
    try {
        h = msgr::offsets_to_h(af.offsets_raw(), tw, th);
        cv = msgr::canvas_for(h, im.ref_ir->shape[2], im.ref_ir->shape[1], tw, th);
    } catch (const msgr::DegenerateHomography& e) {
        std::fprintf(stderr, "warning: degenerate homography (%s); falling back to identity\n", e.what());
        fallback = true;
        h = msgr::Mat3::identity();
        cv = msgr::canvas_for(h, im.ref_ir->shape[2], im.ref_ir->shape[1], tw, th);
    }
    auto rf = loaded.model->recon_forward_fixed(af, im, h, cv);
    msgr::write_png(out, rf.pano);
    std::string sidecar = out;
    if (sidecar.size() > 4 && sidecar.substr(sidecar.size() - 4) == ".png")
        sidecar = sidecar.substr(0, sidecar.size() - 4);
    sidecar += ".h.txt";
    msgr::write_h_sidecar(sidecar, h, af.offsets_raw());
    std::printf("panorama %dx%d -> %s (homography: %s)\n", cv.width, cv.height, out.c_str(), sidecar.c_str());
    return fallback ? 3 : 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& report) {
    auto loaded = msgr::load_model(ckpt);
    auto ds = msgr::load_dataset(data);
    if (ds.empty()) throw std::runtime_error("eval: dataset is empty");
    std::vector<msgr::MetricRow> rows;
    int fallbacks = 0;
    for (const auto& d : ds) {
        auto af = loaded.model->align_forward(d.images);
        int tw = d.images.tar_ir->shape[2], th = d.images.tar_ir->shape[1];
        msgr::Mat3 h;
        bool ok = true;
        try {
            h = msgr::offsets_to_h(af.offsets_raw(), tw, th);
        } catch (const msgr::DegenerateHomography&) {
            h = msgr::Mat3::identity();
            ok = false;
            ++fallbacks;
        }
        // The panorama is rendered on the ground-truth canvas when one is
        // known, so it is comparable pixel-for-pixel with gt_pano; without
        // ground truth the canvas follows the predicted homography.
        msgr::Canvas cv = d.gt_pano ? d.cv
                                    : msgr::canvas_for(h, d.images.ref_ir->shape[2], d.images.ref_ir->shape[1],
                                                       tw, th);
        auto rf = loaded.model->recon_forward_fixed(af, d.images, h, cv);
        auto row = msgr::compute_metrics(rf.pano, d.gt_pano);
        row.id = d.id;
        if (d.gt && ok) row.corner_err = msgr::corner_error(h, d.gt->h, tw, th);
        rows.push_back(row);
    }
    msgr::write_report(report, rows);
    auto back = msgr::read_report(report);
    const auto& mean = back.back();
    std::printf("evaluated %zu samples (%d identity fallbacks)\n", rows.size(), fallbacks);
    std::printf("mean: sf %.6g  sd %.6g  ag %.6g", mean.sf, mean.sd, mean.ag);
    if (mean.mse) std::printf("  mse %.6g", *mean.mse);
    if (mean.corner_err) std::printf("  corner_err %.6g", *mean.corner_err);
    std::printf("\nreport -> %s\n", report.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& module, std::uint64_t seed) {
    auto rows = msgr::run_gradcheck_module(module, seed);
    bool all_ok = true;
    std::printf("%-14s %-12s %10s %8s\n", "group", "worst", "max_rel", "status");
    for (const auto& r : rows) {
        bool ok = r.result.ok(1e-4);
        all_ok = all_ok && ok;
        std::printf("%-14s %-12s %10.3e %8s\n", r.group.c_str(), r.result.worst_name.c_str(),
                    r.result.max_rel_err, ok ? "ok" : "FAIL");
    }
    return all_ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-spectral image stitching"};
    app.require_subcommand(1);

    std::string src, out, data, stage, config_path, ckpt_in, ckpt_out, ckpt, report;
    std::string ref_ir, ref_vis, tar_ir, tar_vis, module;
    int count = 100, size = 224;
    double rho = 32.0;
    std::uint64_t seed = 1;

    auto* gen = app.add_subcommand("gen-syn", "generate a synthetic stitching dataset");
    gen->add_option("--src", src, "source image directory")->required();
    gen->add_option("--out", out, "output dataset directory")->required();
    gen->add_option("--count", count, "number of samples");
    gen->add_option("--size", size, "crop extent in pixels");
    gen->add_option("--rho", rho, "maximum corner displacement");
    gen->add_option("--seed", seed, "generation seed");

    auto* tr = app.add_subcommand("train", "train one stage");
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--stage", stage, "align | recon | joint")->required();
    tr->add_option("--config", config_path, "key = value config file");
    tr->add_option("--ckpt-in", ckpt_in, "checkpoint to continue from");
    tr->add_option("--ckpt-out", ckpt_out, "checkpoint to write")->required();

    auto* st = app.add_subcommand("stitch", "stitch one multi-spectral pair");
    st->add_option("--ref-ir", ref_ir)->required();
    st->add_option("--ref-vis", ref_vis)->required();
    st->add_option("--tar-ir", tar_ir)->required();
    st->add_option("--tar-vis", tar_vis)->required();
    st->add_option("--ckpt", ckpt, "model checkpoint")->required();
    st->add_option("--out", out, "output panorama path (.png)")->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ev->add_option("--data", data, "dataset directory")->required();
    ev->add_option("--ckpt", ckpt, "model checkpoint")->required();
    ev->add_option("--report", report, "report file to write")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of one block");
    std::string module_help = "one of:";
    for (const auto& m : msgr::gradcheck_module_names()) module_help += " " + m;
    gc->add_option("--module", module, module_help)->required();
    gc->add_option("--seed", seed, "instance seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_syn(src, out, count, size, rho, seed);
        if (tr->parsed()) return cmd_train(data, stage, config_path, ckpt_in, ckpt_out);
        if (st->parsed()) return cmd_stitch(ref_ir, ref_vis, tar_ir, tar_vis, ckpt, out);
        if (ev->parsed()) return cmd_eval(data, ckpt, report);
        if (gc->parsed()) return cmd_gradcheck(module, seed);
    } catch (const CLI::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
