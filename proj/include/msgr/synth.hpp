#pragma once

// Synthetic stitching-pair generation: corner-perturbed crops of a registered
// source pair, with the exact ground-truth homography and the ground-truth
// panorama over the union region.
//
// Dataset layout on disk:
//   <out>/<id>/{ref_ir,ref_vis,tar_ir,tar_vis,gt_pano}.png   8-bit grayscale
//   <out>/<id>/H_gt.txt                                      homography sidecar
//   <out>/manifest.tsv
//
// The emitted homography maps target pixels to reference-plane points
// (tar -> ref); its offsets line holds the eight corner displacements, so
// offsets_to_h(offsets, size, size) reproduces the matrix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "homography.hpp"
#include "image_io.hpp"
#include "model.hpp"
#include "tensor.hpp"

namespace msgr {

namespace detail {

// 53-bit uniform draw in [0,1); pinned here (rather than
// std::uniform_real_distribution) so output bytes do not depend on the
// standard-library implementation.
inline double unit_real(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(std::mt19937_64& rng, double lo, double hi) {
    return lo + unit_real(rng) * (hi - lo);
}

// Uniform integer in [lo, hi]; the modulo bias is irrelevant at these ranges.
inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    return seed ^ (0x9E3779B97F4A7C15ULL * (index + 1));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Procedural source textures: layered value noise, smooth enough that the
// warped/unwarped overlap agrees to well under the interpolation tolerance.
// The two modalities are strongly positively correlated (the second is a
// tone-mapped copy plus a faint low-frequency perturbation).
// ---------------------------------------------------------------------------
struct TexturePair {
    TensorPtr ir, vis; // [1,H,W] in [0,1]
};

namespace detail {

// Bilinearly interpolated random lattice with `cells` cells per axis.
inline std::vector<double> value_noise(int w, int h, int cells, std::mt19937_64& rng) {
    int gw = cells + 1, gh = cells + 1;
    std::vector<double> grid(static_cast<std::size_t>(gw) * gh);
    for (double& g : grid) g = unit_real(rng);
    std::vector<double> out(static_cast<std::size_t>(w) * h);
    for (int y = 0; y < h; ++y) {
        double gy = h > 1 ? static_cast<double>(y) / (h - 1) * cells : 0.0;
        int y0 = std::min(static_cast<int>(gy), cells - 1);
        double fy = gy - y0;
        for (int x = 0; x < w; ++x) {
            double gx = w > 1 ? static_cast<double>(x) / (w - 1) * cells : 0.0;
            int x0 = std::min(static_cast<int>(gx), cells - 1);
            double fx = gx - x0;
            double v00 = grid[static_cast<std::size_t>(y0) * gw + x0];
            double v01 = grid[static_cast<std::size_t>(y0) * gw + x0 + 1];
            double v10 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0];
            double v11 = grid[static_cast<std::size_t>(y0 + 1) * gw + x0 + 1];
            out[static_cast<std::size_t>(y) * w + x] =
                (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
    }
    return out;
}

} // namespace detail

inline TexturePair make_texture_pair(int w, int h, std::uint64_t seed) {
    if (w < 8 || h < 8) throw std::invalid_argument("make_texture_pair: extent must be at least 8");
    std::mt19937_64 rng(seed);
    std::vector<double> field(static_cast<std::size_t>(w) * h, 0.0);
    double amp = 1.0;
    for (int cells : {4, 9, 19}) {
        auto layer = detail::value_noise(w, h, cells, rng);
        for (std::size_t i = 0; i < field.size(); ++i) field[i] += amp * layer[i];
        amp *= 0.5;
    }
    double lo = field[0], hi = field[0];
    for (double v : field) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double span = hi - lo > 1e-12 ? hi - lo : 1.0;
    auto tilt = detail::value_noise(w, h, 5, rng);

    TexturePair tp;
    tp.vis = Tensor::create({1, h, w});
    tp.ir = Tensor::create({1, h, w});
    for (std::size_t i = 0; i < field.size(); ++i) {
        double f = (field[i] - lo) / span;
        tp.vis->data[i] = 0.05 + 0.90 * f;
        double g = 0.08 + 0.82 * std::pow(f, 1.3) + 0.08 * (tilt[i] - 0.5);
        tp.ir->data[i] = std::clamp(g, 0.0, 1.0);
    }
    return tp;
}

// Writes `pairs` registered texture pairs (NAME_ir.png / NAME_vis.png) into
// `dir`, creating it if needed. Convenience for self-contained test corpora.
inline void write_texture_corpus(const std::string& dir, int pairs, int w, int h, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    for (int i = 0; i < pairs; ++i) {
        auto tp = make_texture_pair(w, h, detail::mix_seed(seed, static_cast<std::uint64_t>(i)));
        char name[32];
        std::snprintf(name, sizeof name, "tex%03d", i);
        write_png(dir + "/" + name + "_ir.png", tp.ir);
        write_png(dir + "/" + name + "_vis.png", tp.vis);
    }
}

// ---------------------------------------------------------------------------
// Source corpus scanning. PNGs named NAME_ir.png / NAME_vis.png form a
// registered pair; any other PNG is used alone, with the IR channel
// synthesized as gamma-compressed inverted luminance (1-x)^0.7 and the sample
// flagged pseudo_ir in the manifest.
// ---------------------------------------------------------------------------
struct CorpusEntry {
    std::string id;
    std::string ir_path, vis_path; // equal for pseudo-IR singles
    bool pseudo = false;
    TensorPtr ir, vis; // loaded [1,H,W]
};

inline TensorPtr pseudo_ir_from(const TensorPtr& vis) {
    auto out = Tensor::create(vis->shape);
    for (std::size_t i = 0; i < vis->data.size(); ++i)
        out->data[i] = std::pow(1.0 - vis->data[i], 0.7);
    return out;
}

// Scans `dir`, loads every usable source, and returns entries sorted by id.
// min_extent filters out sources too small for the requested crop geometry;
// if nothing usable remains the error lists every rejected file and why.
inline std::vector<CorpusEntry> load_corpus(const std::string& dir, int min_extent) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("source corpus is not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());

    std::vector<std::string> rejected;
    std::map<std::string, std::pair<std::string, std::string>> pairs; // base -> (ir, vis)
    std::vector<std::string> singles;
    for (const auto& f : files) {
        if (f.size() < 4 || f.substr(f.size() - 4) != ".png") {
            rejected.push_back(f + " (not a .png)");
            continue;
        }
        std::string stem = f.substr(0, f.size() - 4);
        if (stem.size() > 3 && stem.substr(stem.size() - 3) == "_ir")
            pairs[stem.substr(0, stem.size() - 3)].first = f;
        else if (stem.size() > 4 && stem.substr(stem.size() - 4) == "_vis")
            pairs[stem.substr(0, stem.size() - 4)].second = f;
        else
            singles.push_back(f);
    }

    std::vector<CorpusEntry> entries;
    auto try_load = [&](CorpusEntry ce) {
        try {
            ce.vis = read_png(ce.vis_path);
            ce.ir = ce.pseudo ? pseudo_ir_from(ce.vis) : read_png(ce.ir_path);
            if (ce.ir->shape != ce.vis->shape)
                throw std::runtime_error("modalities differ in extent");
            if (ce.vis->shape[1] < min_extent || ce.vis->shape[2] < min_extent)
                throw std::runtime_error("smaller than crop size plus margins");
            entries.push_back(std::move(ce));
        } catch (const std::exception& ex) {
            rejected.push_back(ce.id + " (" + ex.what() + ")");
        }
    };
    for (const auto& [base, p] : pairs) {
        if (p.first.empty() || p.second.empty()) {
            rejected.push_back((p.first.empty() ? p.second : p.first) + " (missing counterpart modality)");
            continue;
        }
        CorpusEntry ce;
        ce.id = base;
        ce.ir_path = dir + "/" + p.first;
        ce.vis_path = dir + "/" + p.second;
        try_load(std::move(ce));
    }
    for (const auto& f : singles) {
        CorpusEntry ce;
        ce.id = f.substr(0, f.size() - 4);
        ce.ir_path = ce.vis_path = dir + "/" + f;
        ce.pseudo = true;
        try_load(std::move(ce));
    }
    if (entries.empty()) {
        std::string msg = "no usable source images in " + dir;
        for (const auto& r : rejected) msg += "\n  rejected: " + r;
        throw std::runtime_error(msg);
    }
    std::sort(entries.begin(), entries.end(),
              [](const CorpusEntry& a, const CorpusEntry& b) { return a.id < b.id; });
    return entries;
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------
struct SynthSample {
    TensorPtr ref_ir, ref_vis; // [1,size,size]
    TensorPtr tar_ir, tar_vis; // [1,size,size]
    TensorPtr gt_pano;         // [1,cv.height,cv.width], zero outside the union
    std::array<double, 8> offsets{};
    Mat3 h_gt; // tar -> ref
    Canvas cv;
    double overlap_mse_ir = 0.0, overlap_mse_vis = 0.0;
};

namespace detail {

inline bool strictly_convex(const std::array<Pt, 4>& q) {
    double sign = 0.0;
    for (int i = 0; i < 4; ++i) {
        const Pt& a = q[static_cast<std::size_t>(i)];
        const Pt& b = q[static_cast<std::size_t>((i + 1) % 4)];
        const Pt& c = q[static_cast<std::size_t>((i + 2) % 4)];
        double cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if (cross == 0.0) return false;
        if (sign == 0.0)
            sign = cross;
        else if (sign * cross < 0.0)
            return false;
    }
    return true;
}

inline TensorPtr crop(const TensorPtr& src, int cx, int cy, int size) {
    int W = src->shape[2];
    auto out = Tensor::create({1, size, size});
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            out->data[static_cast<std::size_t>(y) * size + x] =
                src->data[static_cast<std::size_t>(cy + y) * W + cx + x];
    return out;
}

// Sample `src` at H*(p) + (cx,cy) over a size x size grid (one interpolation).
inline GridSampleResult sample_through(const TensorPtr& src, const Mat3& h, int cx, int cy, int size) {
    auto coords = Tensor::create({2, size, size});
    std::size_t n = static_cast<std::size_t>(size) * size;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            Pt q = apply_h(h, {static_cast<double>(x), static_cast<double>(y)});
            std::size_t i = static_cast<std::size_t>(y) * size + x;
            coords->data[i] = q[0] + cx;
            coords->data[n + i] = q[1] + cy;
        }
    return grid_sample(src, coords);
}

// Mean squared difference between the reference crop and the target warped
// back onto the reference extent, over the valid overlap.
inline double overlap_mse(const TensorPtr& ref, const TensorPtr& tar, const Mat3& h_tar_to_ref, int size) {
    Canvas ref_cv{size, size, 0.0, 0.0};
    auto w = warp_image(tar, h_tar_to_ref, ref_cv);
    double acc = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < w.validity->data.size(); ++i) {
        if (w.validity->data[i] == 0.0) continue;
        double d = w.values->data[i] - ref->data[i];
        acc += d * d;
        cnt += 1.0;
    }
    return cnt > 0.0 ? acc / cnt : 0.0;
}

} // namespace detail

// Generates one corner-perturbed sample from a registered source pair.
// The reference is a random size x size crop with at least ceil(rho) margin on
// every side; each target corner is displaced by du,dv ~ Uniform[-rho,rho];
// the target is the source resampled through the ground-truth homography in a
// single interpolation. Degenerate corner draws (self-intersecting or
// collinear quads, unsolvable systems, overlap disagreement) are resampled up
// to 32 times before giving up.
inline SynthSample generate_pair(const TensorPtr& src_ir, const TensorPtr& src_vis, int size, double rho,
                                 std::mt19937_64& rng) {
    if (size < 8) throw std::invalid_argument("generate_pair: size must be at least 8");
    if (rho < 0.0) throw std::invalid_argument("generate_pair: rho must be non-negative");
    if (src_ir->shape != src_vis->shape || src_ir->shape.size() != 3 || src_ir->shape[0] != 1)
        throw std::invalid_argument("generate_pair: sources must be registered [1,H,W] images");
    int H = src_ir->shape[1], W = src_ir->shape[2];
    int margin = static_cast<int>(std::ceil(rho));
    if (W < size + 2 * margin || H < size + 2 * margin)
        throw std::invalid_argument("generate_pair: source extent must be at least size + 2*ceil(rho)");

    auto corners = image_corners(size, size);
    std::string last_reason = "degenerate corner draw";
    for (int attempt = 0; attempt < 32; ++attempt) {
        int cx = detail::uniform_int(rng, margin, W - size - margin);
        int cy = detail::uniform_int(rng, margin, H - size - margin);
        std::array<double, 8> off{};
        if (rho > 0.0)
            for (double& o : off) o = detail::uniform_real(rng, -rho, rho);

        auto quad = shift_corners(corners, off);
        if (!detail::strictly_convex(quad)) {
            last_reason = "self-intersecting or collinear quad";
            continue;
        }
        Mat3 h;
        Canvas cv;
        try {
            h = offsets_to_h(off, size, size);
            double reproj = 0.0;
            for (std::size_t i = 0; i < 4; ++i) {
                Pt p = apply_h(h, corners[i]);
                reproj = std::max({reproj, std::fabs(p[0] - quad[i][0]), std::fabs(p[1] - quad[i][1])});
            }
            if (reproj >= 1e-9) {
                last_reason = "corner reprojection above tolerance";
                continue;
            }
            cv = canvas_for(h, size, size, size, size);
        } catch (const DegenerateHomography& ex) {
            last_reason = ex.what();
            continue;
        }

        SynthSample s;
        s.offsets = off;
        s.h_gt = h;
        s.cv = cv;
        s.ref_ir = detail::crop(src_ir, cx, cy, size);
        s.ref_vis = detail::crop(src_vis, cx, cy, size);
        auto tar_ir = detail::sample_through(src_ir, h, cx, cy, size);
        auto tar_vis = detail::sample_through(src_vis, h, cx, cy, size);
        s.tar_ir = tar_ir.values;
        s.tar_vis = tar_vis.values;

        s.overlap_mse_ir = detail::overlap_mse(s.ref_ir, s.tar_ir, h, size);
        s.overlap_mse_vis = detail::overlap_mse(s.ref_vis, s.tar_vis, h, size);
        if (s.overlap_mse_ir >= 5e-3 || s.overlap_mse_vis >= 5e-3) {
            last_reason = "overlap disagreement above tolerance";
            continue;
        }

        // Ground-truth panorama: source content over the union of the placed
        // reference rectangle and the warped target quad.
        auto ones = Tensor::create({1, size, size});
        std::fill(ones->data.begin(), ones->data.end(), 1.0);
        auto v_ref = place_image(ones, cv).validity;
        auto v_tar = warp_image(ones, h, cv).validity;
        auto mean_src = Tensor::create({1, H, W});
        for (std::size_t i = 0; i < mean_src->data.size(); ++i)
            mean_src->data[i] = 0.5 * (src_ir->data[i] + src_vis->data[i]);
        auto coords = Tensor::create({2, cv.height, cv.width});
        std::size_t n = static_cast<std::size_t>(cv.height) * cv.width;
        for (int y = 0; y < cv.height; ++y)
            for (int x = 0; x < cv.width; ++x) {
                std::size_t i = static_cast<std::size_t>(y) * cv.width + x;
                coords->data[i] = x - cv.off_x + cx;
                coords->data[n + i] = y - cv.off_y + cy;
            }
        auto pano = grid_sample(mean_src, coords);
        s.gt_pano = Tensor::create({1, cv.height, cv.width});
        for (std::size_t i = 0; i < n; ++i) {
            double u = std::max(v_ref->data[i], v_tar->data[i]);
            s.gt_pano->data[i] = u * pano.validity->data[i] * pano.values->data[i];
        }
        return s;
    }
    throw std::runtime_error("generate_pair: no valid sample after 32 attempts (" + last_reason + ")");
}

// ---------------------------------------------------------------------------
// Dataset emission and loading
// ---------------------------------------------------------------------------
inline void write_sample(const std::string& out_dir, const std::string& id, const SynthSample& s) {
    std::string dir = out_dir + "/" + id;
    std::filesystem::create_directories(dir);
    write_png(dir + "/ref_ir.png", s.ref_ir);
    write_png(dir + "/ref_vis.png", s.ref_vis);
    write_png(dir + "/tar_ir.png", s.tar_ir);
    write_png(dir + "/tar_vis.png", s.tar_vis);
    write_png(dir + "/gt_pano.png", s.gt_pano);
    write_h_sidecar(dir + "/H_gt.txt", s.h_gt, s.offsets);
}

inline const char* kManifestHeader = "id\tseed\trho\tcanvas_w\tcanvas_h\toff_x\toff_y\tsource\tpseudo_ir";

struct GenSummary {
    int written = 0;
    std::vector<std::string> ids;
};

// Deterministic dataset generation: sample i draws from
// mt19937_64(seed ^ 0x9E3779B97F4A7C15 * (i+1)) and uses source i mod #entries,
// so identical inputs give identical output bytes.
inline GenSummary generate_set(const std::string& src_dir, const std::string& out_dir, int count, int size,
                               double rho, std::uint64_t seed) {
    if (count < 0) throw std::invalid_argument("generate_set: count must be non-negative");
    int margin = static_cast<int>(std::ceil(rho));
    auto entries = load_corpus(src_dir, size + 2 * margin);
    std::filesystem::create_directories(out_dir);

    std::ostringstream manifest;
    manifest << kManifestHeader << "\n";
    GenSummary gs;
    char buf[64];
    for (int i = 0; i < count; ++i) {
        std::uint64_t sample_seed = detail::mix_seed(seed, static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(sample_seed);
        const CorpusEntry& src = entries[static_cast<std::size_t>(i) % entries.size()];
        SynthSample s = generate_pair(src.ir, src.vis, size, rho, rng);
        std::snprintf(buf, sizeof buf, "s%05d", i);
        std::string id = buf;
        write_sample(out_dir, id, s);
        manifest << id << "\t" << sample_seed << "\t";
        std::snprintf(buf, sizeof buf, "%.17g", rho);
        manifest << buf << "\t" << s.cv.width << "\t" << s.cv.height << "\t";
        std::snprintf(buf, sizeof buf, "%.17g\t%.17g", s.cv.off_x, s.cv.off_y);
        manifest << buf << "\t" << src.vis_path << "\t" << (src.pseudo ? 1 : 0) << "\n";
        gs.ids.push_back(id);
        ++gs.written;
    }
    std::ofstream mf(out_dir + "/manifest.tsv", std::ios::binary);
    if (!mf) throw std::runtime_error("cannot write " + out_dir + "/manifest.tsv");
    mf << manifest.str();
    return gs;
}

struct DatasetSample {
    std::string id;
    ImageSet images;
    std::optional<HSidecar> gt; // homography sidecar (offsets optional)
    TensorPtr gt_pano;          // null when absent
    Canvas cv;
    double rho = 0.0;
    bool pseudo = false;
};

// Loads a generated dataset directory (manifest plus per-sample files).
// gt_pano and the sidecar are optional so hand-assembled directories with
// images only still evaluate on the unsupervised metrics.
inline std::vector<DatasetSample> load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.tsv");
    if (!mf) throw std::runtime_error("missing manifest.tsv in " + dir);
    std::string line;
    if (!std::getline(mf, line) || line != kManifestHeader)
        throw std::runtime_error("malformed manifest header in " + dir);
    std::vector<DatasetSample> out;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        DatasetSample d;
        std::string seed_s, src;
        int pseudo = 0;
        if (!(std::getline(is, d.id, '\t') && std::getline(is, seed_s, '\t')))
            throw std::runtime_error("malformed manifest row: " + line);
        if (!(is >> d.rho >> d.cv.width >> d.cv.height >> d.cv.off_x >> d.cv.off_y))
            throw std::runtime_error("malformed manifest row: " + line);
        is.ignore(1, '\t');
        if (!std::getline(is, src, '\t') || !(is >> pseudo))
            throw std::runtime_error("malformed manifest row: " + line);
        d.pseudo = pseudo != 0;
        std::string sd = dir + "/" + d.id;
        d.images.ref_ir = read_png(sd + "/ref_ir.png");
        d.images.ref_vis = read_png(sd + "/ref_vis.png");
        d.images.tar_ir = read_png(sd + "/tar_ir.png");
        d.images.tar_vis = read_png(sd + "/tar_vis.png");
        if (std::filesystem::exists(sd + "/H_gt.txt")) d.gt = read_h_sidecar(sd + "/H_gt.txt");
        if (std::filesystem::exists(sd + "/gt_pano.png")) d.gt_pano = read_png(sd + "/gt_pano.png");
        out.push_back(std::move(d));
    }
    return out;
}

} // namespace msgr
