#include <catch2/catch_amalgamated.hpp>

#include <msgr/config.hpp>
#include <msgr/image_io.hpp>
#include <msgr/metrics.hpp>
#include <msgr/synth.hpp>

#include "helpers.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace msgr;
using Catch::Matchers::ContainsSubstring;

namespace {

// Per-case scratch directory under the system temp root, removed on exit.
struct ScratchDir {
    std::filesystem::path path;

    explicit ScratchDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() / ("msgr_data_" + tag + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~ScratchDir() { std::filesystem::remove_all(path); }

    std::string str() const { return path.string(); }
    std::string sub(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(a.size());
    mb /= static_cast<double>(b.size());
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

// ---------------------------------------------------------------------------
// PNG round trips
// ---------------------------------------------------------------------------

TEST_CASE("png io preserves 8-bit levels exactly") {
    ScratchDir td("png");
    auto img = Tensor::create({1, 5, 7});
    for (std::size_t i = 0; i < img->data.size(); ++i) img->data[i] = static_cast<double>(i % 256) / 255.0;
    write_png(td.sub("a.png"), img);
    auto back = read_png(td.sub("a.png"));
    REQUIRE(back->shape == std::vector<int>{1, 5, 7});
    CHECK(oracle::max_abs_diff(back->data, img->data) == 0.0);
}

TEST_CASE("png io quantizes arbitrary intensities to within half a level") {
    ScratchDir td("pngq");
    std::mt19937_64 rng(404);
    auto img = oracle::rand_tensor(rng, {1, 9, 13}, false, 0.0, 1.0);
    write_png(td.sub("q.png"), img);
    auto back = read_png(td.sub("q.png"));
    CHECK(oracle::max_abs_diff(back->data, img->data) <= 0.5 / 255.0 + 1e-12);

    auto clipped = Tensor::from_data({1, 2, 2}, {-0.25, 0.0, 1.0, 1.4});
    write_png(td.sub("c.png"), clipped);
    auto cb = read_png(td.sub("c.png"));
    CHECK(cb->data == std::vector<double>{0.0, 0.0, 1.0, 1.0});
}

TEST_CASE("png io rejects unusable inputs") {
    ScratchDir td("pngbad");
    CHECK_THROWS_WITH(read_png(td.sub("missing.png")), ContainsSubstring("cannot open"));
    auto multi = Tensor::create({2, 4, 4});
    CHECK_THROWS_AS(write_png(td.sub("m.png"), multi), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Configuration files
// ---------------------------------------------------------------------------

TEST_CASE("config parses keys, comments, and typed values") {
    auto c = Config::from_string("# full-line comment\n"
                                 "  name = spatial   # trailing comment\n"
                                 "alpha=0.5\n"
                                 "count = 42\n"
                                 "flag = yes\n"
                                 "quiet = off\n"
                                 "widths = 8, 16,32 ,64\n"
                                 "\n");
    CHECK(c.has("name"));
    CHECK_FALSE(c.has("missing"));
    CHECK(c.get_string("name", "") == "spatial");
    CHECK(c.get_string("missing", "dflt") == "dflt");
    CHECK(c.get_double("alpha", 0.0) == 0.5);
    CHECK(c.get_double("missing", 2.5) == 2.5);
    CHECK(c.get_int("count", 0) == 42);
    CHECK(c.get_int("missing", -3) == -3);
    CHECK(c.get_bool("flag", false));
    CHECK_FALSE(c.get_bool("quiet", true));
    CHECK(c.get_bool("missing", true));
    CHECK(c.get_int_list("widths", {}) == std::vector<int>{8, 16, 32, 64});
    CHECK(c.get_int_list("missing", {1, 2}) == std::vector<int>{1, 2});
    CHECK(c.entries().size() == 6);
}

TEST_CASE("config names the origin and line of malformed entries") {
    CHECK_THROWS_WITH(Config::from_string("key value\n", "cfg.txt"), ContainsSubstring("cfg.txt:1"));
    CHECK_THROWS_WITH(Config::from_string("a = 1\noops\n", "cfg.txt"),
                      ContainsSubstring("cfg.txt:2: expected 'key = value'"));
    CHECK_THROWS_WITH(Config::from_string(" = 3\n"), ContainsSubstring("empty key"));

    auto c = Config::from_string("d = xyz\n"
                                 "dz = 1.5z\n"
                                 "i = 3.7\n"
                                 "iw = w\n"
                                 "l =\n"
                                 "lx = 1,x\n");
    CHECK_THROWS_WITH(c.get_double("d", 0.0), ContainsSubstring("not a number"));
    CHECK_THROWS_WITH(c.get_double("dz", 0.0), ContainsSubstring("trailing characters"));
    CHECK_THROWS_WITH(c.get_int("i", 0), ContainsSubstring("trailing characters"));
    CHECK_THROWS_WITH(c.get_int("iw", 0), ContainsSubstring("not an integer"));
    CHECK_THROWS_WITH(c.get_bool("iw", false), ContainsSubstring("not a boolean"));
    CHECK_THROWS_WITH(c.get_int_list("l", {}), ContainsSubstring("empty list"));
    CHECK_THROWS_WITH(c.get_int_list("lx", {}), ContainsSubstring("not an integer"));
}

TEST_CASE("config files load from disk with their path as the origin") {
    ScratchDir td("cfg");
    {
        std::ofstream f(td.sub("good.txt"));
        f << "train.epochs = 12\n";
    }
    auto c = Config::from_file(td.sub("good.txt"));
    CHECK(c.get_int("train.epochs", 0) == 12);

    {
        std::ofstream f(td.sub("bad.txt"));
        f << "ok = 1\nbroken line\n";
    }
    CHECK_THROWS_WITH(Config::from_file(td.sub("bad.txt")), ContainsSubstring("bad.txt:2"));
    CHECK_THROWS_WITH(Config::from_file(td.sub("none.txt")), ContainsSubstring("cannot read config"));
}

// ---------------------------------------------------------------------------
// Procedural texture corpus
// ---------------------------------------------------------------------------

TEST_CASE("texture pairs are deterministic, bounded, and correlated across modalities") {
    auto a = make_texture_pair(40, 32, 7);
    REQUIRE(a.ir->shape == std::vector<int>{1, 32, 40});
    REQUIRE(a.vis->shape == std::vector<int>{1, 32, 40});

    auto b = make_texture_pair(40, 32, 7);
    CHECK(a.ir->data == b.ir->data);
    CHECK(a.vis->data == b.vis->data);
    auto c = make_texture_pair(40, 32, 8);
    CHECK(a.vis->data != c.vis->data);

    for (double v : a.ir->data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    for (double v : a.vis->data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    CHECK(pearson(a.ir->data, a.vis->data) > 0.5);

    CHECK_THROWS_AS(make_texture_pair(7, 32, 1), std::invalid_argument);
    CHECK_THROWS_AS(make_texture_pair(32, 7, 1), std::invalid_argument);
}

TEST_CASE("corpus loading pairs modalities, synthesizes missing infrared, and sorts by id") {
    ScratchDir td("corpus");
    write_texture_corpus(td.str(), 2, 48, 48, 11);
    write_png(td.sub("backdrop.png"), make_texture_pair(48, 48, 99).vis);

    auto entries = load_corpus(td.str(), 48);
    REQUIRE(entries.size() == 3);
    CHECK(entries[0].id == "backdrop");
    CHECK(entries[1].id == "tex000");
    CHECK(entries[2].id == "tex001");

    CHECK(entries[0].pseudo);
    CHECK(entries[0].ir_path == entries[0].vis_path);
    auto expect = pseudo_ir_from(entries[0].vis);
    CHECK(entries[0].ir->data == expect->data);

    CHECK_FALSE(entries[1].pseudo);
    CHECK(entries[1].ir_path != entries[1].vis_path);
    CHECK(entries[1].ir->shape == entries[1].vis->shape);
    CHECK(entries[1].ir->data != entries[1].vis->data);
}

TEST_CASE("corpus loading explains every rejection when nothing is usable") {
    ScratchDir td("reject");
    write_texture_corpus(td.str(), 1, 16, 16, 3);
    {
        std::ofstream f(td.sub("notes.txt"));
        f << "not an image\n";
    }
    write_png(td.sub("half_ir.png"), make_texture_pair(16, 16, 4).ir);
    write_png(td.sub("skew_ir.png"), make_texture_pair(16, 16, 5).ir);
    write_png(td.sub("skew_vis.png"), make_texture_pair(24, 24, 5).vis);

    CHECK_THROWS_WITH(load_corpus(td.str(), 32),
                      ContainsSubstring("no usable source images") && ContainsSubstring("notes.txt (not a .png)") &&
                          ContainsSubstring("half_ir.png (missing counterpart modality)") &&
                          ContainsSubstring("skew (modalities differ in extent)") &&
                          ContainsSubstring("tex000 (smaller than crop size plus margins)"));

    CHECK_THROWS_WITH(load_corpus(td.sub("nope"), 8), ContainsSubstring("not a directory"));
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

TEST_CASE("sample generation is deterministic and meets its admission gates") {
    auto tex = make_texture_pair(96, 96, 5);
    std::mt19937_64 r1(42), r2(42);
    auto s1 = generate_pair(tex.ir, tex.vis, 48, 6.0, r1);
    auto s2 = generate_pair(tex.ir, tex.vis, 48, 6.0, r2);

    CHECK(s1.offsets == s2.offsets);
    CHECK(s1.h_gt.m == s2.h_gt.m);
    CHECK(s1.cv == s2.cv);
    CHECK(s1.ref_ir->data == s2.ref_ir->data);
    CHECK(s1.ref_vis->data == s2.ref_vis->data);
    CHECK(s1.tar_ir->data == s2.tar_ir->data);
    CHECK(s1.tar_vis->data == s2.tar_vis->data);
    CHECK(s1.gt_pano->data == s2.gt_pano->data);

    for (double o : s1.offsets) CHECK(std::fabs(o) <= 6.0);
    CHECK(s1.overlap_mse_ir < 5e-3);
    CHECK(s1.overlap_mse_vis < 5e-3);

    // The stored homography reproduces the drawn corner displacements.
    auto corners = image_corners(48, 48);
    auto quad = shift_corners(corners, s1.offsets);
    for (std::size_t i = 0; i < 4; ++i) {
        Pt p = apply_h(s1.h_gt, corners[i]);
        CHECK(std::fabs(p[0] - quad[i][0]) < 1e-9);
        CHECK(std::fabs(p[1] - quad[i][1]) < 1e-9);
    }

    CHECK(s1.cv == canvas_for(s1.h_gt, 48, 48, 48, 48));
    REQUIRE(s1.gt_pano->shape == std::vector<int>{1, s1.cv.height, s1.cv.width});
    for (double v : s1.gt_pano->data) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("zero perturbation radius reproduces the reference exactly") {
    auto tex = make_texture_pair(64, 80, 21);
    std::mt19937_64 rng(3);
    auto s = generate_pair(tex.ir, tex.vis, 32, 0.0, rng);

    for (double o : s.offsets) CHECK(o == 0.0);
    CHECK(s.h_gt.m == Mat3::identity().m);
    CHECK(s.cv == Canvas{32, 32, 0.0, 0.0});
    CHECK(s.tar_ir->data == s.ref_ir->data);
    CHECK(s.tar_vis->data == s.ref_vis->data);
    CHECK(s.overlap_mse_ir == 0.0);
    CHECK(s.overlap_mse_vis == 0.0);

    REQUIRE(s.gt_pano->shape == std::vector<int>{1, 32, 32});
    double worst = 0.0;
    for (std::size_t i = 0; i < s.gt_pano->data.size(); ++i)
        worst = std::max(worst, std::fabs(s.gt_pano->data[i] - 0.5 * (s.ref_ir->data[i] + s.ref_vis->data[i])));
    CHECK(worst == 0.0);
}

TEST_CASE("sample generation validates its inputs") {
    auto tex = make_texture_pair(32, 32, 6);
    std::mt19937_64 rng(1);
    CHECK_THROWS_WITH(generate_pair(tex.ir, tex.vis, 7, 1.0, rng), ContainsSubstring("at least 8"));
    CHECK_THROWS_WITH(generate_pair(tex.ir, tex.vis, 16, -0.5, rng), ContainsSubstring("non-negative"));
    CHECK_THROWS_WITH(generate_pair(tex.ir, tex.vis, 32, 1.0, rng), ContainsSubstring("size + 2*ceil(rho)"));

    auto narrow = Tensor::create({1, 32, 31});
    CHECK_THROWS_WITH(generate_pair(tex.ir, narrow, 16, 1.0, rng), ContainsSubstring("registered"));
    auto multi = Tensor::create({2, 32, 32});
    CHECK_THROWS_WITH(generate_pair(multi, multi, 16, 1.0, rng), ContainsSubstring("registered"));
}

// ---------------------------------------------------------------------------
// Dataset emission and loading
// ---------------------------------------------------------------------------

TEST_CASE("dataset generation writes a canonical manifest and loadable samples") {
    ScratchDir src("set_src"), out("set_out");
    write_texture_corpus(src.str(), 2, 96, 96, 17);
    auto gs = generate_set(src.str(), out.str(), 5, 48, 5.0, 1234);
    CHECK(gs.written == 5);
    REQUIRE(gs.ids.size() == 5);
    CHECK(gs.ids.front() == "s00000");
    CHECK(gs.ids.back() == "s00004");

    std::ifstream mf(out.sub("manifest.tsv"));
    REQUIRE(mf);
    std::string header;
    std::getline(mf, header);
    CHECK(header == kManifestHeader);

    auto ds = load_dataset(out.str());
    REQUIRE(ds.size() == 5);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& d = ds[i];
        CHECK(d.id == gs.ids[i]);
        CHECK(d.rho == 5.0);
        CHECK_FALSE(d.pseudo);
        REQUIRE(d.images.ref_ir->shape == std::vector<int>{1, 48, 48});
        REQUIRE(d.images.ref_vis->shape == std::vector<int>{1, 48, 48});
        REQUIRE(d.images.tar_ir->shape == std::vector<int>{1, 48, 48});
        REQUIRE(d.images.tar_vis->shape == std::vector<int>{1, 48, 48});

        REQUIRE(d.gt.has_value());
        REQUIRE(d.gt->offsets.has_value());
        for (double o : *d.gt->offsets) CHECK(std::fabs(o) <= 5.0);
        // Sidecar values survive the text round trip exactly, so the stored
        // homography, the offsets that produced it, and the manifest canvas
        // must all still agree.
        auto h_rt = offsets_to_h(*d.gt->offsets, 48, 48);
        CHECK(h_rt.m == d.gt->h.m);
        CHECK(d.cv == canvas_for(d.gt->h, 48, 48, 48, 48));

        REQUIRE(d.gt_pano);
        CHECK(d.gt_pano->shape == std::vector<int>{1, d.cv.height, d.cv.width});
    }
}

TEST_CASE("dataset generation is byte-for-byte reproducible") {
    ScratchDir src("rep_src"), o1("rep_a"), o2("rep_b"), o3("rep_c");
    write_texture_corpus(src.str(), 1, 96, 96, 23);
    generate_set(src.str(), o1.str(), 3, 48, 4.0, 99);
    generate_set(src.str(), o2.str(), 3, 48, 4.0, 99);
    generate_set(src.str(), o3.str(), 3, 48, 4.0, 100);

    CHECK(slurp(o1.sub("manifest.tsv")) == slurp(o2.sub("manifest.tsv")));
    CHECK(slurp(o1.sub("manifest.tsv")) != slurp(o3.sub("manifest.tsv")));
    for (const std::string& id : {"s00000", "s00001", "s00002"})
        for (const std::string& f :
             {"ref_ir.png", "ref_vis.png", "tar_ir.png", "tar_vis.png", "gt_pano.png", "H_gt.txt"})
            CHECK(slurp(o1.sub(id + "/" + f)) == slurp(o2.sub(id + "/" + f)));
}

TEST_CASE("pseudo-infrared sources are flagged through the manifest") {
    ScratchDir src("solo_src"), out("solo_out");
    write_png(src.sub("lone.png"), make_texture_pair(96, 96, 31).vis);
    auto gs = generate_set(src.str(), out.str(), 2, 48, 3.0, 7);
    CHECK(gs.written == 2);
    auto ds = load_dataset(out.str());
    REQUIRE(ds.size() == 2);
    CHECK(ds[0].pseudo);
    CHECK(ds[1].pseudo);
}

TEST_CASE("dataset loading tolerates missing optional files and reports broken manifests") {
    ScratchDir src("opt_src"), out("opt_out");
    write_texture_corpus(src.str(), 1, 96, 96, 41);
    generate_set(src.str(), out.str(), 1, 48, 2.0, 55);
    std::filesystem::remove(out.path / "s00000" / "H_gt.txt");
    std::filesystem::remove(out.path / "s00000" / "gt_pano.png");
    auto ds = load_dataset(out.str());
    REQUIRE(ds.size() == 1);
    CHECK_FALSE(ds[0].gt.has_value());
    CHECK(ds[0].gt_pano == nullptr);

    ScratchDir bad("bad_mani");
    CHECK_THROWS_WITH(load_dataset(bad.sub("void")), ContainsSubstring("missing manifest.tsv"));
    {
        std::ofstream f(bad.sub("manifest.tsv"), std::ios::binary);
        f << "id\tseed\n";
    }
    CHECK_THROWS_WITH(load_dataset(bad.str()), ContainsSubstring("malformed manifest header"));
    {
        std::ofstream f(bad.sub("manifest.tsv"), std::ios::binary);
        f << kManifestHeader << "\n" << "s00000\t12\n";
    }
    CHECK_THROWS_WITH(load_dataset(bad.str()), ContainsSubstring("malformed manifest row"));
}

// ---------------------------------------------------------------------------
// Image metrics
// ---------------------------------------------------------------------------

TEST_CASE("spatial frequency, deviation, and gradient match hand-worked cases") {
    auto flat = Tensor::create({1, 5, 7});
    std::fill(flat->data.begin(), flat->data.end(), 0.37);
    CHECK(metric_sf(flat) == 0.0);
    CHECK(metric_sd(flat) == 0.0);
    CHECK(metric_ag(flat) == 0.0);

    auto two = Tensor::from_data({1, 1, 2}, {0.0, 1.0});
    CHECK(metric_sf(two) == 1.0);
    CHECK(metric_sd(two) == 0.5);
    CHECK(metric_ag(two) == 0.0);

    auto checker = Tensor::from_data({1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
    CHECK(metric_sf(checker) == std::sqrt(2.0));
    CHECK(metric_sd(checker) == 0.5);
    CHECK(metric_ag(checker) == 1.0);

    auto multi = Tensor::create({2, 2, 2});
    CHECK_THROWS_AS(metric_sf(multi), std::invalid_argument);
    CHECK_THROWS_AS(metric_sd(multi), std::invalid_argument);
    CHECK_THROWS_AS(metric_ag(multi), std::invalid_argument);
}

TEST_CASE("mean squared error and corner error match hand-worked cases") {
    auto x = Tensor::from_data({1, 1, 2}, {0.0, 1.0});
    auto gt = Tensor::from_data({1, 1, 2}, {0.5, 0.5});
    CHECK(metric_mse(x, gt) == 0.25);
    auto wide = Tensor::create({1, 1, 3});
    CHECK_THROWS_AS(metric_mse(x, wide), std::invalid_argument);

    Mat3 t = Mat3::identity();
    t.m[2] = 3.0;
    t.m[5] = 4.0;
    CHECK(corner_error(t, Mat3::identity(), 10, 8) == Catch::Approx(5.0).margin(1e-12));
    CHECK(corner_error(t, t, 10, 8) == 0.0);

    auto r = compute_metrics(x);
    CHECK_FALSE(r.mse.has_value());
    auto r2 = compute_metrics(x, x);
    REQUIRE(r2.mse.has_value());
    CHECK(*r2.mse == 0.0);
    CHECK_FALSE(r2.corner_err.has_value());
}

TEST_CASE("report files round-trip values exactly and summarize means") {
    ScratchDir td("report");
    std::vector<MetricRow> rows(2);
    rows[0].id = "s00000";
    rows[0].sf = 1.0 / 3.0;
    rows[0].sd = std::sqrt(2.0) / 7.0;
    rows[0].ag = 0.125;
    rows[0].mse = 0.0172;
    rows[0].corner_err = 6.0221;
    rows[1].id = "s00001";
    rows[1].sf = 0.25;
    rows[1].sd = 0.75;
    rows[1].ag = 1e-7;

    auto text = format_report(rows);
    CHECK(text.rfind(kReportHeader, 0) == 0);
    CHECK(text.find("-\t-") != std::string::npos);

    write_report(td.sub("r.tsv"), rows);
    auto back = read_report(td.sub("r.tsv"));
    REQUIRE(back.size() == 3);
    CHECK(back[0].id == "s00000");
    CHECK(back[0].sf == rows[0].sf);
    CHECK(back[0].sd == rows[0].sd);
    CHECK(back[0].ag == rows[0].ag);
    REQUIRE(back[0].mse.has_value());
    CHECK(*back[0].mse == *rows[0].mse);
    REQUIRE(back[0].corner_err.has_value());
    CHECK(*back[0].corner_err == *rows[0].corner_err);
    CHECK_FALSE(back[1].mse.has_value());
    CHECK_FALSE(back[1].corner_err.has_value());

    CHECK(back[2].id == "mean");
    CHECK(back[2].sf == (rows[0].sf + rows[1].sf) / 2.0);
    REQUIRE(back[2].mse.has_value());
    CHECK(*back[2].mse == *rows[0].mse);
    REQUIRE(back[2].corner_err.has_value());
    CHECK(*back[2].corner_err == *rows[0].corner_err);

    write_report(td.sub("empty.tsv"), {});
    auto e = read_report(td.sub("empty.tsv"));
    REQUIRE(e.size() == 1);
    CHECK(e[0].id == "mean");
    CHECK(e[0].sf == 0.0);
    CHECK_FALSE(e[0].mse.has_value());

    {
        std::ofstream f(td.sub("bogus.tsv"), std::ios::binary);
        f << "bogus\n";
    }
    CHECK_THROWS_WITH(read_report(td.sub("bogus.tsv")), ContainsSubstring("malformed report header"));
    CHECK_THROWS_WITH(read_report(td.sub("nope.tsv")), ContainsSubstring("cannot read"));
}
