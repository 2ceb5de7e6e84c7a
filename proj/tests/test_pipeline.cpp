#include <catch2/catch_amalgamated.hpp>

#include <msgr/metrics.hpp>
#include <msgr/model.hpp>
#include <msgr/synth.hpp>
#include <msgr/train.hpp>

#include "helpers.hpp"

#include <array>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

using namespace msgr;
using Catch::Matchers::ContainsSubstring;

namespace {

// Per-case scratch directory under the system temp root, removed on exit.
struct ScratchDir {
    std::filesystem::path path;

    explicit ScratchDir(const std::string& tag) {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() / ("msgr_pipe_" + tag + "_" + std::to_string(counter++));
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

// Small enough that a full forward/backward pass costs milliseconds, while
// every architectural element (both encoders, two reasoning levels, the head,
// and all nine reconstruction blocks) stays present.
ModelConfig tiny_config() {
    ModelConfig c;
    c.channels = {2, 2, 2, 2};
    c.num_nodes = 2;
    c.num_levels = 2;
    c.node_dim = 3;
    c.head_hidden = 5;
    c.offset_scale = 2.0;
    c.sgr_key_side = 4;
    return c;
}

// Writes a one-pair texture corpus and generates `count` samples from it.
std::string make_tiny_dataset(const ScratchDir& td, int count, int size, double rho, std::uint64_t seed) {
    write_texture_corpus(td.sub("src"), 1, 64, 64, seed);
    generate_set(td.sub("src"), td.sub("ds"), count, size, rho, seed + 1);
    return td.sub("ds");
}

std::vector<std::vector<double>> snapshot(const ParamStore& s) {
    std::vector<std::vector<double>> out;
    for (const auto& p : s.all()) out.push_back(p.value->data);
    return out;
}

void set_param(StitchModel& m, const std::string& name, const std::vector<double>& v) {
    for (auto& p : m.store.all())
        if (p.name == name) {
            REQUIRE(p.value->data.size() == v.size());
            p.value->data = v;
            return;
        }
    FAIL("no parameter named " + name);
}

int run_cli(const std::string& args, const std::string& log_path) {
    std::string cmd = "\"" MSGR_CLI_PATH "\" " + args + " > " + log_path + " 2>&1";
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

} // namespace

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("model checkpoints restore configuration, metadata, and parameters bitwise") {
    ScratchDir td("ckpt");
    StitchModel m(tiny_config());
    m.initialize(7);
    save_model(td.sub("m.ckpt"), m, {{"note", "hello world"}});

    auto loaded = load_model(td.sub("m.ckpt"));
    CHECK(loaded.meta.at("note") == "hello world");
    CHECK(loaded.meta.at("model.channels") == "2,2,2,2");
    CHECK(loaded.model->cfg.channels == m.cfg.channels);
    CHECK(loaded.model->cfg.num_nodes == m.cfg.num_nodes);
    CHECK(loaded.model->cfg.num_levels == m.cfg.num_levels);
    CHECK(loaded.model->cfg.node_dim == m.cfg.node_dim);
    CHECK(loaded.model->cfg.head_hidden == m.cfg.head_hidden);
    CHECK(loaded.model->cfg.offset_scale == m.cfg.offset_scale);
    CHECK(loaded.model->cfg.sgr_key_side == m.cfg.sgr_key_side);

    REQUIRE(loaded.model->store.size() == m.store.size());
    for (std::size_t i = 0; i < m.store.size(); ++i) {
        const auto& a = m.store.at(i);
        const auto& b = loaded.model->store.at(i);
        CHECK(a.name == b.name);
        CHECK(a.value->data == b.value->data);
        for (double g : b.value->grad) CHECK(g == 0.0);
    }

    // Values are float32 by construction, so a second save is byte-identical.
    save_model(td.sub("rt.ckpt"), *loaded.model, {{"note", "hello world"}});
    CHECK(slurp(td.sub("rt.ckpt")) == slurp(td.sub("m.ckpt")));
}

TEST_CASE("checkpoints reject structural mismatches and corrupt files") {
    ScratchDir td("ckbad");
    CHECK_THROWS_WITH(load_checkpoint(td.sub("none.ckpt")), ContainsSubstring("cannot read checkpoint"));

    {
        std::ofstream f(td.sub("magic.ckpt"), std::ios::binary);
        f << "BOGUS\nmeta 0\ntensors 0\ndata 0\n";
    }
    CHECK_THROWS_WITH(load_checkpoint(td.sub("magic.ckpt")), ContainsSubstring("bad magic"));

    StitchModel m(tiny_config());
    m.initialize(3);
    save_model(td.sub("m.ckpt"), m);
    auto whole = slurp(td.sub("m.ckpt"));
    {
        std::ofstream f(td.sub("short.ckpt"), std::ios::binary);
        f << whole.substr(0, whole.size() - 10);
    }
    CHECK_THROWS_WITH(load_checkpoint(td.sub("short.ckpt")), ContainsSubstring("truncated"));

    CHECK_THROWS_AS(save_model(td.sub("bad.ckpt"), m, {{"bad key", "v"}}), std::invalid_argument);
    CHECK_THROWS_AS(save_model(td.sub("bad.ckpt"), m, {{"k", "line\nbreak"}}), std::invalid_argument);

    auto ck = load_checkpoint(td.sub("m.ckpt"));
    auto fewer = tiny_config();
    fewer.num_nodes = 3; // extra pooling grid => different parameter count
    StitchModel mf(fewer);
    CHECK_THROWS_WITH(apply_checkpoint(ck, mf.store), ContainsSubstring("parameter count mismatch"));

    auto wider = tiny_config();
    wider.node_dim = 4; // same parameter names, different shapes
    StitchModel mw(wider);
    CHECK_THROWS_WITH(apply_checkpoint(ck, mw.store), ContainsSubstring("shape mismatch"));

    ParamStore sa;
    sa.add("a", {2}, InitSpec::zero());
    sa.add("b", {2}, InitSpec::zero());
    save_checkpoint(td.sub("ab.ckpt"), sa, {});
    ParamStore sb;
    sb.add("b", {2}, InitSpec::zero());
    sb.add("a", {2}, InitSpec::zero());
    CHECK_THROWS_WITH(apply_checkpoint(load_checkpoint(td.sub("ab.ckpt")), sb),
                      ContainsSubstring("parameter order mismatch"));
}

// ---------------------------------------------------------------------------
// Training options and stage masks
// ---------------------------------------------------------------------------

TEST_CASE("training options take stage defaults and config overrides") {
    Config empty;
    auto a = TrainOptions::from_config("align", empty);
    CHECK(a.epochs == 150);
    CHECK(a.lr == 1e-4);
    CHECK(a.decay == 0.96);
    CHECK(a.batch == 4);
    CHECK(a.seed == 1);
    auto r = TrainOptions::from_config("recon", empty);
    CHECK(r.epochs == 10);
    CHECK(r.lr == 1e-4);
    auto j = TrainOptions::from_config("joint", empty);
    CHECK(j.epochs == 50);
    CHECK(j.lr == 5e-5);

    CHECK_THROWS_AS(TrainOptions::from_config("warmup", empty), std::invalid_argument);

    auto cfg = Config::from_string("train.epochs = 3\n"
                                   "train.lr = 0.5\n"
                                   "train.decay = 1\n"
                                   "train.batch = 2\n"
                                   "train.seed = 9\n"
                                   "loss.lambda1 = 7\n");
    auto o = TrainOptions::from_config("align", cfg);
    CHECK(o.epochs == 3);
    CHECK(o.lr == 0.5);
    CHECK(o.decay == 1.0);
    CHECK(o.batch == 2);
    CHECK(o.seed == 9);
    CHECK(o.weights.l1 == 7.0);
    CHECK(o.weights.l2 == 1.5); // untouched default

    CHECK_THROWS_AS(TrainOptions::from_config("align", Config::from_string("train.epochs = -1\n")),
                    std::invalid_argument);
    CHECK_THROWS_AS(TrainOptions::from_config("align", Config::from_string("train.batch = 0\n")),
                    std::invalid_argument);
}

TEST_CASE("stage masks freeze the complementary half of the model") {
    StitchModel m(tiny_config());
    auto names = [&](const std::vector<char>& mask, bool want) {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < m.store.size(); ++i)
            if ((mask[i] != 0) == want) out.push_back(m.store.at(i).name);
        return out;
    };

    auto align_mask = trainable_mask(m.store, "align");
    auto recon_mask = trainable_mask(m.store, "recon");
    auto joint_mask = trainable_mask(m.store, "joint");
    REQUIRE(align_mask.size() == m.store.size());

    bool saw_recon = false, saw_other = false;
    for (std::size_t i = 0; i < m.store.size(); ++i) {
        bool is_recon = m.store.at(i).name.rfind("recon.", 0) == 0;
        saw_recon = saw_recon || is_recon;
        saw_other = saw_other || !is_recon;
        CHECK(align_mask[i] == (is_recon ? 0 : 1));
        CHECK(recon_mask[i] == (is_recon ? 1 : 0));
        CHECK(joint_mask[i] == 1);
    }
    CHECK(saw_recon);
    CHECK(saw_other);
    CHECK(names(align_mask, false).size() + names(recon_mask, false).size() == m.store.size());
}

// ---------------------------------------------------------------------------
// Training behavior
// ---------------------------------------------------------------------------

TEST_CASE("zero-epoch and zero-rate training leave parameters untouched") {
    ScratchDir td("frozen");
    auto ds = load_dataset(make_tiny_dataset(td, 4, 24, 2.0, 61));

    StitchModel m(tiny_config());
    m.initialize(5);
    auto before = snapshot(m.store);

    TrainOptions opt;
    opt.stage = "align";
    opt.epochs = 0;
    std::ostringstream log;
    auto res = train(m, ds, opt, td.sub("e0.ckpt"), log);
    CHECK(res.epoch_loss.empty());
    CHECK_FALSE(res.aborted);
    CHECK(snapshot(m.store) == before);
    CHECK(std::filesystem::exists(td.sub("e0.ckpt"))); // initialization checkpoint

    opt.stage = "joint";
    opt.epochs = 1;
    opt.lr = 0.0;
    opt.batch = 2;
    auto res2 = train(m, ds, opt, td.sub("lr0.ckpt"), log);
    REQUIRE(res2.epoch_loss.size() == 1);
    CHECK(std::isfinite(res2.epoch_loss[0]));
    CHECK(res2.epoch_loss[0] > 0.0);
    CHECK(res2.skipped == 0);
    CHECK(snapshot(m.store) == before);

    // The per-epoch checkpoint reflects the (unchanged) parameters.
    auto back = load_model(td.sub("lr0.ckpt"));
    CHECK(snapshot(back.model->store) == before);
    CHECK(load_checkpoint(td.sub("lr0.ckpt")).meta_at("train.epoch") == "1");

    CHECK_THROWS_AS(train(m, {}, opt, td.sub("x.ckpt"), log), std::invalid_argument);
    opt.stage = "warmup";
    CHECK_THROWS_AS(train(m, ds, opt, td.sub("x.ckpt"), log), std::invalid_argument);
}

TEST_CASE("training is reproducible and reduces the alignment loss") {
    ScratchDir td("repro");
    auto ds = load_dataset(make_tiny_dataset(td, 4, 24, 2.0, 62));

    TrainOptions opt;
    opt.stage = "align";
    opt.epochs = 2;
    opt.lr = 1e-4;
    opt.batch = 2;
    opt.seed = 5;

    StitchModel a(tiny_config());
    a.initialize(7);
    std::ostringstream la;
    auto ra = train(a, ds, opt, td.sub("a.ckpt"), la);

    StitchModel b(tiny_config());
    b.initialize(7);
    std::ostringstream lb;
    auto rb = train(b, ds, opt, td.sub("b.ckpt"), lb);

    CHECK(la.str() == lb.str());
    CHECK(ra.epoch_loss == rb.epoch_loss);
    CHECK(slurp(td.sub("a.ckpt")) == slurp(td.sub("b.ckpt")));
    CHECK(la.str().find("stage align") != std::string::npos);
    CHECK(la.str().find("epoch   2") != std::string::npos);

    auto meta = load_checkpoint(td.sub("a.ckpt")).meta;
    CHECK(meta.at("train.stage") == "align");
    CHECK(meta.at("train.epoch") == "2");
    CHECK(meta.at("train.seed") == "5");

    // Parameters the align stage freezes must come through unchanged.
    StitchModel fresh(tiny_config());
    fresh.initialize(7);
    for (std::size_t i = 0; i < a.store.size(); ++i)
        if (a.store.at(i).name.rfind("recon.", 0) == 0)
            CHECK(a.store.at(i).value->data == fresh.store.at(i).value->data);
}

// ---------------------------------------------------------------------------
// Command-line interface
// ---------------------------------------------------------------------------

TEST_CASE("command line distinguishes usage errors from runtime failures") {
    ScratchDir td("cli_err");
    CHECK(run_cli("", td.sub("l0.txt")) == 2);
    CHECK(run_cli("frobnicate", td.sub("l1.txt")) == 2);
    CHECK(run_cli("--help", td.sub("l2.txt")) == 0);
    CHECK(run_cli("gen-syn --out " + td.sub("d"), td.sub("l3.txt")) == 2); // missing --src
    CHECK(run_cli("train --data x --stage warmup --ckpt-out y", td.sub("l4.txt")) == 2);
    CHECK(run_cli("train --data x --stage recon --ckpt-out y", td.sub("l5.txt")) == 2);
    CHECK_THAT(slurp(td.sub("l5.txt")), ContainsSubstring("requires an alignment checkpoint"));
    CHECK(run_cli("gradcheck --module bogus", td.sub("l6.txt")) == 2);

    // Failures past argument parsing report status 1.
    CHECK(run_cli("gen-syn --src " + td.sub("nosrc") + " --out " + td.sub("d") + " --count 1", td.sub("l7.txt")) == 1);
    CHECK_THAT(slurp(td.sub("l7.txt")), ContainsSubstring("not a directory"));
    CHECK(run_cli("eval --data " + td.sub("d") + " --ckpt " + td.sub("no.ckpt") + " --report " + td.sub("r.tsv"),
                  td.sub("l8.txt")) == 1);
}

TEST_CASE("command line generates datasets deterministically") {
    ScratchDir td("cli_gen");
    write_texture_corpus(td.sub("src"), 1, 64, 64, 19);
    std::string common = "gen-syn --src " + td.sub("src") + " --count 2 --size 24 --rho 2 --seed 5 --out ";
    REQUIRE(run_cli(common + td.sub("d1"), td.sub("g1.txt")) == 0);
    REQUIRE(run_cli(common + td.sub("d2"), td.sub("g2.txt")) == 0);
    CHECK_THAT(slurp(td.sub("g1.txt")), ContainsSubstring("wrote 2 samples"));
    CHECK(slurp(td.sub("d1/manifest.tsv")) == slurp(td.sub("d2/manifest.tsv")));
    CHECK(load_dataset(td.sub("d1")).size() == 2);
}

TEST_CASE("command line drives the full train-stitch-eval loop") {
    ScratchDir td("cli_e2e");
    write_texture_corpus(td.sub("src"), 1, 64, 64, 29);
    {
        std::ofstream f(td.sub("cfg.txt"));
        f << "model.preset = desk\n"
             "model.channels = 2,2,2,2\n"
             "model.nodes = 2\n"
             "model.levels = 2\n"
             "model.node_dim = 3\n"
             "model.head_hidden = 5\n"
             "model.offset_scale = 2\n"
             "model.sgr_key_side = 4\n"
             "train.epochs = 1\n"
             "train.batch = 2\n";
    }

    REQUIRE(run_cli("gen-syn --src " + td.sub("src") + " --out " + td.sub("ds") +
                        " --count 3 --size 24 --rho 2 --seed 11",
                    td.sub("gen.txt")) == 0);

    std::string train_common = "train --data " + td.sub("ds") + " --config " + td.sub("cfg.txt");
    REQUIRE(run_cli(train_common + " --stage align --ckpt-out " + td.sub("a.ckpt"), td.sub("ta.txt")) == 0);
    CHECK_THAT(slurp(td.sub("ta.txt")), ContainsSubstring("stage align") && ContainsSubstring("epoch   1"));
    REQUIRE(run_cli(train_common + " --stage recon --ckpt-in " + td.sub("a.ckpt") + " --ckpt-out " + td.sub("r.ckpt"),
                    td.sub("tr.txt")) == 0);
    REQUIRE(run_cli(train_common + " --stage joint --ckpt-in " + td.sub("r.ckpt") + " --ckpt-out " + td.sub("j.ckpt"),
                    td.sub("tj.txt")) == 0);

    std::string s0 = td.sub("ds") + "/s00000";
    REQUIRE(run_cli("stitch --ref-ir " + s0 + "/ref_ir.png --ref-vis " + s0 + "/ref_vis.png --tar-ir " + s0 +
                        "/tar_ir.png --tar-vis " + s0 + "/tar_vis.png --ckpt " + td.sub("j.ckpt") + " --out " +
                        td.sub("pano.png"),
                    td.sub("st.txt")) == 0);
    CHECK_THAT(slurp(td.sub("st.txt")), ContainsSubstring("panorama"));
    auto sc = read_h_sidecar(td.sub("pano.h.txt"));
    REQUIRE(sc.offsets.has_value());
    auto cv = canvas_for(sc.h, 24, 24, 24, 24);
    auto pano = read_png(td.sub("pano.png"));
    CHECK(pano->shape == std::vector<int>{1, cv.height, cv.width});

    REQUIRE(run_cli("eval --data " + td.sub("ds") + " --ckpt " + td.sub("j.ckpt") + " --report " + td.sub("rep.tsv"),
                    td.sub("ev.txt")) == 0);
    CHECK_THAT(slurp(td.sub("ev.txt")), ContainsSubstring("evaluated 3 samples"));
    auto rows = read_report(td.sub("rep.tsv"));
    REQUIRE(rows.size() == 4);
    CHECK(rows.back().id == "mean");
    for (const auto& r : rows) {
        REQUIRE(r.mse.has_value());
        REQUIRE(r.corner_err.has_value());
        CHECK(std::isfinite(r.sf));
        CHECK(*r.mse >= 0.0);
        CHECK(*r.corner_err >= 0.0);
    }

    // Evaluating an empty dataset is a runtime failure, not a crash.
    {
        std::filesystem::create_directories(td.path / "empty");
        std::ofstream f(td.sub("empty/manifest.tsv"), std::ios::binary);
        f << kManifestHeader << "\n";
    }
    CHECK(run_cli("eval --data " + td.sub("empty") + " --ckpt " + td.sub("j.ckpt") + " --report " + td.sub("e.tsv"),
                  td.sub("ee.txt")) == 1);
}

TEST_CASE("a fresh model stitches at the identity and a collapsed head falls back") {
    ScratchDir td("cli_id");
    write_texture_corpus(td.sub("src"), 1, 64, 64, 37);
    generate_set(td.sub("src"), td.sub("ds"), 1, 24, 2.0, 41);
    std::string s0 = td.sub("ds") + "/s00000";
    std::string images = " --ref-ir " + s0 + "/ref_ir.png --ref-vis " + s0 + "/ref_vis.png --tar-ir " + s0 +
                         "/tar_ir.png --tar-vis " + s0 + "/tar_vis.png";

    // Zero-initialized head: exact zero offsets, identity homography, and a
    // canvas that is just the common extent.
    StitchModel fresh(tiny_config());
    fresh.initialize(13);
    save_model(td.sub("fresh.ckpt"), fresh);
    REQUIRE(run_cli("stitch" + images + " --ckpt " + td.sub("fresh.ckpt") + " --out " + td.sub("id.png"),
                    td.sub("si.txt")) == 0);
    auto sc = read_h_sidecar(td.sub("id.h.txt"));
    CHECK(sc.h.m == Mat3::identity().m);
    REQUIRE(sc.offsets.has_value());
    for (double o : *sc.offsets) CHECK(o == 0.0);
    CHECK(read_png(td.sub("id.png"))->shape == std::vector<int>{1, 24, 24});

    // A head that collapses all four corners onto one point cannot yield a
    // homography; stitching falls back to the identity and reports it.
    std::array<double, 8> collapse = {11.5, 11.5, -11.5, 11.5, -11.5, -11.5, 11.5, -11.5};
    CHECK_THROWS_AS(
        [&] {
            auto h = offsets_to_h(collapse, 24, 24);
            canvas_for(h, 24, 24, 24, 24);
        }(),
        DegenerateHomography);

    StitchModel broken(tiny_config());
    broken.initialize(13);
    std::vector<double> bias(8);
    for (int i = 0; i < 8; ++i) bias[static_cast<std::size_t>(i)] = collapse[static_cast<std::size_t>(i)] / 2.0;
    set_param(broken, "align.head.fc2.b", bias); // fc2 weight stays zero
    save_model(td.sub("broken.ckpt"), broken);

    REQUIRE(run_cli("stitch" + images + " --ckpt " + td.sub("broken.ckpt") + " --out " + td.sub("fb.png"),
                    td.sub("sf.txt")) == 3);
    CHECK_THAT(slurp(td.sub("sf.txt")), ContainsSubstring("falling back to identity"));
    auto fb = read_h_sidecar(td.sub("fb.h.txt"));
    CHECK(fb.h.m == Mat3::identity().m);
    REQUIRE(fb.offsets.has_value());
    CHECK((*fb.offsets)[0] == 11.5);
    CHECK((*fb.offsets)[2] == -11.5);
    CHECK(read_png(td.sub("fb.png"))->shape == std::vector<int>{1, 24, 24});
}

TEST_CASE("command line gradient check passes for the fusion block") {
    ScratchDir td("cli_gc");
    REQUIRE(run_cli("gradcheck --module fuse --seed 3", td.sub("gc.txt")) == 0);
    auto out = slurp(td.sub("gc.txt"));
    CHECK_THAT(out, ContainsSubstring("ok"));
    CHECK(out.find("FAIL") == std::string::npos);
}
