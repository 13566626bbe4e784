#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "pseg/io.hpp"
#include "pseg/model.hpp"

using namespace pseg;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run_cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    int code = pseg::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("pseg_cli_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("box and range syntax") {
    CHECK(cli::parse_box("z=4,8,8,24,24") == BoundingBox2D{4, 8, 8, 24, 24});
    CHECK(cli::parse_box(" z = 0, 1,2,3,4 ") == BoundingBox2D{0, 1, 2, 3, 4});
    CHECK(cli::parse_range("2:7") == SliceRange{2, 7});
    CHECK_THROWS_AS(cli::parse_box("4,8,8,24,24"), Error);
    CHECK_THROWS_AS(cli::parse_box("z=4,8,8,24"), Error);
    CHECK_THROWS_AS(cli::parse_box("z=a,8,8,24,24"), Error);
    CHECK_THROWS_AS(cli::parse_range("7:2"), Error);
    CHECK_THROWS_AS(cli::parse_range("2-7"), Error);
}

TEST_CASE("usage errors exit 2 with JSON on stderr") {
    for (auto args : std::vector<std::vector<std::string>>{
             {}, {"frobnicate"}, {"segment", "--bogus"}, {"evaluate", "--pred", "a"}, {"--jobs", "0", "report"}}) {
        auto r = run_cli(args);
        CHECK(r.code == 2);
        auto j = json::parse(r.err);
        CHECK(j["error"] == "usage");
        CHECK(!j["message"].get<std::string>().empty());
    }
    auto help = run_cli({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>") != std::string::npos);
    CHECK(help.out.find("hitl-select") != std::string::npos);
    CHECK(run_cli({"segment", "--help"}).code == 0);
}

TEST_CASE("runtime errors exit 1 with the error kind") {
    TempDir t;
    auto r = run_cli({"segment", "--volume", t / "missing.vol", "--model", t / "m.ckpt", "--box", "z=1,0,0,2,2", "--out",
                  t / "o.vol"});
    CHECK(r.code == 1);
    CHECK(json::parse(r.err)["error"] == "io");

    std::ofstream(t / "bad.json") << "[\n  {\"volume_path\": \"a.vol\", \"mask_path\": \"b.vol\", \"modality\": \"ct\"},\n"
                                     "  {\"volume_path\": \"a.vol\", \"modality\": \"ct\"}\n]\n";
    auto m = run_cli({"train", "--manifest", t / "bad.json", "--out", t / "m.ckpt"});
    CHECK(m.code == 1);
    auto msg = json::parse(m.err)["message"].get<std::string>();
    CHECK(msg.find("bad.json:3") != std::string::npos);
}

TEST_CASE("synth, train, segment and evaluate compose") {
    TempDir t;
    auto s = run_cli({"--seed", "3", "synth", "--out-dir", t / "data", "--count", "2", "--slices", "12"});
    REQUIRE(s.code == 0);
    const auto manifest = json::parse(s.out)["manifest"].get<std::string>();

    std::vector<std::string> train_args{"--seed", "1", "train", "--manifest", manifest, "--epochs", "2",
                                        "--samples-per-epoch", "2", "--frames", "3", "--out"};
    auto a = train_args, b = train_args, c = train_args;
    a.push_back(t / "a.ckpt");
    b.push_back(t / "b.ckpt");
    c[1] = "2";
    c.push_back(t / "c.ckpt");
    REQUIRE(run_cli(a).code == 0);
    REQUIRE(run_cli(b).code == 0);
    REQUIRE(run_cli(c).code == 0);
    CHECK(slurp(t / "a.ckpt") == slurp(t / "b.ckpt"));
    CHECK(slurp(t / "a.ckpt") != slurp(t / "c.ckpt"));

    const auto ref = load_mask(t / "data/case000_mask.vol");
    const auto ext = z_extent(ref);
    const int z = (ext.top + ext.bottom) / 2;
    auto box = tight_box(extract_slice(ref, z), z);
    std::ostringstream bs;
    bs << "z=" << z << ',' << box.x_min << ',' << box.y_min << ',' << box.x_max << ',' << box.y_max;
    fs::create_directories(t / "pred");
    fs::create_directories(t / "ref");
    for (int k = 0; k < 2; ++k) {
        auto seg = run_cli({"segment", "--volume", t / "data/case000.vol", "--model", t / "a.ckpt", "--box", bs.str(),
                        "--range", std::to_string(ext.top) + ":" + std::to_string(ext.bottom), "--out",
                        t / ("pred/case00" + std::to_string(k) + ".vol"), "--ref", t / "data/case000_mask.vol"});
        REQUIRE(seg.code == 0);
        auto j = json::parse(seg.out);
        CHECK(j.contains("dsc"));
        CHECK(j.contains("nsd"));
        fs::copy_file(t / "data/case000_mask.vol", t / ("ref/case00" + std::to_string(k) + ".vol"));
    }
    CHECK(slurp(t / "pred/case000.vol") == slurp(t / "pred/case001.vol"));
    auto out = load_mask(t / "pred/case000.vol");
    for (int k = 0; k < out.dims().nz; ++k) {
        if (!ext.contains(k)) CHECK(extract_slice(out, k).foreground_count() == 0);
    }

    auto ev = run_cli({"evaluate", "--pred", t / "pred", "--ref", t / "ref", "--spacing-from-header"});
    REQUIRE(ev.code == 0);
    std::istringstream lines(ev.out);
    std::vector<std::string> rows;
    for (std::string l; std::getline(lines, l);) rows.push_back(l);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == "case_id,target,dsc,nsd");
    CHECK(rows[1].rfind("case000,fg,", 0) == 0);
    CHECK(rows[3].rfind("median,,", 0) == 0);
    CHECK(rows[4] == "iqr,,0.000000,0.000000");
    auto ev2 = run_cli({"--jobs", "2", "evaluate", "--pred", t / "pred", "--ref", t / "ref"});
    CHECK(ev2.out == ev.out);
    CHECK(run_cli({"evaluate", "--pred", t / "data", "--ref", t / "ref"}).code == 1);
}

TEST_CASE("hitl round, fine-tune and report") {
    TempDir t;
    REQUIRE(run_cli({"--seed", "5", "synth", "--out-dir", t / "data", "--count", "2", "--slices", "10", "--size", "32"}).code == 0);
    Model<float> m(ModelConfig{});
    save_checkpoint(t / "m.ckpt", m);

    auto r1 = run_cli({"hitl-round", "--manifest", t / "data/manifest.json", "--model", t / "m.ckpt", "--round", "1",
                   "--out-dir", t / "r1"});
    REQUIRE(r1.code == 0);
    auto j = json::parse(r1.out);
    CHECK(j["accepted"] == 2);
    for (const auto& c : j["cases"]) CHECK(c["status"] == "accepted");
    // the ground-truth annotator replaces every draft
    CHECK(load_mask(t / "r1/case000_mask.vol") == load_mask(t / "data/case000_mask.vol"));
    std::istringstream ev(slurp(t / "r1/round1_events.jsonl"));
    int n = 0;
    for (std::string l; std::getline(ev, l); ++n) CHECK(json::parse(l)["round"] == 1);
    CHECK(n >= 6);

    auto ft = run_cli({"--seed", "1", "finetune", "--model", t / "m.ckpt", "--manifest", t / "r1/accepted.json", "--round",
                   "2", "--out", t / "m2.ckpt", "--checkpoint-dir", t / "ck", "--samples-per-epoch", "1", "--frames", "2"});
    INFO(ft.err);
    REQUIRE(ft.code == 0);
    CHECK(json::parse(ft.out)["epochs"] == 6);
    CHECK(json::parse(ft.out)["lr_factor"] == 0.5);
    for (int e = 1; e <= 6; ++e) CHECK(fs::exists(t / ("ck/round2_epoch" + std::to_string(e) + ".ckpt")));

    auto rep = run_cli({"report", "--times", t / "r1/round1_times.json"});
    REQUIRE(rep.code == 0);
    CHECK(rep.out.rfind("round,cases,frames,", 0) == 0);
    CHECK(rep.out.find("\n1,2,") != std::string::npos);

    auto sel = run_cli({"hitl-select", "--manifest", t / "data/manifest.json", "--model", t / "m.ckpt"});
    REQUIRE(sel.code == 0);
    CHECK(sel.out.rfind("case_id,group,dsc_between_modes,selected\n", 0) == 0);
}

TEST_CASE("preprocess presets through files") {
    TempDir t;
    VoxelGrid g({4, 4, 4}, {1, 1, 1});
    double v = -300;
    for (auto& x : g.values()) x = (v += 9.0);
    save_volume(t / "raw.vol", g);
    auto r = run_cli({"preprocess", "--in", t / "raw.vol", "--out", t / "n.vol", "--preset", "abdomen"});
    REQUIRE(r.code == 0);
    auto n = load_volume(t / "n.vol");
    CHECK(n.kind() == IntensityKind::normalized_0_255);
    for (std::size_t i = 0; i < n.values().size(); ++i) {
        const double want = std::clamp((g.values()[i] + 160.0) / 400.0 * 255.0, 0.0, 255.0);
        CHECK(n.values()[i] == doctest::Approx(want).epsilon(1e-12));
    }
    CHECK(run_cli({"preprocess", "--in", t / "raw.vol", "--out", t / "x.vol", "--preset", "nope"}).code == 2);
    CHECK(run_cli({"preprocess", "--in", t / "raw.vol", "--out", t / "x.vol", "--preset", "brain", "--percentile"}).code == 2);
    CHECK(run_cli({"preprocess", "--in", t / "n.vol", "--out", t / "x.vol", "--preset", "brain"}).code == 1);
}
