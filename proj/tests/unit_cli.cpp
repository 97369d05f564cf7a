#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "refdiff/cli.hpp"
#include "refdiff/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace refdiff;
namespace fs = std::filesystem;

namespace {

std::string scratch(const std::string& stem) {
    fs::path p = fs::temp_directory_path() / ("refdiff-cli-" + stem);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

// both streams are captured so expected failures stay quiet under ctest
int run(const std::vector<std::string>& args, std::string* err = nullptr) {
    std::stringstream outbuf, errbuf;
    auto* oldout = std::cout.rdbuf(outbuf.rdbuf());
    auto* olderr = std::cerr.rdbuf(errbuf.rdbuf());
    int code = run_cli(args);
    std::cout.rdbuf(oldout);
    std::cerr.rdbuf(olderr);
    if (err) *err = errbuf.str();
    return code;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE_MESSAGE(f.good(), "missing file: " << path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    f << text;
}

// one tiny end-to-end workspace shared by the cases below: a generated
// dataset, trained probe towers, and a short stage 1 run
struct Workspace {
    std::string arch_cfg;
    std::string probes_cfg;
    std::string data;
    std::string run;
};

const Workspace& shared() {
    static Workspace w = [] {
        Workspace s;
        std::string root = scratch("shared");
        s.arch_cfg = root + "/arch.cfg";
        s.probes_cfg = root + "/probes.cfg";
        s.data = root + "/data";
        s.run = root + "/run";
        write_text(s.arch_cfg,
                   "# tiny geometry so every invocation stays fast\n"
                   "encoder.layers=2\n"
                   "encoder.dim=16\n"
                   "encoder.heads=2\n"
                   "encoder.patch=4\n"
                   "encoder.max_image_side=16\n"
                   "encoder.max_text_len=64\n"
                   "encoder.n_ref=4\n"
                   "encoder.cond_dim=12\n"
                   "encoder.max_refs=8\n"
                   "encoder.max_seq=256\n"
                   "denoiser.blocks=2\n"
                   "denoiser.dim=16\n"
                   "denoiser.heads=2\n"
                   "denoiser.patch=2\n"
                   "denoiser.time_dim=8\n"
                   "denoiser.cond_dim=12\n"
                   "denoiser.max_side=16\n"
                   "model.timesteps=40\n");
        write_text(s.probes_cfg,
                   "probe.dim=16\n"
                   "probe.heads=2\n"
                   "probe.blocks=1\n"
                   "probe.patch=4\n"
                   "probe.embed=8\n"
                   "probe.max_side=16\n"
                   "probe.max_text=64\n");
        REQUIRE(run({"dataset", "--out", s.data, "--seed", "9", "--groups", "6",
                     "--min-group-size", "2", "--max-group-size", "4", "--min-side", "12",
                     "--max-side", "16", "--held-out", "1", "--held-in", "1",
                     "--stressor-pairs", "1"}) == 0);
        REQUIRE(run({"train", "--stage", "probes", "--data", s.data, "--out", s.run, "--config",
                     s.probes_cfg, "--steps", "6", "--batch", "4"}) == 0);
        REQUIRE(run({"train", "--stage", "1", "--data", s.data, "--out", s.run, "--config",
                     s.arch_cfg, "--steps", "4", "--seed", "5"}) == 0);
        return s;
    }();
    return w;
}

} // namespace

TEST_CASE("cli: usage and configuration errors exit 1") {
    std::string d = scratch("usage");
    std::string err;
    CHECK(run({"dataset"}, &err) == 1);     // missing required --out
    CHECK(run({"frobnicate"}, &err) == 1);  // unknown subcommand
    CHECK(run({"dataset", "--out", d, "--set", "dataset.grops=5"}, &err) == 1);
    CHECK(err.find("unknown key") != std::string::npos);
    CHECK(run({"dataset", "--out", d, "--min-group-size", "1"}, &err) == 1);
    CHECK(run({"dataset", "--out", d, "--groups", "3", "--held-out", "5"}, &err) == 1);
    CHECK(run({"train", "--stage", "9", "--data", d, "--out", d}, &err) == 1);
    CHECK(run({"ablate", "--what", "bogus", "--out", d}, &err) == 1);

    std::string broken = d + "/broken.cfg";
    write_text(broken, "no equals sign here\n");
    CHECK(run({"dataset", "--out", d, "--config", broken}, &err) == 1);
    CHECK(err.find("is not key=value") != std::string::npos);
}

TEST_CASE("cli: dataset generation is deterministic and self-auditing") {
    std::string d1 = scratch("data1"), d2 = scratch("data2");
    std::vector<std::string> gen = {"dataset",          "--seed",     "9",  "--groups", "6",
                                    "--min-group-size", "2",          "--max-group-size",
                                    "4",                "--min-side", "12", "--max-side",
                                    "16",               "--held-out", "1",  "--held-in",
                                    "1",                "--stressor-pairs", "1"};
    auto g1 = gen;
    g1.insert(g1.end(), {"--out", d1});
    auto g2 = gen;
    g2.insert(g2.end(), {"--out", d2});
    CHECK(run(g1) == 0);
    CHECK(run(g2) == 0);
    CHECK(slurp(d1 + "/manifest.jsonl") == slurp(d2 + "/manifest.jsonl"));
    CHECK(run({"audit", "--data", d1}) == 0);

    std::string rc = slurp(d1 + "/resolved.cfg");
    CHECK(rc.find("dataset.groups=6") != std::string::npos);
    CHECK(rc.find("split.held_out=1") != std::string::npos);
}

TEST_CASE("cli: audit rejects cross-group duplicate content") {
    const Workspace& w = shared();
    std::vector<GroupRecord> groups = load_dataset(w.data);
    REQUIRE(groups.size() >= 2);
    groups[1].images[0].image = groups[0].images[0].image;
    std::string dc = scratch("corrupt");
    save_dataset(dc, groups);
    std::string err;
    CHECK(run({"audit", "--data", dc}, &err) == 2);
    CHECK(err.find("audit failed") != std::string::npos);
}

TEST_CASE("cli: stage prerequisites, zero-step identity, finished resume") {
    const Workspace& w = shared();

    // stage 2 in a fresh directory has no stage 1 checkpoint to build on
    std::string fresh = scratch("fresh");
    std::string err;
    CHECK(run({"train", "--stage", "2", "--data", w.data, "--out", fresh, "--config", w.arch_cfg},
              &err) == 2);
    CHECK(err.find(fresh + "/stage1.ckpt") != std::string::npos);

    // zero steps forwards the input checkpoint bit for bit
    std::string z = scratch("zero");
    CHECK(run({"train", "--stage", "2", "--data", w.data, "--out", z, "--config", w.arch_cfg,
               "--init", w.run + "/stage1.ckpt", "--steps", "0"}) == 0);
    CHECK(slurp(z + "/stage2.ckpt") == slurp(w.run + "/stage1.ckpt"));

    // resuming a finished stage leaves its checkpoint unchanged
    std::string before = slurp(w.run + "/stage1.ckpt");
    CHECK(run({"train", "--stage", "1", "--data", w.data, "--out", w.run, "--config", w.arch_cfg,
               "--steps", "4", "--seed", "5", "--resume"}) == 0);
    CHECK(slurp(w.run + "/stage1.ckpt") == before);

    std::string log = slurp(w.run + "/stage1_loss.csv");
    CHECK(log.rfind("step,stage,loss,lr", 0) == 0);

    // oversized training canvas is caught before any work happens
    std::string t = scratch("square");
    CHECK(run({"train", "--stage", "1", "--data", w.data, "--out", t, "--config", w.arch_cfg,
               "--steps", "1", "--set", "train.square=32"},
              &err) == 1);
    CHECK(err.find("train.square") != std::string::npos);
}

TEST_CASE("cli: sampling is deterministic, reference-sensitive, echoes defaults") {
    const Workspace& w = shared();
    std::vector<std::string> cmd = {"sample", "--checkpoint", w.run + "/stage1.ckpt",
                                    "--prompt", "a red circle on plain",
                                    "--seed",   "3",
                                    "--count",  "2"};
    std::string s1 = scratch("samp1"), s2 = scratch("samp2");
    auto c1 = cmd;
    c1.insert(c1.end(), {"--out", s1});
    auto c2 = cmd;
    c2.insert(c2.end(), {"--out", s2});
    CHECK(run(c1) == 0);
    CHECK(run(c2) == 0);
    CHECK(slurp(s1 + "/sample_000.ppm") == slurp(s2 + "/sample_000.ppm"));
    CHECK(slurp(s1 + "/sample_001.ppm") == slurp(s2 + "/sample_001.ppm"));
    // each image in a batch draws its own noise
    CHECK(slurp(s1 + "/sample_000.ppm") != slurp(s1 + "/sample_001.ppm"));

    std::string rc = slurp(s1 + "/resolved.cfg");
    CHECK(rc.find("sample.steps=30") != std::string::npos);
    CHECK(rc.find("sample.scale=7.5") != std::string::npos);

    // conditioning on a reference image changes the output bytes
    std::string ppm;
    std::vector<std::string> candidates;
    for (const auto& e : fs::directory_iterator(w.data + "/images"))
        if (e.path().extension() == ".ppm") candidates.push_back(e.path().string());
    REQUIRE(!candidates.empty());
    std::sort(candidates.begin(), candidates.end());
    ppm = candidates.front();

    std::string s3 = scratch("samp3");
    auto c3 = cmd;
    c3.insert(c3.end(), {"--out", s3, "--ref", ppm});
    CHECK(run(c3) == 0);
    CHECK(slurp(s3 + "/sample_000.ppm") != slurp(s1 + "/sample_000.ppm"));
}

TEST_CASE("cli: evaluation writes a row per eval target plus the aggregate") {
    const Workspace& w = shared();
    std::string e = scratch("eval");
    CHECK(run({"eval", "--checkpoint", w.run + "/stage1.ckpt", "--data", w.data, "--probe-a",
               w.run + "/probe_a.ckpt", "--probe-b", w.run + "/probe_b.ckpt", "--out", e,
               "--split", "held-out", "--steps", "3", "--config", w.probes_cfg}) == 0);

    std::vector<GroupRecord> groups = load_dataset(w.data);
    size_t expected = 0;
    for (const auto& g : groups)
        if (g.split == "held-out")
            for (const auto& im : g.images) expected += im.eval_target ? 1 : 0;
    REQUIRE(expected > 0);

    std::string csv = slurp(e + "/metrics.csv");
    CHECK(size_t(std::count(csv.begin(), csv.end(), '\n')) == expected + 2);
    CHECK(csv.rfind("group,index,split,refs,cond_rows,sim_target,sim_text,sim_view", 0) == 0);
    CHECK(csv.find("\nmean,,held-out") != std::string::npos);
    CHECK(fs::exists(e + "/timing.csv"));
    CHECK(slurp(e + "/resolved.cfg").find("eval.steps=3") != std::string::npos);

    // unknown split and mismatched probe weights are runtime failures
    std::string err;
    CHECK(run({"eval", "--checkpoint", w.run + "/stage1.ckpt", "--data", w.data, "--probe-a",
               w.run + "/probe_a.ckpt", "--probe-b", w.run + "/probe_b.ckpt", "--out", e,
               "--split", "bogus", "--steps", "3", "--config", w.probes_cfg},
              &err) == 2);
    CHECK(run({"eval", "--checkpoint", w.run + "/stage1.ckpt", "--data", w.data, "--probe-a",
               w.run + "/probe_b.ckpt", "--probe-b", w.run + "/probe_a.ckpt", "--out", e,
               "--split", "held-out", "--steps", "3", "--config", w.probes_cfg},
              &err) == 2);
}

TEST_CASE("cli: token ablation runs from architecture settings alone") {
    const Workspace& w = shared();
    std::string o = scratch("ablate");
    CHECK(run({"ablate", "--what", "tokens", "--out", o, "--config", w.arch_cfg, "--n-refs",
               "2,4", "--agg-blocks", "1", "--k-refs", "2", "--side", "8"}) == 0);
    std::string csv = slurp(o + "/tokens.csv");
    CHECK(csv.rfind("n_ref,agg_blocks,cond_rows,encoder_macs,wall_seconds", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
