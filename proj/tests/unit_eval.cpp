#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "refdiff/evalmetrics.hpp"

using namespace refdiff;

namespace {

ModelConfig tiny_cfg(uint64_t seed = 1) {
    ModelConfig mc;
    mc.encoder.layers = 2;
    mc.encoder.dim = 16;
    mc.encoder.heads = 2;
    mc.encoder.patch = 4;
    mc.encoder.max_image_side = 16;
    mc.encoder.n_ref = 4;
    mc.encoder.cond_dim = 12;
    mc.encoder.agg_blocks = 1;
    mc.encoder.max_seq = 256;
    mc.denoiser.blocks = 2;
    mc.denoiser.dim = 16;
    mc.denoiser.heads = 2;
    mc.denoiser.patch = 2;
    mc.denoiser.time_dim = 8;
    mc.denoiser.cond_dim = 12;
    mc.denoiser.max_side = 16;
    mc.timesteps = 20;
    mc.init_seed = seed;
    return mc;
}

ProbeSet toy_probes() {
    ProbeSet p;
    auto mean_color = [](const ImageTensor& img) {
        std::vector<double> e(size_t(img.channels), 0.0);
        for (int64_t c = 0; c < img.channels; c++) {
            double s = 0;
            for (int64_t y = 0; y < img.height; y++)
                for (int64_t x = 0; x < img.width; x++) s += img.at(c, y, x);
            e[size_t(c)] = s / double(img.height * img.width);
        }
        return e;
    };
    p.a_image = mean_color;
    p.b_image = mean_color;
    p.a_text = [](const std::string&) { return std::vector<double>{1.0, 1.0, 1.0}; };
    return p;
}

std::vector<GroupRecord> split_data(uint64_t seed) {
    DatasetSpec spec;
    spec.groups = 8;
    spec.min_group = 2;
    spec.max_group = 4;
    spec.min_side = 12;
    spec.max_side = 16;
    auto groups = generate_dataset(spec, seed);
    return make_splits(std::move(groups), 2, 2, seed + 1);
}

EvalConfig fast_eval() {
    EvalConfig cfg;
    cfg.guidance.steps = 4;
    cfg.seed = 5;
    return cfg;
}

std::string temp_file(const char* stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("evaluation covers every eval target and is deterministic") {
    RefDiffModel model(tiny_cfg());
    auto groups = split_data(61);
    ProbeSet probes = toy_probes();

    size_t held_out_targets = 0;
    for (const auto& g : groups)
        if (g.split == "held-out")
            for (const auto& im : g.images) held_out_targets += im.eval_target ? 1 : 0;
    REQUIRE(held_out_targets > 0);

    MetricsReport r1 = evaluate(model, groups, "held-out", fast_eval(), probes);
    CHECK(r1.cases.size() == held_out_targets);
    for (const CaseResult& c : r1.cases) {
        CHECK(c.split == "held-out");
        CHECK(c.refs >= 1);
        CHECK(c.cond_rows == 4); // joint encoding always yields n_ref rows
        CHECK(c.sim_target >= -1.0);
        CHECK(c.sim_target <= 1.0);
    }
    // rows come out sorted by (group, index)
    for (size_t i = 1; i < r1.cases.size(); i++) {
        bool ordered = r1.cases[i - 1].group < r1.cases[i].group ||
                       (r1.cases[i - 1].group == r1.cases[i].group &&
                        r1.cases[i - 1].index < r1.cases[i].index);
        CHECK(ordered);
    }
    double mt = 0;
    for (const CaseResult& c : r1.cases) mt += c.sim_target;
    CHECK(r1.sim_target == doctest::Approx(mt / double(r1.cases.size())).epsilon(1e-12));
    CHECK(r1.encoder_macs > 0);
    CHECK(r1.denoiser_macs > 0);

    MetricsReport r2 = evaluate(model, groups, "held-out", fast_eval(), probes);
    REQUIRE(r2.cases.size() == r1.cases.size());
    for (size_t i = 0; i < r1.cases.size(); i++) {
        CHECK(r1.cases[i].sim_target == r2.cases[i].sim_target);
        CHECK(r1.cases[i].sim_text == r2.cases[i].sim_text);
        CHECK(r1.cases[i].sim_view == r2.cases[i].sim_view);
    }

    // held-in groups expose exactly one target each
    MetricsReport rin = evaluate(model, groups, "held-in", fast_eval(), probes);
    CHECK(rin.cases.size() == 2);
}

TEST_CASE("metric csv bytes are stable, timing lives apart") {
    RefDiffModel model(tiny_cfg());
    auto groups = split_data(67);
    ProbeSet probes = toy_probes();
    MetricsReport r = evaluate(model, groups, "held-out", fast_eval(), probes);

    std::string p1 = temp_file("eval_m1.csv"), p2 = temp_file("eval_m2.csv");
    write_metrics_csv(r, p1);
    write_metrics_csv(evaluate(model, groups, "held-out", fast_eval(), probes), p2);
    std::string text = slurp(p1);
    CHECK(text == slurp(p2));
    CHECK(text.rfind("group,index,split,refs,cond_rows,sim_target,sim_text,sim_view\n", 0) == 0);
    CHECK(text.find("mean,,held-out") != std::string::npos);
    CHECK(text.find("wall") == std::string::npos);

    std::string pt = temp_file("eval_t.csv");
    write_timing_csv(r, pt);
    std::string timing = slurp(pt);
    CHECK(timing.rfind("split,cases,wall_seconds,encoder_macs,denoiser_macs\n", 0) == 0);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    std::remove(pt.c_str());
}

TEST_CASE("evaluation rejects bad splits and incomplete probes") {
    RefDiffModel model(tiny_cfg());
    auto groups = split_data(71);
    ProbeSet probes = toy_probes();
    CHECK_THROWS_AS((void)evaluate(model, groups, "validation", fast_eval(), probes),
                    std::invalid_argument);
    // train groups exist but expose no eval targets
    CHECK_THROWS_AS((void)evaluate(model, groups, "train", fast_eval(), probes),
                    std::invalid_argument);
    ProbeSet broken = toy_probes();
    broken.a_text = nullptr;
    CHECK_THROWS_AS((void)evaluate(model, groups, "held-out", fast_eval(), broken),
                    std::invalid_argument);
}

TEST_CASE("reference scaling grows the encoder and leaves the denoiser fixed") {
    RefDiffModel model(tiny_cfg());
    model.install_adapters(); // image rows only reach the denoiser through adapters
    auto points = scale_references(model, {1, 2, 4}, 16, "a sweep prompt");
    REQUIRE(points.size() == 3);
    for (const ScalePoint& p : points) CHECK(p.cond_rows == 4);
    CHECK(points[0].denoiser_macs == points[1].denoiser_macs);
    CHECK(points[1].denoiser_macs == points[2].denoiser_macs);
    CHECK(points[0].encoder_macs < points[1].encoder_macs);
    CHECK(points[1].encoder_macs < points[2].encoder_macs);

    // the stacked baseline hands the denoiser K times the rows instead
    ModelConfig cc = tiny_cfg();
    cc.agg = AggMode::concat;
    RefDiffModel cat(cc);
    cat.install_adapters();
    auto cpoints = scale_references(cat, {1, 2, 4}, 16, "a sweep prompt");
    CHECK(cpoints[0].cond_rows == 4);
    CHECK(cpoints[1].cond_rows == 8);
    CHECK(cpoints[2].cond_rows == 16);
    CHECK(cpoints[0].denoiser_macs < cpoints[2].denoiser_macs);

    CHECK_THROWS_AS((void)scale_references(model, {0}, 16, "p"), std::invalid_argument);
    CHECK_THROWS_AS((void)scale_references(model, {}, 16, "p"), std::invalid_argument);

    std::string ps = temp_file("scale.csv");
    write_scale_csv(points, ps);
    std::string text = slurp(ps);
    CHECK(text.rfind("refs,cond_rows,encoder_macs,denoiser_macs\n", 0) == 0);
    std::remove(ps.c_str());
}

TEST_CASE("token sweep reports rows equal to the token count and monotone cost") {
    auto points = token_sweep(tiny_cfg(), {2, 4, 8}, {1, 2}, 2, 16);
    REQUIRE(points.size() == 6);
    for (const TokenPoint& p : points) {
        CHECK(p.cond_rows == p.n_ref);
        CHECK(p.encoder_macs > 0);
        CHECK(p.wall_seconds >= 0.0);
    }
    // within one aggregation depth, more tokens cost more
    for (size_t base = 0; base < points.size(); base += 3) {
        CHECK(points[base].encoder_macs < points[base + 1].encoder_macs);
        CHECK(points[base + 1].encoder_macs < points[base + 2].encoder_macs);
    }
    CHECK_THROWS_AS((void)token_sweep(tiny_cfg(), {}, {1}, 2, 16), std::invalid_argument);

    std::string pt = temp_file("tokens.csv");
    write_token_csv(points, pt);
    CHECK(slurp(pt).rfind("n_ref,agg_blocks,cond_rows,encoder_macs,wall_seconds\n", 0) == 0);
    std::remove(pt.c_str());
}

TEST_CASE("per-group finetuning is impossible on eval-only groups by design") {
    RefDiffModel model(tiny_cfg());
    auto groups = split_data(73);
    ProbeSet probes = toy_probes();
    std::string ck = temp_file("eval_base.ckpt");
    model.save(ck);

    LoraBaselineConfig lc;
    lc.steps = 2;
    lc.guidance.steps = 3;

    auto held_out_rows = lora_baseline(tiny_cfg(), ck, groups, "held-out", lc, probes);
    REQUIRE(!held_out_rows.empty());
    for (const LoraCaseRow& r : held_out_rows) CHECK_FALSE(r.trained);

    auto held_in_rows = lora_baseline(tiny_cfg(), ck, groups, "held-in", lc, probes);
    REQUIRE(held_in_rows.size() == 2);
    for (const LoraCaseRow& r : held_in_rows) {
        CHECK(r.trained);
        CHECK(r.sim_target >= -1.0);
        CHECK(r.sim_target <= 1.0);
    }

    std::string pl = temp_file("lora.csv");
    write_lora_csv(held_out_rows, pl);
    std::string text = slurp(pl);
    CHECK(text.rfind("group,index,status,sim_target,sim_text,sim_view\n", 0) == 0);
    CHECK(text.find("untrainable") != std::string::npos);
    CHECK(text.find(",lora,") == std::string::npos);
    write_lora_csv(held_in_rows, pl);
    CHECK(slurp(pl).find(",lora,") != std::string::npos);

    std::remove(pl.c_str());
    std::remove(ck.c_str());
    std::remove((ck + ".meta").c_str());
}
