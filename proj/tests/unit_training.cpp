#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <sstream>

#include "refdiff/training.hpp"

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

ImageTensor rand_image(int64_t c, int64_t h, int64_t w, uint64_t seed) {
    ImageTensor img = make_image(c, h, w);
    RandomSource rs(seed);
    for (double& v : img.values.data()) v = rs.uniform(-1.0, 1.0);
    return img;
}

// fixed pool of four tiny examples; draws pick one by index so the stream
// consumption per draw is exactly one uniform_int call
DrawFn pool_draw() {
    auto pool = std::make_shared<std::vector<TrainDraw>>();
    const char* prompts[4] = {"red dot", "blue ring", "green bar", ""};
    for (int i = 0; i < 4; ++i) {
        TrainDraw d;
        d.refs.push_back(rand_image(3, 8, 8, 100 + uint64_t(i)));
        d.target = rand_image(3, 8, 8, 200 + uint64_t(i));
        d.prompt = prompts[i];
        pool->push_back(std::move(d));
    }
    return [pool](RandomSource& rs) { return (*pool)[size_t(rs.uniform_int(0, 3))]; };
}

StagePlan tiny_plan(int64_t index, std::vector<std::string> trainable, int64_t steps,
                    int64_t batch = 1) {
    StagePlan plan;
    plan.index = index;
    plan.trainable = std::move(trainable);
    plan.cfg.steps = steps;
    plan.cfg.lr = 1e-3;
    plan.cfg.batch = batch;
    plan.draw = pool_draw();
    return plan;
}

std::map<std::string, std::vector<double>> values_snapshot(const ParamStore& ps) {
    std::map<std::string, std::vector<double>> out;
    ps.for_each([&](const Parameter& p) { out[p.name] = p.tensor.data(); });
    return out;
}

} // namespace

TEST_CASE("adam first step moves each coordinate by about -lr*sign(g)") {
    ParamStore ps;
    Parameter& w = ps.create("w", {4}, 5, 0.5);
    std::vector<double> before = w.tensor.data();

    ps.set_trainable({""});
    Tensor c = Tensor::from({4}, {1.0, -2.0, 3.0, -0.5});
    backward(sum(mul(w.tensor, c)));

    AdamConfig cfg;
    cfg.lr = 1e-3;
    AdamState st;
    adam_step(ps, cfg, st);

    // bias correction makes m_hat = g and v_hat = g^2 on step one, so the
    // update is -lr * g / (|g| + eps') which is within eps of -lr * sign(g)
    for (int i = 0; i < 4; ++i) {
        double g = c.data()[size_t(i)];
        double got = w.tensor.data()[size_t(i)] - before[size_t(i)];
        CHECK(got == doctest::Approx(-cfg.lr * (g > 0 ? 1.0 : -1.0)).epsilon(1e-4));
    }
    CHECK(st.step == 1);
    CHECK(st.slots.count("w") == 1);
    CHECK(st.slots.at("w").t == 1);
}

TEST_CASE("condition dropout frequencies match the two-coin scheme") {
    DropoutConfig cfg; // joint 0.05, text 0.05, image 0.05
    RandomSource rs(99);
    const int n = 400000;
    int both = 0, text_only = 0, image_only = 0;
    for (int i = 0; i < n; ++i) {
        DropoutDraw d = draw_condition_dropout(cfg, rs);
        if (d.drop_text && d.drop_image) ++both;
        else if (d.drop_text) ++text_only;
        else if (d.drop_image) ++image_only;
    }
    // joint coin first, then independent branch coins:
    // P(both) = 0.05 + 0.95*0.05*0.05, P(one side) = 0.95*0.05*0.95
    CHECK(std::abs(double(both) / n - 0.0523750) < 0.005);
    CHECK(std::abs(double(text_only) / n - 0.0451250) < 0.005);
    CHECK(std::abs(double(image_only) / n - 0.0451250) < 0.005);
}

TEST_CASE("stage filters select the documented parameter groups") {
    EncoderConfig enc;
    enc.layers = 4;
    enc.agg_blocks = 1;
    auto f1 = stage1_filters(enc);
    REQUIRE(f1.size() == 4);
    CHECK(f1[0] == ".adapter.");
    CHECK(f1[1] == "encoder.ref_tokens");
    CHECK(f1[2] == "encoder.proj_cond.");
    CHECK(f1[3] == "encoder.block3.");

    enc.agg_blocks = 2;
    auto f1b = stage1_filters(enc);
    REQUIRE(f1b.size() == 5);
    CHECK(f1b[3] == "encoder.block2.");
    CHECK(f1b[4] == "encoder.block3.");

    auto f23 = stage23_filters();
    CHECK(f23 == std::vector<std::string>{"encoder.", ".adapter.", ".lora."});
}

TEST_CASE("training only updates filtered parameters and starves the rest") {
    RefDiffModel model(tiny_cfg());
    model.install_adapters();
    auto before = values_snapshot(model.params);

    AdamState optim;
    StagePlan plan = tiny_plan(1, stage1_filters(model.cfg.encoder), 3);
    StageResult res = run_stage(model, optim, plan, 42, "", nullptr);
    REQUIRE(res.losses.size() == 3);
    for (double l : res.losses) CHECK(l > 0.0);

    auto is_trainable = [&](const std::string& name) {
        for (const auto& f : plan.trainable)
            if (name.find(f) != std::string::npos) return true;
        return false;
    };
    int64_t changed = 0, frozen_checked = 0;
    model.params.for_each([&](const Parameter& p) {
        if (is_trainable(p.name)) {
            // every adapter and aggregation weight received signal
            if (p.tensor.data() != before.at(p.name)) ++changed;
            CHECK(optim.slots.count(p.name) == 1);
        } else {
            ++frozen_checked;
            // frozen parameters are bit-identical and grew no optimizer state
            CHECK(p.tensor.data() == before.at(p.name));
            CHECK(optim.slots.count(p.name) == 0);
        }
    });
    CHECK(changed > 0);
    CHECK(frozen_checked > 0);
}

TEST_CASE("interrupted and uninterrupted runs produce bit-identical weights") {
    namespace fs = std::filesystem;
    const std::string ck = (fs::temp_directory_path() / "refdiff_resume_test").string();
    const int64_t total = 6, cut = 3;

    // straight-through run
    RefDiffModel a(tiny_cfg());
    a.install_adapters();
    AdamState oa;
    StagePlan plan = tiny_plan(2, stage23_filters(), total, 2);
    run_stage(a, oa, plan, 7, "", nullptr);

    // run to the cut, checkpoint there, then resume on a fresh model
    RefDiffModel b(tiny_cfg());
    b.install_adapters();
    AdamState ob;
    StagePlan half = plan;
    half.cfg.steps = cut;
    run_stage(b, ob, half, 7, ck, nullptr);

    RefDiffModel c(tiny_cfg());
    AdamState oc;
    auto info = c.load(ck + ".ckpt");
    REQUIRE(info.optim.has_value());
    CHECK(info.stage == 2);
    CHECK(info.step == cut);
    oc = *info.optim;
    CHECK(oc.step == ob.step);
    run_stage(c, oc, plan, 7, "", nullptr, info.step);

    auto va = values_snapshot(a.params);
    auto vc = values_snapshot(c.params);
    REQUIRE(va.size() == vc.size());
    for (const auto& [name, vals] : va) CHECK(vals == vc.at(name));
    CHECK(oc.step == oa.step);
    for (const auto& [name, mom] : oa.slots) {
        REQUIRE(oc.slots.count(name) == 1);
        CHECK(mom.m == oc.slots.at(name).m);
        CHECK(mom.v == oc.slots.at(name).v);
        CHECK(mom.t == oc.slots.at(name).t);
    }
    std::remove((ck + ".ckpt").c_str());
    std::remove((ck + ".ckpt.meta").c_str());
}

TEST_CASE("identical seeds give identical loss curves, different seeds do not") {
    RefDiffModel a(tiny_cfg());
    a.install_adapters();
    AdamState oa;
    StagePlan plan = tiny_plan(1, stage1_filters(a.cfg.encoder), 4);
    auto ra = run_stage(a, oa, plan, 11, "", nullptr);

    RefDiffModel b(tiny_cfg());
    b.install_adapters();
    AdamState ob;
    auto rb = run_stage(b, ob, plan, 11, "", nullptr);
    CHECK(ra.losses == rb.losses);

    RefDiffModel c(tiny_cfg());
    c.install_adapters();
    AdamState oc;
    auto rc = run_stage(c, oc, plan, 12, "", nullptr);
    CHECK(ra.losses != rc.losses);
}

TEST_CASE("loss log lines carry step, stage, loss and learning rate") {
    RefDiffModel model(tiny_cfg());
    model.install_adapters();
    AdamState optim;
    StagePlan plan = tiny_plan(3, stage23_filters(), 2);
    std::ostringstream csv;
    run_stage(model, optim, plan, 5, "", &csv);

    std::istringstream in(csv.str());
    std::string line;
    int64_t step = 0;
    while (std::getline(in, line)) {
        int64_t s, stage;
        double loss, lr;
        REQUIRE(std::sscanf(line.c_str(), "%ld,%ld,%lf,%lf", &s, &stage, &loss, &lr) == 4);
        CHECK(s == step);
        CHECK(stage == 3);
        CHECK(loss > 0.0);
        CHECK(lr == doctest::Approx(1e-3));
        ++step;
    }
    CHECK(step == 2);
}

TEST_CASE("bad stage arguments are rejected") {
    RefDiffModel model(tiny_cfg());
    AdamState optim;
    StagePlan plan = tiny_plan(1, stage23_filters(), 2);
    plan.cfg.steps = 0;
    CHECK_THROWS(run_stage(model, optim, plan, 1, "", nullptr));
    plan.cfg.steps = 2;
    CHECK_THROWS(run_stage(model, optim, plan, 1, "", nullptr, 5));
    plan.cfg.batch = 0;
    CHECK_THROWS(train_step(model, optim, plan, 1, 0));
    plan.cfg.batch = 1;
    plan.draw = nullptr;
    CHECK_THROWS(train_step(model, optim, plan, 1, 0));
}
