#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "refdiff/probes.hpp"

using namespace refdiff;

namespace {

ProbeConfig tiny_cfg() {
    ProbeConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.patch = 4;
    cfg.embed = 8;
    cfg.max_side = 16;
    cfg.max_text = 64;
    cfg.init_seed = 7;
    return cfg;
}

DatasetSpec tiny_data() {
    DatasetSpec spec;
    spec.groups = 6;
    spec.min_group = 2;
    spec.max_group = 4;
    spec.min_side = 12;
    spec.max_side = 16;
    return spec;
}

double norm_of(const Tensor& row) {
    double s = 0.0;
    for (double v : row.data()) s += v * v;
    return std::sqrt(s);
}

double mean_range(const std::vector<double>& v, size_t lo, size_t hi) {
    return std::accumulate(v.begin() + lo, v.begin() + hi, 0.0) / double(hi - lo);
}

std::string temp_path(const char* stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

} // namespace

TEST_CASE("probe embeddings live on the unit sphere and are deterministic") {
    ImageTextProbe a(tiny_cfg());
    ImageOnlyProbe b(tiny_cfg());
    auto groups = generate_dataset(tiny_data(), 11);
    const ImageTensor& img = groups[0].images[0].image;

    Tensor e1 = a.embed_image(img);
    Tensor e2 = a.embed_image(img);
    CHECK(e1.shape() == Shape{1, 8});
    CHECK(norm_of(e1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(e1.data() == e2.data());

    Tensor t1 = a.embed_text(groups[0].images[0].caption);
    CHECK(t1.shape() == Shape{1, 8});
    CHECK(norm_of(t1) == doctest::Approx(1.0).epsilon(1e-6));

    Tensor u1 = b.embed(img);
    CHECK(u1.shape() == Shape{1, 8});
    CHECK(norm_of(u1) == doctest::Approx(1.0).epsilon(1e-6));

    // distinct towers should not agree by accident
    CHECK(norm_of(sub(e1, u1)) > 1e-6);
}

TEST_CASE("oversized and ragged frames are normalized before patching") {
    ImageTextProbe a(tiny_cfg());
    ImageTensor wide = make_image(3, 9, 40, 0.25); // long side over max_side, not a patch multiple
    Tensor e = a.embed_image(wide);
    CHECK(e.shape() == Shape{1, 8});
    CHECK(norm_of(e) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK_THROWS_AS((void)a.embed_image(make_image(1, 8, 8)), std::invalid_argument);
}

TEST_CASE("text ids reject empty or oversized input and bucket high bytes") {
    ImageTextProbe a(tiny_cfg());
    CHECK_THROWS_AS((void)a.embed_text(""), std::invalid_argument);
    CHECK_THROWS_AS((void)a.embed_text(std::string(65, 'x')), std::invalid_argument);
    // bytes above the vocab fall into one unknown bucket
    std::string hi1 = "a photo of \xC3\xA9";
    std::string hi2 = "a photo of \xC3\xBC";
    CHECK(a.embed_text(hi1).data() == a.embed_text(hi2).data());
    CHECK(a.embed_text(hi1).data() != a.embed_text("a photo of xx").data());
}

TEST_CASE("config validation rejects inconsistent towers") {
    ProbeConfig bad = tiny_cfg();
    bad.dim = 15;
    CHECK_THROWS_AS(ImageTextProbe{bad}, std::invalid_argument);
    bad = tiny_cfg();
    bad.max_side = 18;
    CHECK_THROWS_AS(ImageOnlyProbe{bad}, std::invalid_argument);
    bad = tiny_cfg();
    bad.temperature = 0.0;
    CHECK_THROWS_AS(ImageTextProbe{bad}, std::invalid_argument);
}

TEST_CASE("augmentation stays inside the frame and the value range") {
    auto groups = generate_dataset(tiny_data(), 13);
    const ImageTensor& img = groups[1].images[0].image;
    RandomSource rs(99);
    bool saw_flip_or_crop = false;
    for (int i = 0; i < 100; i++) {
        ImageTensor v = ImageOnlyProbe::augment(img, rs);
        CHECK(v.channels == 3);
        CHECK(v.height >= 4);
        CHECK(v.height <= img.height);
        CHECK(v.width >= 4);
        CHECK(v.width <= img.width);
        for (double x : v.values.data()) {
            CHECK(x >= -1.0);
            CHECK(x <= 1.0);
        }
        if (v.height != img.height || v.width != img.width ||
            image_hash(v) != image_hash(img))
            saw_flip_or_crop = true;
    }
    CHECK(saw_flip_or_crop);

    RandomSource r1(5), r2(5);
    CHECK(image_hash(ImageOnlyProbe::augment(img, r1)) ==
          image_hash(ImageOnlyProbe::augment(img, r2)));
}

TEST_CASE("probe pool collects exactly the training-visible images") {
    auto groups = make_splits(generate_dataset(tiny_data(), 17), 1, 1, 23);
    size_t visible = 0;
    for (const auto& g : groups) visible += training_visible(g).size();
    ProbePool pool(groups);
    CHECK(pool.items.size() == visible);
    for (const RefImage* r : pool.items) CHECK_FALSE(r->eval_target);

    std::vector<GroupRecord> starved(1);
    starved[0].id = 0;
    starved[0].split = "held-out";
    CHECK_THROWS_AS(ProbePool{starved}, std::invalid_argument);
}

TEST_CASE("contrastive training reduces both probe losses and is reproducible") {
    auto groups = generate_dataset(tiny_data(), 19);
    ProbePool pool(groups);
    ProbeTrainConfig tc;
    tc.steps = 40;
    tc.batch = 4;
    tc.lr = 2e-3;

    ImageTextProbe a(tiny_cfg());
    auto la = train_image_text_probe(a, pool, tc, 31);
    REQUIRE(la.size() == 40);
    CHECK(mean_range(la, 30, 40) < mean_range(la, 0, 10));

    ImageOnlyProbe b(tiny_cfg());
    auto lb = train_image_only_probe(b, pool, tc, 37);
    REQUIRE(lb.size() == 40);
    CHECK(mean_range(lb, 30, 40) < mean_range(lb, 0, 10));

    ImageTextProbe a2(tiny_cfg());
    auto la2 = train_image_text_probe(a2, pool, tc, 31);
    CHECK(la == la2);
    CHECK(a.embed_image(pool.items[0]->image).data() ==
          a2.embed_image(pool.items[0]->image).data());
}

TEST_CASE("a trained probe groups same-topic images together") {
    auto groups = generate_dataset(tiny_data(), 29);
    ProbePool pool(groups);
    ProbeTrainConfig tc;
    tc.steps = 30;
    tc.batch = 4;
    ImageOnlyProbe b(tiny_cfg());
    train_image_only_probe(b, pool, tc, 41);

    ImageTextProbe a(tiny_cfg());
    ProbeSet set = probe_set(a, b);
    std::vector<std::vector<double>> emb;
    std::vector<int64_t> owner;
    for (const auto& g : groups)
        for (const auto& im : g.images) {
            emb.push_back(set.b_image(im.image));
            owner.push_back(g.id);
        }
    double same = 0.0, cross = 0.0;
    int64_t n_same = 0, n_cross = 0;
    for (size_t i = 0; i < emb.size(); i++)
        for (size_t j = i + 1; j < emb.size(); j++) {
            double c = cosine(emb[i], emb[j]);
            if (owner[i] == owner[j]) {
                same += c;
                n_same++;
            } else {
                cross += c;
                n_cross++;
            }
        }
    REQUIRE(n_same > 0);
    REQUIRE(n_cross > 0);
    CHECK(same / double(n_same) > cross / double(n_cross));
}

TEST_CASE("probe set closures return unit vectors without touching the tape") {
    ImageTextProbe a(tiny_cfg());
    ImageOnlyProbe b(tiny_cfg());
    ProbeSet set = probe_set(a, b);
    auto groups = generate_dataset(tiny_data(), 43);
    const RefImage& r = groups[0].images[0];

    std::vector<double> ia = set.a_image(r.image);
    std::vector<double> ta = set.a_text(r.caption);
    std::vector<double> ib = set.b_image(r.image);
    CHECK(ia.size() == 8);
    CHECK(ta.size() == 8);
    CHECK(ib.size() == 8);
    CHECK(cosine(ia, ia) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(cosine(ib, ib) == doctest::Approx(1.0).epsilon(1e-9));

    // the closures run inference only; gradients must stay clear
    bool any_grad = false;
    a.params.for_each([&](const Parameter& p) {
        for (double g : p.tensor.grad())
            if (g != 0.0) any_grad = true;
    });
    CHECK_FALSE(any_grad);
}

TEST_CASE("probe checkpoints round-trip exactly and refuse other architectures") {
    auto groups = generate_dataset(tiny_data(), 47);
    ProbePool pool(groups);
    ProbeTrainConfig tc;
    tc.steps = 6;
    tc.batch = 3;

    ImageTextProbe a(tiny_cfg());
    train_image_text_probe(a, pool, tc, 53);
    std::string pa = temp_path("probe_a.ckpt");
    a.save(pa);
    ImageTextProbe a2(tiny_cfg());
    a2.load(pa);
    CHECK(a.embed_image(pool.items[1]->image).data() ==
          a2.embed_image(pool.items[1]->image).data());
    CHECK(a.embed_text(pool.items[1]->caption).data() ==
          a2.embed_text(pool.items[1]->caption).data());

    ImageOnlyProbe b(tiny_cfg());
    train_image_only_probe(b, pool, tc, 59);
    std::string pb = temp_path("probe_b.ckpt");
    b.save(pb);
    ImageOnlyProbe b2(tiny_cfg());
    b2.load(pb);
    CHECK(b.embed(pool.items[0]->image).data() == b2.embed(pool.items[0]->image).data());

    ProbeConfig other = tiny_cfg();
    other.embed = 12;
    ImageTextProbe mismatched(other);
    CHECK_THROWS_WITH_AS(mismatched.load(pa), doctest::Contains("embed"), CheckpointError);

    // towers are not interchangeable: A has text parameters B lacks
    ImageOnlyProbe wrong_kind(tiny_cfg());
    CHECK_THROWS_AS(wrong_kind.load(pa), CheckpointError);

    std::remove(pa.c_str());
    std::remove(pb.c_str());
}
