#include "refdiff/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include "CLI11.hpp"

#include "refdiff/config.hpp"
#include "refdiff/evalmetrics.hpp"
#include "refdiff/probes.hpp"
#include "refdiff/training.hpp"

namespace refdiff {

namespace {

namespace fs = std::filesystem;

// ---- config schemas ----
// every command collects its settings in a RunConfig (defaults, then the
// config file, then --set, then dedicated flags) and rejects unknown keys.

void probe_defaults(RunConfig& cfg) {
    cfg.set_default("probe.dim", "32");
    cfg.set_default("probe.heads", "2");
    cfg.set_default("probe.blocks", "2");
    cfg.set_default("probe.patch", "4");
    cfg.set_default("probe.embed", "16");
    cfg.set_default("probe.max_side", "32");
    cfg.set_default("probe.vocab", "128");
    cfg.set_default("probe.max_text", "128");
    cfg.set_default("probe.temperature", "10.0");
    cfg.set_default("probe.seed", "1");
    cfg.set_default("probe.steps", "300");
    cfg.set_default("probe.batch", "8");
    cfg.set_default("probe.lr", "1e-3");
}

void arch_defaults(RunConfig& cfg) {
    cfg.set_default("encoder.layers", "4");
    cfg.set_default("encoder.dim", "64");
    cfg.set_default("encoder.heads", "4");
    cfg.set_default("encoder.patch", "4");
    cfg.set_default("encoder.max_image_side", "32");
    cfg.set_default("encoder.vocab", "128");
    cfg.set_default("encoder.max_text_len", "128");
    cfg.set_default("encoder.n_ref", "64");
    cfg.set_default("encoder.cond_dim", "64");
    cfg.set_default("encoder.max_refs", "28");
    cfg.set_default("encoder.max_seq", "2048");
    cfg.set_default("encoder.agg_blocks", "1");
    cfg.set_default("encoder.agg_bidirectional", "true");
    cfg.set_default("encoder.use_instruction", "true");
    cfg.set_default("denoiser.blocks", "4");
    cfg.set_default("denoiser.dim", "64");
    cfg.set_default("denoiser.heads", "4");
    cfg.set_default("denoiser.patch", "2");
    cfg.set_default("denoiser.time_dim", "32");
    cfg.set_default("denoiser.cond_dim", "64");
    cfg.set_default("denoiser.channels", "3");
    cfg.set_default("denoiser.max_side", "32");
    cfg.set_default("denoiser.adapter_scale", "1.0");
    cfg.set_default("model.agg", "tokens");
    cfg.set_default("model.timesteps", "200");
    cfg.set_default("model.beta_start", "1e-4");
    cfg.set_default("model.beta_end", "0.02");
    cfg.set_default("model.seed", "1");
}

std::set<std::string> keys_of(const RunConfig& cfg) {
    std::set<std::string> keys;
    for (const auto& [k, v] : cfg.items()) keys.insert(k);
    return keys;
}

ProbeConfig probe_config_from(const RunConfig& cfg) {
    ProbeConfig pc;
    pc.dim = cfg.integer("probe.dim");
    pc.heads = cfg.integer("probe.heads");
    pc.blocks = cfg.integer("probe.blocks");
    pc.patch = cfg.integer("probe.patch");
    pc.embed = cfg.integer("probe.embed");
    pc.max_side = cfg.integer("probe.max_side");
    pc.vocab = cfg.integer("probe.vocab");
    pc.max_text = cfg.integer("probe.max_text");
    pc.temperature = cfg.real("probe.temperature");
    pc.init_seed = uint64_t(cfg.integer("probe.seed"));
    return pc;
}

ModelConfig model_config_from(const RunConfig& cfg) {
    ModelConfig mc;
    EncoderConfig& e = mc.encoder;
    e.layers = cfg.integer("encoder.layers");
    e.dim = cfg.integer("encoder.dim");
    e.heads = cfg.integer("encoder.heads");
    e.patch = cfg.integer("encoder.patch");
    e.max_image_side = cfg.integer("encoder.max_image_side");
    e.vocab = cfg.integer("encoder.vocab");
    e.max_text_len = cfg.integer("encoder.max_text_len");
    e.n_ref = cfg.integer("encoder.n_ref");
    e.cond_dim = cfg.integer("encoder.cond_dim");
    e.max_refs = cfg.integer("encoder.max_refs");
    e.max_seq = cfg.integer("encoder.max_seq");
    e.agg_blocks = cfg.integer("encoder.agg_blocks");
    e.agg_bidirectional = cfg.flag("encoder.agg_bidirectional");
    e.use_instruction = cfg.flag("encoder.use_instruction");
    DenoiserConfig& d = mc.denoiser;
    d.blocks = cfg.integer("denoiser.blocks");
    d.dim = cfg.integer("denoiser.dim");
    d.heads = cfg.integer("denoiser.heads");
    d.patch = cfg.integer("denoiser.patch");
    d.time_dim = cfg.integer("denoiser.time_dim");
    d.cond_dim = cfg.integer("denoiser.cond_dim");
    d.channels = cfg.integer("denoiser.channels");
    d.max_side = cfg.integer("denoiser.max_side");
    d.adapter_scale = cfg.real("denoiser.adapter_scale");
    mc.agg = agg_mode_from(cfg.str("model.agg"));
    mc.timesteps = cfg.integer("model.timesteps");
    mc.beta_start = cfg.real("model.beta_start");
    mc.beta_end = cfg.real("model.beta_end");
    mc.init_seed = uint64_t(cfg.integer("model.seed"));
    return mc;
}

// the closures in ProbeSet borrow the towers, so they travel together
struct LoadedProbes {
    std::unique_ptr<ImageTextProbe> a;
    std::unique_ptr<ImageOnlyProbe> b;
    ProbeSet set;
};

LoadedProbes load_probes(const RunConfig& cfg, const std::string& path_a,
                         const std::string& path_b) {
    LoadedProbes lp;
    ProbeConfig pc = probe_config_from(cfg);
    lp.a = std::make_unique<ImageTextProbe>(pc);
    lp.a->load(path_a);
    lp.b = std::make_unique<ImageOnlyProbe>(pc);
    lp.b->load(path_b);
    lp.set = probe_set(*lp.a, *lp.b);
    return lp;
}

std::vector<int64_t> int_list(const std::string& text, const std::string& what) {
    std::vector<int64_t> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stoll(tok, &used));
            if (used != tok.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw ConfigError(what + ": '" + tok + "' is not an integer");
        }
    }
    if (out.empty()) throw ConfigError(what + ": empty list");
    return out;
}

void ensure_outdir(const std::string& out) {
    if (out.empty()) throw ConfigError("empty output directory");
    fs::create_directories(out);
}

std::string join_path(const std::string& dir, const std::string& leaf) {
    return (fs::path(dir) / leaf).string();
}

ImageTensor as_image(const Tensor& x) {
    ImageTensor img = make_image(x.dim(0), x.dim(1), x.dim(2));
    img.values = x;
    return img;
}

// ---- dataset ----

int cmd_dataset(const RunConfig& cfg, const std::string& out) {
    DatasetSpec spec;
    spec.groups = cfg.integer("dataset.groups");
    spec.min_group = cfg.integer("dataset.min_group");
    spec.max_group = cfg.integer("dataset.max_group");
    spec.min_side = cfg.integer("dataset.min_side");
    spec.max_side = cfg.integer("dataset.max_side");
    spec.misalignment = cfg.flag("dataset.misalignment");
    spec.stressor_pairs = cfg.integer("dataset.stressor_pairs");
    uint64_t seed = uint64_t(cfg.integer("seed"));

    // invalid_argument from generation means the spec itself is bad: a usage error
    std::vector<GroupRecord> groups;
    try {
        groups = generate_dataset(spec, seed);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    FilterThresholds th;
    th.group_consistency = cfg.real("filter.consistency");
    th.caption_match = cfg.real("filter.caption");
    std::string pa = cfg.str("filter.probe_a"), pb = cfg.str("filter.probe_b");
    if (th.group_consistency > -1.0 || th.caption_match > -1.0) {
        if (pa.empty() || pb.empty())
            throw ConfigError("filtering needs filter.probe_a and filter.probe_b checkpoints");
        LoadedProbes probes = load_probes(cfg, pa, pb);
        size_t before = groups.size();
        groups = filter_groups(groups, probes.set, th);
        std::cout << "filter kept " << groups.size() << " of " << before << " groups\n";
    }

    try {
        groups = make_splits(std::move(groups), cfg.integer("split.held_out"),
                             cfg.integer("split.held_in"), seed);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    AuditReport rep = audit_dataset(groups);
    if (!rep.ok()) throw std::runtime_error("generated dataset failed its own hygiene audit");

    ensure_outdir(out);
    save_dataset(out, groups);
    cfg.echo(join_path(out, "resolved.cfg"));

    size_t images = 0;
    for (const auto& g : groups) images += g.images.size();
    std::cout << "wrote " << groups.size() << " groups (" << images << " images) to " << out
              << "\n";
    return 0;
}

// ---- train ----

struct StagePools {
    // pairs feed stages 1-2, whole groups feed stage 3; both own nothing
    std::vector<const RefImage*> pairs;
    std::vector<const GroupRecord*> groups;
};

StagePools collect_pools(const std::vector<GroupRecord>& manifest) {
    StagePools p;
    for (const GroupRecord& g : manifest) {
        std::vector<size_t> vis = training_visible(g);
        for (size_t i : vis) p.pairs.push_back(&g.images[i]);
        if (vis.size() >= 2 && !training_targets(g).empty()) p.groups.push_back(&g);
    }
    return p;
}

int64_t snap_to(int64_t v, int64_t patch) { return std::max(patch, v / patch * patch); }

ImageTensor snap_target(const ImageTensor& img, int64_t patch, int64_t max_side) {
    int64_t h = std::min(snap_to(img.height, patch), snap_to(max_side, patch));
    int64_t w = std::min(snap_to(img.width, patch), snap_to(max_side, patch));
    if (h == img.height && w == img.width) return img;
    return resize_image(img, h, w);
}

int cmd_train_probes(const RunConfig& cfg, const std::string& data, const std::string& out) {
    std::vector<GroupRecord> manifest = load_dataset(data);
    ProbePool pool(manifest);
    ProbeConfig pc = probe_config_from(cfg);
    ProbeTrainConfig tc;
    tc.steps = cfg.integer("probe.steps");
    tc.batch = cfg.integer("probe.batch");
    tc.lr = cfg.real("probe.lr");
    uint64_t seed = uint64_t(cfg.integer("seed"));

    ensure_outdir(out);
    ImageTextProbe a(pc);
    std::vector<double> la = train_image_text_probe(a, pool, tc, derive_seed(seed, "fit-a"));
    a.save(join_path(out, "probe_a.ckpt"));
    ImageOnlyProbe b(pc);
    std::vector<double> lb = train_image_only_probe(b, pool, tc, derive_seed(seed, "fit-b"));
    b.save(join_path(out, "probe_b.ckpt"));

    std::ofstream csv(join_path(out, "probes_loss.csv"));
    if (!csv) throw std::runtime_error("cannot write probes_loss.csv");
    csv << "step,probe,loss\n";
    char buf[40];
    for (size_t i = 0; i < la.size(); i++) {
        std::snprintf(buf, sizeof buf, "%.10g", la[i]);
        csv << i << ",a," << buf << "\n";
    }
    for (size_t i = 0; i < lb.size(); i++) {
        std::snprintf(buf, sizeof buf, "%.10g", lb[i]);
        csv << i << ",b," << buf << "\n";
    }
    cfg.echo(join_path(out, "resolved.cfg"));
    std::cout << "wrote probe_a.ckpt and probe_b.ckpt to " << out << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg, int64_t stage, const std::string& data,
              const std::string& out, const std::string& init_override, bool resume) {
    std::vector<GroupRecord> manifest = load_dataset(data);
    StagePools pools = collect_pools(manifest);
    ModelConfig mc = model_config_from(cfg);

    StageConfig sc;
    sc.steps = cfg.integer("train.steps");
    sc.lr = cfg.real("train.lr");
    sc.batch = cfg.integer("train.batch");
    sc.checkpoint_every = cfg.integer("train.checkpoint_every");
    sc.dropout.joint = cfg.real("train.dropout_joint");
    sc.dropout.text = cfg.real("train.dropout_text");
    sc.dropout.image = cfg.real("train.dropout_image");
    double crop = cfg.real("train.crop");
    uint64_t seed = uint64_t(cfg.integer("seed"));
    int64_t square = snap_to(cfg.integer("train.square"), mc.denoiser.patch);
    if (square > mc.denoiser.max_side)
        throw ConfigError("train.square exceeds denoiser.max_side");

    if ((stage == 1 || stage == 2) && pools.pairs.empty())
        throw std::runtime_error("dataset has no training-visible images");
    if (stage == 3 && pools.groups.empty())
        throw std::runtime_error("dataset has no multi-reference training groups");

    std::string out_ckpt = join_path(out, "stage" + std::to_string(stage) + ".ckpt");
    ensure_outdir(out);

    RefDiffModel model(mc);
    AdamState optim;
    int64_t start_step = 0;

    if (resume) {
        if (!fs::exists(out_ckpt))
            throw std::runtime_error("resume requested but " + out_ckpt + " does not exist");
        RefDiffModel::LoadInfo info = model.load(out_ckpt);
        if (info.stage != stage)
            throw std::runtime_error(out_ckpt + " holds stage " + std::to_string(info.stage) +
                                     " state, not stage " + std::to_string(stage));
        if (info.optim) optim = std::move(*info.optim);
        start_step = info.step;
        if (start_step >= sc.steps) {
            std::cout << "stage " << stage << " already complete at step " << start_step << "\n";
            return 0;
        }
    } else if (stage == 1) {
        if (sc.steps > 0) model.install_adapters();
    } else {
        std::string init = init_override.empty()
                               ? join_path(out, "stage" + std::to_string(stage - 1) + ".ckpt")
                               : init_override;
        if (!fs::exists(init))
            throw std::runtime_error("stage " + std::to_string(stage) +
                                     " needs the stage " + std::to_string(stage - 1) +
                                     " checkpoint at " + init);
        RefDiffModel::LoadInfo info = model.load(init);
        if (sc.steps == 0) {
            // contract: no steps, the output equals the input checkpoint
            if (info.optim)
                model.save(out_ckpt, *info.optim, info.stage, info.step);
            else
                model.save(out_ckpt);
            cfg.echo(join_path(out, "resolved.cfg"));
            std::cout << "wrote " << out_ckpt << " (no training steps)\n";
            return 0;
        }
        if (stage == 2 && !model.lora()) {
            model.lora_wrap(Denoiser::lora_targets_all(), cfg.integer("train.lora_rank"),
                            cfg.real("train.lora_scale"));
        }
    }

    if (sc.steps == 0) { // stage 1 with no steps: freshly initialized weights
        model.save(out_ckpt);
        cfg.echo(join_path(out, "resolved.cfg"));
        std::cout << "wrote " << out_ckpt << " (no training steps)\n";
        return 0;
    }

    StagePlan plan;
    plan.index = stage;
    plan.trainable = stage == 1 ? stage1_filters(mc.encoder) : stage23_filters();
    plan.cfg = sc;

    int64_t dpatch = mc.denoiser.patch;
    int64_t dside = mc.denoiser.max_side;
    if (stage == 1) {
        plan.draw = [pairs = pools.pairs, square](RandomSource& rs) {
            const RefImage& p = *pairs[size_t(rs.uniform_int(0, int64_t(pairs.size()) - 1))];
            ImageTensor sq = p.image.height == square && p.image.width == square
                                 ? p.image
                                 : resize_image(p.image, square, square);
            return TrainDraw{{sq}, sq, p.caption};
        };
    } else if (stage == 2) {
        plan.draw = [pairs = pools.pairs, square, crop](RandomSource& rs) {
            const RefImage& p = *pairs[size_t(rs.uniform_int(0, int64_t(pairs.size()) - 1))];
            TrainDraw d = single_ref_batch(p, rs, crop);
            if (d.target.height != square || d.target.width != square)
                d.target = resize_image(d.target, square, square);
            return d;
        };
    } else {
        plan.draw = [groups = pools.groups, dpatch, dside](RandomSource& rs) {
            const GroupRecord& g =
                *groups[size_t(rs.uniform_int(0, int64_t(groups.size()) - 1))];
            TrainDraw d = sample_multi_ref_batch(g, rs, true);
            d.target = snap_target(d.target, dpatch, dside);
            return d;
        };
    }

    std::string csv_path = join_path(out, "stage" + std::to_string(stage) + "_loss.csv");
    std::ofstream csv(csv_path, start_step > 0 ? std::ios::app : std::ios::out);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);

    std::string prefix = join_path(out, "stage" + std::to_string(stage));
    StageResult res = run_stage(model, optim, plan, seed, prefix, &csv, start_step);
    cfg.echo(join_path(out, "resolved.cfg"));

    double first = res.losses.empty() ? 0.0 : res.losses.front();
    double last = res.losses.empty() ? 0.0 : res.losses.back();
    std::cout << "stage " << stage << " ran " << res.losses.size() << " steps (loss " << first
              << " -> " << last << "), wrote " << out_ckpt << "\n";
    return 0;
}

// ---- sample ----

int cmd_sample(const RunConfig& cfg, const std::string& ckpt, const std::string& out,
               const std::string& prompt, const std::vector<std::string>& ref_paths) {
    ModelConfig mc = config_from_meta(ckpt);
    RefDiffModel model(mc);
    model.load(ckpt);

    std::vector<ImageTensor> refs;
    for (const std::string& p : ref_paths) refs.push_back(read_ppm(p));

    NoGradGuard ng;
    Conditions cond;
    if (refs.empty()) {
        // text-only fallback: the image branch gets the black-frame null
        cond = Conditions{model.encoder.encode_text_condition(prompt),
                          model.null_image_condition()};
    } else {
        cond = model.encode_conditions(refs, prompt);
    }
    Conditions uncond = model.uncond_from(cond, UncondMode::joint);

    GuidanceConfig g;
    g.steps = cfg.integer("sample.steps");
    g.scale = cfg.real("sample.scale");
    int64_t h = cfg.integer("sample.height");
    int64_t w = cfg.integer("sample.width");
    int64_t count = cfg.integer("sample.count");
    if (count < 1) throw ConfigError("sample.count must be >= 1");
    uint64_t seed = uint64_t(cfg.integer("seed"));

    ensure_outdir(out);
    for (int64_t k = 0; k < count; k++) {
        Tensor x = ddim_sample(model.eps_model(), cond, uncond, g, model.schedule,
                               {mc.denoiser.channels, h, w}, derive_seed(seed, "sample", uint64_t(k)));
        char leaf[32];
        std::snprintf(leaf, sizeof leaf, "sample_%03lld.ppm", static_cast<long long>(k));
        write_ppm(join_path(out, leaf), as_image(x));
    }
    cfg.echo(join_path(out, "resolved.cfg"));
    std::cout << "wrote " << count << " image(s) to " << out << "\n";
    return 0;
}

// ---- eval ----

int cmd_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& data,
             const std::string& split, const std::string& probe_a, const std::string& probe_b,
             const std::string& out) {
    ModelConfig mc = config_from_meta(ckpt);
    RefDiffModel model(mc);
    model.load(ckpt);
    std::vector<GroupRecord> manifest = load_dataset(data);
    LoadedProbes probes = load_probes(cfg, probe_a, probe_b);

    EvalConfig ec;
    ec.guidance.steps = cfg.integer("eval.steps");
    ec.guidance.scale = cfg.real("eval.scale");
    ec.seed = uint64_t(cfg.integer("seed"));

    MetricsReport r = evaluate(model, manifest, split, ec, probes.set);
    ensure_outdir(out);
    write_metrics_csv(r, join_path(out, "metrics.csv"));
    write_timing_csv(r, join_path(out, "timing.csv"));
    cfg.echo(join_path(out, "resolved.cfg"));
    std::cout << "split " << split << ": " << r.cases.size() << " cases, sim_target "
              << r.sim_target << ", sim_text " << r.sim_text << ", sim_view " << r.sim_view
              << "\n";
    return 0;
}

// ---- ablate ----

void require_comparable(const ModelConfig& a, const ModelConfig& b, const std::string& which) {
    auto fail = [&](const std::string& field) {
        throw std::runtime_error("ablation variants must share every setting except the "
                                 "aggregation mode; " +
                                 which + " differs in " + field);
    };
    const EncoderConfig &ea = a.encoder, &eb = b.encoder;
    const DenoiserConfig &da = a.denoiser, &db = b.denoiser;
    if (a.timesteps != b.timesteps) fail("timesteps");
    if (a.beta_start != b.beta_start) fail("beta_start");
    if (a.beta_end != b.beta_end) fail("beta_end");
    if (ea.layers != eb.layers) fail("encoder.layers");
    if (ea.dim != eb.dim) fail("encoder.dim");
    if (ea.heads != eb.heads) fail("encoder.heads");
    if (ea.patch != eb.patch) fail("encoder.patch");
    if (ea.max_image_side != eb.max_image_side) fail("encoder.max_image_side");
    if (ea.vocab != eb.vocab) fail("encoder.vocab");
    if (ea.max_text_len != eb.max_text_len) fail("encoder.max_text_len");
    if (ea.n_ref != eb.n_ref) fail("encoder.n_ref");
    if (ea.cond_dim != eb.cond_dim) fail("encoder.cond_dim");
    if (ea.max_refs != eb.max_refs) fail("encoder.max_refs");
    if (ea.max_seq != eb.max_seq) fail("encoder.max_seq");
    if (ea.agg_blocks != eb.agg_blocks) fail("encoder.agg_blocks");
    if (ea.agg_bidirectional != eb.agg_bidirectional) fail("encoder.agg_bidirectional");
    if (ea.instruction != eb.instruction) fail("encoder.instruction");
    if (ea.instruction_suffix != eb.instruction_suffix) fail("encoder.instruction_suffix");
    if (ea.use_instruction != eb.use_instruction) fail("encoder.use_instruction");
    if (da.blocks != db.blocks) fail("denoiser.blocks");
    if (da.dim != db.dim) fail("denoiser.dim");
    if (da.heads != db.heads) fail("denoiser.heads");
    if (da.patch != db.patch) fail("denoiser.patch");
    if (da.time_dim != db.time_dim) fail("denoiser.time_dim");
    if (da.cond_dim != db.cond_dim) fail("denoiser.cond_dim");
    if (da.channels != db.channels) fail("denoiser.channels");
    if (da.max_side != db.max_side) fail("denoiser.max_side");
    if (da.adapter_scale != db.adapter_scale) fail("denoiser.adapter_scale");
}

bool split_has_targets(const std::vector<GroupRecord>& manifest, const std::string& split) {
    for (const GroupRecord& g : manifest) {
        if (g.split != split) continue;
        for (const RefImage& im : g.images)
            if (im.eval_target) return true;
    }
    return false;
}

int cmd_ablate_aggregation(const RunConfig& cfg, const std::vector<std::string>& ckpts,
                           const std::string& data, const std::string& probe_a,
                           const std::string& probe_b, const std::string& out) {
    if (ckpts.size() < 2)
        throw ConfigError("aggregation ablation needs at least two checkpoints");
    std::vector<GroupRecord> manifest = load_dataset(data);
    LoadedProbes probes = load_probes(cfg, probe_a, probe_b);
    EvalConfig ec;
    ec.guidance.steps = cfg.integer("eval.steps");
    ec.guidance.scale = cfg.real("eval.scale");
    ec.seed = uint64_t(cfg.integer("seed"));

    std::vector<std::string> splits = {"held-out"};
    for (const char* s : {"stress-aligned", "stress-misaligned"})
        if (split_has_targets(manifest, s)) splits.push_back(s);

    ModelConfig base = config_from_meta(ckpts[0]);
    ensure_outdir(out);
    std::ofstream csv(join_path(out, "aggregation.csv"));
    if (!csv) throw std::runtime_error("cannot write aggregation.csv");
    csv << "mode,split,cases,mean_cond_rows,sim_target,sim_text,sim_view\n";
    char buf[40];
    for (const std::string& ck : ckpts) {
        ModelConfig mc = config_from_meta(ck);
        require_comparable(base, mc, ck);
        RefDiffModel model(mc);
        model.load(ck);
        std::string mode = agg_mode_name(mc.agg);
        for (const std::string& split : splits) {
            MetricsReport r = evaluate(model, manifest, split, ec, probes.set);
            double rows = 0;
            for (const CaseResult& c : r.cases) rows += double(c.cond_rows);
            rows /= double(r.cases.size());
            csv << mode << ',' << split << ',' << r.cases.size() << ',';
            std::snprintf(buf, sizeof buf, "%.10g", rows);
            csv << buf << ',';
            std::snprintf(buf, sizeof buf, "%.10g", r.sim_target);
            csv << buf << ',';
            std::snprintf(buf, sizeof buf, "%.10g", r.sim_text);
            csv << buf << ',';
            std::snprintf(buf, sizeof buf, "%.10g", r.sim_view);
            csv << buf << '\n';
            write_metrics_csv(r, join_path(out, mode + "_" + split + "_metrics.csv"));
            write_timing_csv(r, join_path(out, mode + "_" + split + "_timing.csv"));
        }
    }
    cfg.echo(join_path(out, "resolved.cfg"));
    std::cout << "wrote " << join_path(out, "aggregation.csv") << "\n";
    return 0;
}

// ---- top level ----

int dispatch(const std::vector<std::string>& args);

} // namespace

int run_cli(const std::vector<std::string>& args) {
    try {
        return dispatch(args);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

namespace {

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"multi-reference diffusion conditioning toolkit"};
    app.require_subcommand(1);

    // shared option storage; each subcommand binds what it needs
    std::string config_path, out, data, ckpt, split = "held-out", prompt;
    std::string probe_a, probe_b, init_path, what = "aggregation";
    std::vector<std::string> sets, refs, baselines;
    std::string stage = "1";
    bool resume = false;
    int64_t seed = 0, steps = 0, count = 0, height = 0, width = 0, groups = 0;
    int64_t min_group = 0, max_group = 0, min_side = 0, max_side = 0, stressor_pairs = 0;
    int64_t held_out = 0, held_in = 0, rank = 0, side = 16, k_refs = 4, batch = 0;
    double scale = 0, lr = 0;
    std::string n_refs_list = "32,64,128", agg_blocks_list = "1,2,3", refs_list = "1,2,4,8,16,28";

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "key=value settings file");
        c->add_option("--set", sets, "override one key=value setting")->take_all();
    };

    CLI::App* c_dataset = app.add_subcommand("dataset", "generate a grouped synthetic dataset");
    add_common(c_dataset);
    c_dataset->add_option("--out", out, "output directory")->required();
    c_dataset->add_option("--seed", seed);
    c_dataset->add_option("--groups", groups, "regular group count");
    c_dataset->add_option("--min-group-size", min_group);
    c_dataset->add_option("--max-group-size", max_group);
    c_dataset->add_option("--min-side", min_side);
    c_dataset->add_option("--max-side", max_side);
    c_dataset->add_option("--stressor-pairs", stressor_pairs);
    c_dataset->add_option("--held-out", held_out, "held-out group count");
    c_dataset->add_option("--held-in", held_in, "held-in group count");

    CLI::App* c_train = app.add_subcommand("train", "run one training stage");
    add_common(c_train);
    c_train->add_option("--stage", stage, "1|2|3|probes")->required();
    c_train->add_option("--data", data, "dataset directory")->required();
    c_train->add_option("--out", out, "run directory")->required();
    c_train->add_option("--init", init_path, "explicit previous-stage checkpoint");
    c_train->add_flag("--resume", resume, "continue this stage from its own checkpoint");
    c_train->add_option("--seed", seed);
    c_train->add_option("--steps", steps);
    c_train->add_option("--lr", lr);
    c_train->add_option("--batch", batch);

    CLI::App* c_sample = app.add_subcommand("sample", "generate images from a checkpoint");
    add_common(c_sample);
    c_sample->add_option("--checkpoint", ckpt)->required();
    c_sample->add_option("--out", out, "output directory")->required();
    c_sample->add_option("--prompt", prompt)->required();
    c_sample->add_option("--ref", refs, "reference image (ppm), repeatable")->take_all();
    c_sample->add_option("--seed", seed);
    c_sample->add_option("--steps", steps);
    c_sample->add_option("--scale", scale);
    c_sample->add_option("--height", height);
    c_sample->add_option("--width", width);
    c_sample->add_option("--count", count);

    CLI::App* c_eval = app.add_subcommand("eval", "score a checkpoint on an eval split");
    add_common(c_eval);
    c_eval->add_option("--checkpoint", ckpt)->required();
    c_eval->add_option("--data", data)->required();
    c_eval->add_option("--split", split, "held-out|held-in|stress-aligned|stress-misaligned");
    c_eval->add_option("--probe-a", probe_a, "image/text probe checkpoint")->required();
    c_eval->add_option("--probe-b", probe_b, "image-only probe checkpoint")->required();
    c_eval->add_option("--out", out)->required();
    c_eval->add_option("--seed", seed);
    c_eval->add_option("--steps", steps);
    c_eval->add_option("--scale", scale);

    CLI::App* c_ablate = app.add_subcommand("ablate", "comparison and cost studies");
    add_common(c_ablate);
    c_ablate->add_option("--what", what, "aggregation|tokens|scale|lora")->required();
    c_ablate->add_option("--checkpoint", ckpt, "primary checkpoint");
    c_ablate->add_option("--against", baselines, "baseline checkpoint(s), repeatable")
        ->take_all();
    c_ablate->add_option("--data", data);
    c_ablate->add_option("--split", split);
    c_ablate->add_option("--probe-a", probe_a);
    c_ablate->add_option("--probe-b", probe_b);
    c_ablate->add_option("--out", out)->required();
    c_ablate->add_option("--seed", seed);
    c_ablate->add_option("--steps", steps);
    c_ablate->add_option("--scale", scale);
    c_ablate->add_option("--lr", lr);
    c_ablate->add_option("--rank", rank, "low-rank baseline rank");
    c_ablate->add_option("--n-refs", n_refs_list, "token sweep: reference-token counts");
    c_ablate->add_option("--agg-blocks", agg_blocks_list, "token sweep: aggregation depths");
    c_ablate->add_option("--refs", refs_list, "scale study: reference counts");
    c_ablate->add_option("--side", side, "probe image side for cost studies");
    c_ablate->add_option("--k-refs", k_refs, "token sweep: references per pass");

    CLI::App* c_audit = app.add_subcommand("audit", "dataset split-hygiene audit");
    c_audit->add_option("--data", data)->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    RunConfig cfg;
    cfg.set_default("seed", "1");

    if (app.got_subcommand(c_dataset)) {
        cfg.set_default("dataset.groups", "50");
        cfg.set_default("dataset.min_group", "2");
        cfg.set_default("dataset.max_group", "8");
        cfg.set_default("dataset.min_side", "12");
        cfg.set_default("dataset.max_side", "20");
        cfg.set_default("dataset.misalignment", "true");
        cfg.set_default("dataset.stressor_pairs", "0");
        cfg.set_default("split.held_out", "0");
        cfg.set_default("split.held_in", "0");
        cfg.set_default("filter.consistency", "-1");
        cfg.set_default("filter.caption", "-1");
        cfg.set_default("filter.probe_a", "");
        cfg.set_default("filter.probe_b", "");
        probe_defaults(cfg);
        const std::set<std::string> known = keys_of(cfg);
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (c_dataset->count("--seed")) cfg.set("seed", std::to_string(seed));
        if (c_dataset->count("--groups")) cfg.set("dataset.groups", std::to_string(groups));
        if (c_dataset->count("--min-group-size"))
            cfg.set("dataset.min_group", std::to_string(min_group));
        if (c_dataset->count("--max-group-size"))
            cfg.set("dataset.max_group", std::to_string(max_group));
        if (c_dataset->count("--min-side")) cfg.set("dataset.min_side", std::to_string(min_side));
        if (c_dataset->count("--max-side")) cfg.set("dataset.max_side", std::to_string(max_side));
        if (c_dataset->count("--stressor-pairs"))
            cfg.set("dataset.stressor_pairs", std::to_string(stressor_pairs));
        if (c_dataset->count("--held-out")) cfg.set("split.held_out", std::to_string(held_out));
        if (c_dataset->count("--held-in")) cfg.set("split.held_in", std::to_string(held_in));
        cfg.require_known(known);
        return cmd_dataset(cfg, out);
    }

    if (app.got_subcommand(c_train)) {
        bool probes_stage = stage == "probes";
        if (!probes_stage && stage != "1" && stage != "2" && stage != "3")
            throw ConfigError("--stage must be 1, 2, 3 or probes");
        arch_defaults(cfg);
        probe_defaults(cfg);
        cfg.set_default("train.steps", "1000");
        cfg.set_default("train.lr", "1e-3");
        cfg.set_default("train.batch", "1");
        cfg.set_default("train.checkpoint_every", "0");
        cfg.set_default("train.dropout_joint", "0.05");
        cfg.set_default("train.dropout_text", "0.05");
        cfg.set_default("train.dropout_image", "0.05");
        cfg.set_default("train.crop", "0.5");
        cfg.set_default("train.square", "16");
        cfg.set_default("train.lora_rank", "4");
        cfg.set_default("train.lora_scale", "1.0");
        const std::set<std::string> known = keys_of(cfg);
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (c_train->count("--seed")) cfg.set("seed", std::to_string(seed));
        if (c_train->count("--steps"))
            cfg.set(probes_stage ? "probe.steps" : "train.steps", std::to_string(steps));
        if (c_train->count("--lr"))
            cfg.set(probes_stage ? "probe.lr" : "train.lr", std::to_string(lr));
        if (c_train->count("--batch"))
            cfg.set(probes_stage ? "probe.batch" : "train.batch", std::to_string(batch));
        cfg.require_known(known);
        if (probes_stage) return cmd_train_probes(cfg, data, out);
        return cmd_train(cfg, std::stoll(stage), data, out, init_path, resume);
    }

    if (app.got_subcommand(c_sample)) {
        cfg.set_default("sample.steps", "30");
        cfg.set_default("sample.scale", "7.5");
        cfg.set_default("sample.height", "16");
        cfg.set_default("sample.width", "16");
        cfg.set_default("sample.count", "1");
        const std::set<std::string> known = keys_of(cfg);
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (c_sample->count("--seed")) cfg.set("seed", std::to_string(seed));
        if (c_sample->count("--steps")) cfg.set("sample.steps", std::to_string(steps));
        if (c_sample->count("--scale")) cfg.set("sample.scale", std::to_string(scale));
        if (c_sample->count("--height")) cfg.set("sample.height", std::to_string(height));
        if (c_sample->count("--width")) cfg.set("sample.width", std::to_string(width));
        if (c_sample->count("--count")) cfg.set("sample.count", std::to_string(count));
        cfg.require_known(known);
        return cmd_sample(cfg, ckpt, out, prompt, refs);
    }

    if (app.got_subcommand(c_eval)) {
        cfg.set_default("eval.steps", "30");
        cfg.set_default("eval.scale", "7.5");
        probe_defaults(cfg);
        const std::set<std::string> known = keys_of(cfg);
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (c_eval->count("--seed")) cfg.set("seed", std::to_string(seed));
        if (c_eval->count("--steps")) cfg.set("eval.steps", std::to_string(steps));
        if (c_eval->count("--scale")) cfg.set("eval.scale", std::to_string(scale));
        cfg.require_known(known);
        return cmd_eval(cfg, ckpt, data, split, probe_a, probe_b, out);
    }

    if (app.got_subcommand(c_ablate)) {
        cfg.set_default("eval.steps", "30");
        cfg.set_default("eval.scale", "7.5");
        probe_defaults(cfg);
        arch_defaults(cfg);
        cfg.set_default("lora.rank", "4");
        cfg.set_default("lora.steps", "60");
        cfg.set_default("lora.lr", "1e-3");
        const std::set<std::string> known = keys_of(cfg);
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const std::string& s : sets) cfg.apply_override(s);
        if (c_ablate->count("--seed")) cfg.set("seed", std::to_string(seed));
        if (c_ablate->count("--steps"))
            cfg.set(what == "lora" ? "lora.steps" : "eval.steps", std::to_string(steps));
        if (c_ablate->count("--scale")) cfg.set("eval.scale", std::to_string(scale));
        if (c_ablate->count("--lr")) cfg.set("lora.lr", std::to_string(lr));
        if (c_ablate->count("--rank")) cfg.set("lora.rank", std::to_string(rank));
        cfg.require_known(known);

        if (what == "aggregation") {
            if (ckpt.empty()) throw ConfigError("--checkpoint is required for this ablation");
            if (data.empty() || probe_a.empty() || probe_b.empty())
                throw ConfigError("aggregation ablation needs --data, --probe-a and --probe-b");
            std::vector<std::string> all = {ckpt};
            all.insert(all.end(), baselines.begin(), baselines.end());
            return cmd_ablate_aggregation(cfg, all, data, probe_a, probe_b, out);
        }
        if (what == "tokens") {
            auto points = token_sweep(model_config_from(cfg),
                                      int_list(n_refs_list, "--n-refs"),
                                      int_list(agg_blocks_list, "--agg-blocks"), k_refs, side);
            ensure_outdir(out);
            write_token_csv(points, join_path(out, "tokens.csv"));
            cfg.echo(join_path(out, "resolved.cfg"));
            std::cout << "wrote " << join_path(out, "tokens.csv") << "\n";
            return 0;
        }
        if (what == "scale") {
            if (ckpt.empty()) throw ConfigError("--checkpoint is required for this ablation");
            ModelConfig mc = config_from_meta(ckpt);
            RefDiffModel model(mc);
            model.load(ckpt);
            auto points =
                scale_references(model, int_list(refs_list, "--refs"), side, "a cost probe");
            ensure_outdir(out);
            write_scale_csv(points, join_path(out, "scale.csv"));
            cfg.echo(join_path(out, "resolved.cfg"));
            std::cout << "wrote " << join_path(out, "scale.csv") << "\n";
            return 0;
        }
        if (what == "lora") {
            if (ckpt.empty()) throw ConfigError("--checkpoint is required for this ablation");
            if (data.empty() || probe_a.empty() || probe_b.empty())
                throw ConfigError("lora ablation needs --data, --probe-a and --probe-b");
            std::vector<GroupRecord> manifest = load_dataset(data);
            LoadedProbes probes = load_probes(cfg, probe_a, probe_b);
            LoraBaselineConfig lc;
            lc.rank = cfg.integer("lora.rank");
            lc.steps = cfg.integer("lora.steps");
            lc.lr = cfg.real("lora.lr");
            lc.guidance.steps = cfg.integer("eval.steps");
            lc.guidance.scale = cfg.real("eval.scale");
            lc.seed = uint64_t(cfg.integer("seed"));
            auto rows =
                lora_baseline(config_from_meta(ckpt), ckpt, manifest, split, lc, probes.set);
            ensure_outdir(out);
            write_lora_csv(rows, join_path(out, "lora.csv"));
            cfg.echo(join_path(out, "resolved.cfg"));
            std::cout << "wrote " << join_path(out, "lora.csv") << "\n";
            return 0;
        }
        throw ConfigError("--what must be aggregation, tokens, scale or lora");
    }

    if (app.got_subcommand(c_audit)) {
        std::vector<GroupRecord> manifest = load_dataset(data);
        AuditReport rep = audit_dataset(manifest);
        std::cout << "leaked_hashes=" << rep.leaked_hashes
                  << " duplicate_hashes=" << rep.duplicate_hashes
                  << " bad_group_sizes=" << rep.bad_group_sizes
                  << " missing_targets=" << rep.missing_targets << "\n";
        if (!rep.ok()) {
            std::cerr << "audit failed\n";
            return 2;
        }
        std::cout << "audit passed\n";
        return 0;
    }

    return 1;
}

} // namespace

} // namespace refdiff
