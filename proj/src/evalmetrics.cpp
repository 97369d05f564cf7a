#include "refdiff/evalmetrics.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace refdiff {

namespace {

const char* known_splits[] = {"train", "held-in", "held-out", "stress-aligned",
                              "stress-misaligned"};

void check_split(const std::string& split) {
    for (const char* s : known_splits)
        if (split == s) return;
    throw std::invalid_argument("eval: unknown split " + split);
}

void check_probes(const ProbeSet& probes) {
    if (!probes.a_image || !probes.a_text || !probes.b_image)
        throw std::invalid_argument("eval: probe set is incomplete");
}

ImageTensor as_image(const Tensor& x) {
    ImageTensor img = make_image(x.dim(0), x.dim(1), x.dim(2));
    img.values = x;
    return img;
}

// stable per-target key; group sizes are capped well below the stride
uint64_t case_key(int64_t group, size_t index) { return uint64_t(group) * 64 + index; }

std::string fmt10(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::ofstream open_csv(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    return os;
}

struct CaseScore {
    double sim_target = 0, sim_text = 0, sim_view = 0;
};

// mean probe agreement over kSamplesPerCase draws for one target
CaseScore score_target(const RefDiffModel& model, const Conditions& cond, const RefImage& target,
                       const GuidanceConfig& guidance, uint64_t seed, uint64_t key,
                       const ProbeSet& probes) {
    Conditions uncond = model.uncond_from(cond, UncondMode::joint);
    std::vector<double> et = probes.a_image(target.image);
    std::vector<double> ec = probes.a_text(target.caption);
    std::vector<double> vt = probes.b_image(target.image);
    CaseScore sc;
    for (int64_t k = 0; k < kSamplesPerCase; k++) {
        Tensor x = ddim_sample(model.eps_model(), cond, uncond, guidance, model.schedule,
                               target.image.values.shape(),
                               derive_seed(seed, "case", key, uint64_t(k)));
        ImageTensor gen = as_image(x);
        std::vector<double> eg = probes.a_image(gen);
        sc.sim_target += cosine(eg, et);
        sc.sim_text += cosine(eg, ec);
        sc.sim_view += cosine(probes.b_image(gen), vt);
    }
    sc.sim_target /= double(kSamplesPerCase);
    sc.sim_text /= double(kSamplesPerCase);
    sc.sim_view /= double(kSamplesPerCase);
    return sc;
}

} // namespace

MetricsReport evaluate(const RefDiffModel& model, const std::vector<GroupRecord>& manifest,
                       const std::string& split, const EvalConfig& cfg, const ProbeSet& probes) {
    check_split(split);
    check_probes(probes);
    NoGradGuard ng;
    cost_reset();
    auto t0 = std::chrono::steady_clock::now();

    MetricsReport report;
    report.split = split;
    for (const GroupRecord& g : manifest) {
        if (g.split != split) continue;
        for (size_t i = 0; i < g.images.size(); i++) {
            if (!g.images[i].eval_target) continue;
            const RefImage& target = g.images[i];
            std::vector<ImageTensor> refs;
            for (size_t j = 0; j < g.images.size(); j++)
                if (j != i) refs.push_back(g.images[j].image);
            Conditions cond = model.encode_conditions(refs, target.caption);
            CaseScore sc = score_target(model, cond, target, cfg.guidance, cfg.seed,
                                        case_key(g.id, i), probes);
            CaseResult row;
            row.group = g.id;
            row.index = i;
            row.split = split;
            row.refs = int64_t(refs.size());
            row.cond_rows = cond.image.dim(0);
            row.sim_target = sc.sim_target;
            row.sim_text = sc.sim_text;
            row.sim_view = sc.sim_view;
            report.cases.push_back(row);
        }
    }
    if (report.cases.empty())
        throw std::invalid_argument("eval: split " + split + " has no eval targets");

    for (const CaseResult& c : report.cases) {
        report.sim_target += c.sim_target;
        report.sim_text += c.sim_text;
        report.sim_view += c.sim_view;
    }
    double n = double(report.cases.size());
    report.sim_target /= n;
    report.sim_text /= n;
    report.sim_view /= n;
    report.encoder_macs = cost_macs("encoder");
    report.denoiser_macs = cost_macs("denoiser");
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

void write_metrics_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream os = open_csv(path);
    os << "group,index,split,refs,cond_rows,sim_target,sim_text,sim_view\n";
    for (const CaseResult& c : r.cases)
        os << c.group << ',' << c.index << ',' << c.split << ',' << c.refs << ',' << c.cond_rows
           << ',' << fmt10(c.sim_target) << ',' << fmt10(c.sim_text) << ',' << fmt10(c.sim_view)
           << '\n';
    os << "mean,," << r.split << ",,," << fmt10(r.sim_target) << ',' << fmt10(r.sim_text) << ','
       << fmt10(r.sim_view) << '\n';
}

void write_timing_csv(const MetricsReport& r, const std::string& path) {
    std::ofstream os = open_csv(path);
    os << "split,cases,wall_seconds,encoder_macs,denoiser_macs\n";
    os << r.split << ',' << r.cases.size() << ',' << fmt10(r.wall_seconds) << ','
       << r.encoder_macs << ',' << r.denoiser_macs << '\n';
}

std::vector<ScalePoint> scale_references(const RefDiffModel& model, const std::vector<int64_t>& ks,
                                         int64_t side, const std::string& prompt) {
    if (ks.empty()) throw std::invalid_argument("scale: need at least one reference count");
    NoGradGuard ng;
    std::vector<ScalePoint> points;
    for (int64_t k : ks) {
        if (k < 1) throw std::invalid_argument("scale: reference counts start at 1");
        cost_reset();
        std::vector<ImageTensor> refs(size_t(k), black_image(3, side, side));
        Conditions cond = model.encode_conditions(refs, prompt);
        Tensor x = Tensor::zeros({3, side, side});
        (void)model.eps_model()(x, model.schedule.T, cond);
        ScalePoint p;
        p.k = k;
        p.cond_rows = cond.image.dim(0);
        p.encoder_macs = cost_macs("encoder");
        p.denoiser_macs = cost_macs("denoiser");
        points.push_back(p);
    }
    return points;
}

void write_scale_csv(const std::vector<ScalePoint>& points, const std::string& path) {
    std::ofstream os = open_csv(path);
    os << "refs,cond_rows,encoder_macs,denoiser_macs\n";
    for (const ScalePoint& p : points)
        os << p.k << ',' << p.cond_rows << ',' << p.encoder_macs << ',' << p.denoiser_macs << '\n';
}

std::vector<TokenPoint> token_sweep(const ModelConfig& base, const std::vector<int64_t>& n_refs,
                                    const std::vector<int64_t>& agg_blocks, int64_t k_refs,
                                    int64_t side) {
    if (n_refs.empty() || agg_blocks.empty())
        throw std::invalid_argument("token sweep: empty axis");
    NoGradGuard ng;
    std::vector<TokenPoint> points;
    for (int64_t p : agg_blocks)
        for (int64_t n : n_refs) {
            ModelConfig mc = base;
            mc.encoder.n_ref = n;
            mc.encoder.agg_blocks = p;
            RefDiffModel model(mc);
            std::vector<ImageTensor> refs(size_t(k_refs), black_image(3, side, side));
            cost_reset();
            auto t0 = std::chrono::steady_clock::now();
            Tensor cond = model.encode_image_condition(refs, "a fixed sweep prompt");
            TokenPoint tp;
            tp.n_ref = n;
            tp.agg_blocks = p;
            tp.cond_rows = cond.dim(0);
            tp.encoder_macs = cost_macs("encoder");
            tp.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            points.push_back(tp);
        }
    return points;
}

void write_token_csv(const std::vector<TokenPoint>& points, const std::string& path) {
    std::ofstream os = open_csv(path);
    os << "n_ref,agg_blocks,cond_rows,encoder_macs,wall_seconds\n";
    for (const TokenPoint& p : points)
        os << p.n_ref << ',' << p.agg_blocks << ',' << p.cond_rows << ',' << p.encoder_macs << ','
           << fmt10(p.wall_seconds) << '\n';
}

std::vector<LoraCaseRow> lora_baseline(const ModelConfig& mc, const std::string& checkpoint,
                                       const std::vector<GroupRecord>& manifest,
                                       const std::string& split, const LoraBaselineConfig& cfg,
                                       const ProbeSet& probes) {
    check_split(split);
    check_probes(probes);
    std::vector<LoraCaseRow> rows;
    for (const GroupRecord& g : manifest) {
        if (g.split != split) continue;
        std::vector<size_t> targets;
        for (size_t i = 0; i < g.images.size(); i++)
            if (g.images[i].eval_target) targets.push_back(i);
        if (targets.empty()) continue;

        std::vector<size_t> visible = training_visible(g);
        if (visible.empty()) {
            // nothing this baseline is allowed to train on: report the gap
            for (size_t i : targets) {
                LoraCaseRow row;
                row.group = g.id;
                row.index = i;
                rows.push_back(row);
            }
            continue;
        }

        // fresh tower per group so updates cannot leak between groups
        RefDiffModel model(mc);
        model.load(checkpoint);
        model.lora_wrap(Denoiser::lora_targets_all(), cfg.rank, cfg.scale);
        model.params.set_trainable({".lora."});
        AdamState optim;
        AdamConfig acfg;
        acfg.lr = cfg.lr;
        for (int64_t step = 0; step < cfg.steps; step++) {
            RandomSource rs(derive_seed(cfg.seed, "lora-step", uint64_t(g.id), uint64_t(step)));
            const RefImage& pick = g.images[visible[size_t(
                rs.uniform_int(0, int64_t(visible.size()) - 1))]];
            // text-only conditioning: the group identity must live in the
            // low-rank updates, not in reference rows
            Conditions c{model.encoder.encode_text_condition(pick.caption),
                         model.null_image_condition()};
            int64_t t = rs.uniform_int(1, model.schedule.T);
            Tensor eps = Tensor::randn(pick.image.values.shape(), rs);
            model.params.zero_grad();
            Tensor loss = training_loss(model.eps_model(), pick.image.values, c, t, eps,
                                        model.schedule);
            backward(loss);
            adam_step(model.params, acfg, optim);
        }

        NoGradGuard ng;
        for (size_t i : targets) {
            const RefImage& target = g.images[i];
            Conditions cond{model.encoder.encode_text_condition(target.caption),
                            model.null_image_condition()};
            CaseScore sc = score_target(model, cond, target, cfg.guidance, cfg.seed,
                                        case_key(g.id, i), probes);
            LoraCaseRow row;
            row.group = g.id;
            row.index = i;
            row.trained = true;
            row.sim_target = sc.sim_target;
            row.sim_text = sc.sim_text;
            row.sim_view = sc.sim_view;
            rows.push_back(row);
        }
    }
    if (rows.empty()) throw std::invalid_argument("lora baseline: split " + split + " is empty");
    return rows;
}

void write_lora_csv(const std::vector<LoraCaseRow>& rows, const std::string& path) {
    std::ofstream os = open_csv(path);
    os << "group,index,status,sim_target,sim_text,sim_view\n";
    for (const LoraCaseRow& r : rows) {
        os << r.group << ',' << r.index << ',' << (r.trained ? "lora" : "untrainable") << ',';
        if (r.trained)
            os << fmt10(r.sim_target) << ',' << fmt10(r.sim_text) << ',' << fmt10(r.sim_view);
        else
            os << ",,";
        os << '\n';
    }
}

} // namespace refdiff
