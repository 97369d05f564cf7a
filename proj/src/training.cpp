#include "refdiff/training.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace refdiff {

DropoutDraw draw_condition_dropout(const DropoutConfig& cfg, RandomSource& rs) {
    DropoutDraw d;
    if (rs.uniform() < cfg.joint) {
        d.drop_text = true;
        d.drop_image = true;
        return d;
    }
    d.drop_text = rs.uniform() < cfg.text;
    d.drop_image = rs.uniform() < cfg.image;
    return d;
}

std::vector<std::string> stage1_filters(const EncoderConfig& enc) {
    // alignment stage: adapters, the learned query bank, its output projector,
    // and only the aggregation blocks of the encoder. the causal context
    // blocks and both embedding tables stay at init.
    std::vector<std::string> f = {".adapter.", "encoder.ref_tokens", "encoder.proj_cond."};
    for (int64_t i = enc.layers - enc.agg_blocks; i < enc.layers; ++i)
        f.push_back("encoder.block" + std::to_string(i) + ".");
    return f;
}

std::vector<std::string> stage23_filters() {
    // later stages unfreeze the whole encoder; low-rank pairs join when
    // attached. the denoiser base never appears in any stage's filters.
    return {"encoder.", ".adapter.", ".lora."};
}

TrainDraw sample_multi_ref_batch(const GroupRecord& g, RandomSource& rs, bool augment) {
    std::vector<size_t> visible = training_visible(g);
    if (visible.size() < 2)
        throw std::invalid_argument("sample_multi_ref_batch: group " + std::to_string(g.id) +
                                    " has fewer than 2 training-visible images");
    std::vector<size_t> targets = training_targets(g);
    if (targets.empty())
        throw std::invalid_argument("sample_multi_ref_batch: group " + std::to_string(g.id) +
                                    " has no quality-eligible target");
    size_t target = targets[size_t(rs.uniform_int(0, int64_t(targets.size()) - 1))];

    TrainDraw d;
    d.target = g.images[target].image;
    d.prompt = g.images[target].caption;
    for (size_t i : visible)
        if (i != target) d.refs.push_back(g.images[i].image);
    if (augment) {
        rs.shuffle(d.refs);
        int64_t keep = rs.uniform_int(1, int64_t(d.refs.size()));
        d.refs.resize(size_t(keep));
    }
    return d;
}

TrainDraw single_ref_batch(const RefImage& pair, RandomSource& rs, double crop_prob) {
    TrainDraw d;
    d.target = pair.image;
    d.prompt = pair.caption;
    const BBox& bb = pair.bbox;
    bool crop = rs.uniform() < crop_prob && bb.h > 0 && bb.w > 0;
    if (!crop) {
        d.refs.push_back(pair.image);
        return d;
    }
    // window size between the subject box and the full frame, positioned so
    // the box stays entirely inside
    int64_t ch = rs.uniform_int(bb.h, pair.image.height);
    int64_t cw = rs.uniform_int(bb.w, pair.image.width);
    int64_t y0 = rs.uniform_int(std::max<int64_t>(0, bb.y0 + bb.h - ch),
                                std::min(bb.y0, pair.image.height - ch));
    int64_t x0 = rs.uniform_int(std::max<int64_t>(0, bb.x0 + bb.w - cw),
                                std::min(bb.x0, pair.image.width - cw));
    d.refs.push_back(crop_image(pair.image, y0, x0, ch, cw));
    return d;
}

double train_step(RefDiffModel& model, AdamState& optim, const StagePlan& plan, uint64_t run_seed,
                  int64_t step) {
    if (plan.cfg.batch < 1) throw std::invalid_argument("train_step: batch must be >= 1");
    if (!plan.draw) throw std::invalid_argument("train_step: stage has no draw function");

    // one source per step, consumed in a pinned order (draw, dropout, t,
    // noise, repeated per batch item). resuming at this step replays it.
    RandomSource rs(derive_seed(run_seed, "stage", static_cast<uint64_t>(plan.index),
                                static_cast<uint64_t>(step)));

    model.params.zero_grad();
    const double inv_batch = 1.0 / static_cast<double>(plan.cfg.batch);
    double loss_sum = 0.0;
    for (int64_t b = 0; b < plan.cfg.batch; ++b) {
        TrainDraw ex = plan.draw(rs);
        DropoutDraw drop = draw_condition_dropout(plan.cfg.dropout, rs);

        Conditions cond;
        cond.text = drop.drop_text ? model.encoder.encode_text_condition("")
                                   : model.encoder.encode_text_condition(ex.prompt);
        cond.image = drop.drop_image ? model.null_image_condition()
                                     : model.encode_image_condition(ex.refs, ex.prompt);

        int64_t t = rs.uniform_int(1, model.schedule.T);
        const Tensor& x0 = ex.target.values;
        Tensor eps = Tensor::randn(x0.shape(), rs);
        Tensor loss = training_loss(model.eps_model(), x0, cond, t, eps, model.schedule);
        loss_sum += loss.item();
        // accumulated graphs: scale each item so grads sum to the batch mean
        backward(scale(loss, inv_batch));
    }
    AdamConfig acfg;
    acfg.lr = plan.cfg.lr;
    adam_step(model.params, acfg, optim);
    return loss_sum * inv_batch;
}

StageResult run_stage(RefDiffModel& model, AdamState& optim, const StagePlan& plan,
                      uint64_t run_seed, const std::string& out_prefix, std::ostream* loss_csv,
                      int64_t start_step) {
    if (plan.cfg.steps < 1) throw std::invalid_argument("run_stage: steps must be >= 1");
    if (start_step < 0 || start_step > plan.cfg.steps)
        throw std::invalid_argument("run_stage: start_step out of range");

    model.params.set_trainable(plan.trainable);

    StageResult res;
    for (int64_t step = start_step; step < plan.cfg.steps; ++step) {
        double loss = train_step(model, optim, plan, run_seed, step);
        res.losses.push_back(loss);
        if (loss_csv)
            *loss_csv << step << ',' << plan.index << ',' << loss << ',' << plan.cfg.lr << '\n';
        bool last = step + 1 == plan.cfg.steps;
        if (!out_prefix.empty() &&
            (last || (plan.cfg.checkpoint_every > 0 && (step + 1) % plan.cfg.checkpoint_every == 0)))
            model.save(out_prefix + ".ckpt", optim, plan.index, step + 1);
    }
    return res;
}

} // namespace refdiff
