#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "refdiff/dataset.hpp"
#include "refdiff/model.hpp"

namespace refdiff {

// condition dropout: one joint coin first, then independent per-branch coins.
// matched null encodings (empty-text token, black-frame reference) stand in
// for the dropped branch so guidance sees them at sampling time.
struct DropoutConfig {
    double joint = 0.05;
    double text = 0.05;
    double image = 0.05;
};

struct DropoutDraw {
    bool drop_text = false;
    bool drop_image = false;
};

DropoutDraw draw_condition_dropout(const DropoutConfig& cfg, RandomSource& rs);

// one training example: reference set, denoising target, prompt
struct TrainDraw {
    std::vector<ImageTensor> refs;
    ImageTensor target;
    std::string prompt;
};

// stage-specific example sampler. all randomness must come from the passed
// source; the loop reseeds it per step, which is what makes resume exact.
using DrawFn = std::function<TrainDraw(RandomSource&)>;

// multi-reference draw: target uniform among quality-eligible training
// members, the rest become references. augment shuffles them and keeps a
// random contiguous prefix (1..all); without it, stored order, all kept.
TrainDraw sample_multi_ref_batch(const GroupRecord& g, RandomSource& rs, bool augment);

// single-image draw: the image is its own target; with probability
// crop_prob the reference is a random window that still covers the subject
// box, otherwise the full image
TrainDraw single_ref_batch(const RefImage& pair, RandomSource& rs, double crop_prob);

struct StageConfig {
    int64_t steps = 1000;
    double lr = 1e-3;
    int64_t batch = 1; // gradient accumulation draws per optimizer step
    DropoutConfig dropout;
    int64_t checkpoint_every = 0; // 0: checkpoint only when the stage ends
};

struct StagePlan {
    int64_t index = 1; // 1-based stage number; per-step seeds derive from it
    std::vector<std::string> trainable;
    StageConfig cfg;
    DrawFn draw;
};

// substring filters selecting what each stage updates. the denoiser base is
// absent from every set and therefore never trains.
std::vector<std::string> stage1_filters(const EncoderConfig& enc);
std::vector<std::string> stage23_filters();

// one optimizer step: draw batch, joint loss, backward, adam. returns the
// mean loss over the accumulated draws.
double train_step(RefDiffModel& model, AdamState& optim, const StagePlan& plan, uint64_t run_seed,
                  int64_t step);

struct StageResult {
    std::vector<double> losses; // one entry per optimizer step taken here
};

// runs plan.cfg.steps steps (resuming from start_step when nonzero), logging
// "step,stage,loss,lr" lines and checkpointing to <out_prefix>.ckpt with
// optimizer state and cursor, so a killed run restarts bit-exactly.
StageResult run_stage(RefDiffModel& model, AdamState& optim, const StagePlan& plan,
                      uint64_t run_seed, const std::string& out_prefix, std::ostream* loss_csv,
                      int64_t start_step = 0);

} // namespace refdiff
