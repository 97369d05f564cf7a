#pragma once

#include <string>
#include <vector>

#include "refdiff/dataset.hpp"
#include "refdiff/model.hpp"

namespace refdiff {

// every eval case is sampled this many times; pinned so reports line up
inline constexpr int64_t kSamplesPerCase = 2;

struct EvalConfig {
    GuidanceConfig guidance; // steps 30, scale 7.5
    uint64_t seed = 1;       // fixes the initial noise per (case, sample)
};

// one designated target, scored against its own group and caption
struct CaseResult {
    int64_t group = 0;
    size_t index = 0; // position of the target inside the group
    std::string split;
    int64_t refs = 0;      // reference images fed to the encoder
    int64_t cond_rows = 0; // image condition rows the denoiser saw
    double sim_target = 0; // probe-A image/image agreement with the target
    double sim_text = 0;   // probe-A image/text agreement with the caption
    double sim_view = 0;   // probe-B image/image agreement with the target
};

struct MetricsReport {
    std::string split;
    std::vector<CaseResult> cases; // sorted by (group, index)
    double sim_target = 0, sim_text = 0, sim_view = 0; // means over cases
    uint64_t encoder_macs = 0, denoiser_macs = 0;      // totals over the run
    double wall_seconds = 0;
};

// generates kSamplesPerCase images per eval target of the split and scores
// them with the frozen probes. deterministic given (model, manifest, seed);
// wall time and mac totals land in the report but not in the metrics csv.
MetricsReport evaluate(const RefDiffModel& model, const std::vector<GroupRecord>& manifest,
                       const std::string& split, const EvalConfig& cfg, const ProbeSet& probes);

// metrics csv is bit-stable across identical runs; timing csv is not and
// lives in its own file so diffs of the first stay clean
void write_metrics_csv(const MetricsReport& r, const std::string& path);
void write_timing_csv(const MetricsReport& r, const std::string& path);

// cost curve against the reference count: the encoder is the only part that
// sees more rows, the denoiser works on a fixed set of condition rows
struct ScalePoint {
    int64_t k = 0;
    int64_t cond_rows = 0;
    uint64_t encoder_macs = 0;
    uint64_t denoiser_macs = 0;
};

std::vector<ScalePoint> scale_references(const RefDiffModel& model, const std::vector<int64_t>& ks,
                                         int64_t side, const std::string& prompt);
void write_scale_csv(const std::vector<ScalePoint>& points, const std::string& path);

// structural sweep over reference-token count and aggregation depth:
// fresh untrained towers, one encoder pass each, no training involved
struct TokenPoint {
    int64_t n_ref = 0;
    int64_t agg_blocks = 0;
    int64_t cond_rows = 0;
    uint64_t encoder_macs = 0;
    double wall_seconds = 0;
};

std::vector<TokenPoint> token_sweep(const ModelConfig& base, const std::vector<int64_t>& n_refs,
                                    const std::vector<int64_t>& agg_blocks, int64_t k_refs,
                                    int64_t side);
void write_token_csv(const std::vector<TokenPoint>& points, const std::string& path);

// per-group finetuning baseline: instead of conditioning on references at
// sampling time, fold the group into low-rank weight updates. groups whose
// images are all eval-only have nothing to finetune on and stay untrained.
struct LoraBaselineConfig {
    int64_t rank = 4;
    double scale = 1.0;
    int64_t steps = 60;
    double lr = 1e-3;
    GuidanceConfig guidance;
    uint64_t seed = 1;
};

struct LoraCaseRow {
    int64_t group = 0;
    size_t index = 0;
    bool trained = false; // false: no training-visible images existed
    double sim_target = 0, sim_text = 0, sim_view = 0;
};

// rebuilds the model from the checkpoint for every group so the updates
// never leak across groups
std::vector<LoraCaseRow> lora_baseline(const ModelConfig& mc, const std::string& checkpoint,
                                       const std::vector<GroupRecord>& manifest,
                                       const std::string& split, const LoraBaselineConfig& cfg,
                                       const ProbeSet& probes);
void write_lora_csv(const std::vector<LoraCaseRow>& rows, const std::string& path);

} // namespace refdiff
