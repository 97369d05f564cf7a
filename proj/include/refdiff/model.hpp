#pragma once

#include <optional>
#include <string>
#include <vector>

#include "refdiff/denoiser.hpp"
#include "refdiff/diffusion.hpp"
#include "refdiff/encoder.hpp"

namespace refdiff {

// how the per-reference information reaches the denoiser:
//   tokens  - joint encoding, always n_ref condition rows
//   average - per-image encodings averaged elementwise (n_ref rows)
//   concat  - per-image encodings stacked (K * n_ref rows)
enum class AggMode { tokens, average, concat };

std::string agg_mode_name(AggMode m);
AggMode agg_mode_from(const std::string& s);

// which branch the guidance baseline nulls out
enum class UncondMode { joint, text, image };

std::string uncond_mode_name(UncondMode m);
UncondMode uncond_mode_from(const std::string& s);

struct ModelConfig {
    EncoderConfig encoder;
    DenoiserConfig denoiser;
    int64_t timesteps = 200;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    AggMode agg = AggMode::tokens;
    uint64_t init_seed = 1;
};

// the full conditioned diffusion model: one parameter store backing a
// reference encoder and an adapted denoiser, plus the noise schedule.
class RefDiffModel {
  public:
    explicit RefDiffModel(const ModelConfig& config);
    RefDiffModel(const RefDiffModel&) = delete;
    RefDiffModel& operator=(const RefDiffModel&) = delete;

    ModelConfig cfg;
    ParamStore params;
    RefEncoder encoder;
    Denoiser denoiser;
    NoiseSchedule schedule;

    void install_adapters();
    void lora_wrap(const std::vector<std::string>& targets, int64_t rank, double scale);
    void lora_merge();

    // reference images -> condition rows, routed by the aggregation mode
    Tensor encode_image_condition(const std::vector<ImageTensor>& refs,
                                  const std::string& prompt) const;
    Conditions encode_conditions(const std::vector<ImageTensor>& refs,
                                 const std::string& prompt) const;
    // the degenerate reference: a fixed-size black frame, encoded like any
    // other reference set, so "no image" is in-distribution for the denoiser
    Tensor null_image_condition() const;
    // both branches nulled: learned empty-text token + black-image encoding
    Conditions null_conditions() const;
    // cond with the selected branch(es) swapped for their null encodings
    Conditions uncond_from(const Conditions& cond, UncondMode mode) const;

    EpsModel eps_model() const;

    // checkpoint plus a sidecar ".meta" echoing the architecture; load
    // validates the sidecar against this model's config before applying
    void save(const std::string& path) const;
    // with optimizer state and the training cursor for exact resume
    void save(const std::string& path, const AdamState& optim, int64_t stage = 0,
              int64_t step = 0) const;
    struct LoadInfo {
        std::optional<AdamState> optim;
        int64_t stage = 0; // training cursor, 0 when the file has none
        int64_t step = 0;
    };
    LoadInfo load(const std::string& path);
    // apply only parameters whose names contain `filter` (plug-and-play
    // adapter/LoRA subsets); no meta or completeness checks
    void load_partial(const std::string& path, const std::string& filter);

    struct LoraInfo {
        std::vector<std::string> targets;
        int64_t rank = 0;
        double scale = 1.0;
    };
    const std::optional<LoraInfo>& lora() const { return lora_; }

  private:
    std::optional<LoraInfo> lora_;
    void write_meta(const std::string& path) const;
    void check_meta(const std::string& path);
};

// rebuild the architecture a checkpoint was written with from its meta
// sidecar; structural state (adapters, low-rank pairs) is re-applied by
// load(), not here
ModelConfig config_from_meta(const std::string& checkpoint_path);

} // namespace refdiff
