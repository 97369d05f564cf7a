#pragma once

#include <string>
#include <vector>

#include "refdiff/dataset.hpp"
#include "refdiff/nn.hpp"

namespace refdiff {

// metric probes: small frozen encoders trained apart from the condition
// encoder, so the scores cannot inherit its biases. probe-A is a two-tower
// image/text contrastive model, probe-B an image-only one trained on
// augmented view agreement.
struct ProbeConfig {
    int64_t dim = 32;
    int64_t heads = 2;
    int64_t blocks = 2;
    int64_t patch = 4;
    int64_t embed = 16;   // metric space width, shared by both towers
    int64_t max_side = 32;
    int64_t vocab = 128;  // raw bytes, last id is the unknown bucket
    int64_t max_text = 128;
    double temperature = 10.0; // logit scale for the contrastive loss
    uint64_t init_seed = 1;

    void validate() const;
};

// patch tower shared by both probes: patches -> transformer -> mean pool ->
// projection onto the unit sphere
struct PatchTower {
    int64_t dim = 0, patch = 0, max_side = 0;
    Linear proj;
    Parameter* pos_row = nullptr;
    Parameter* pos_col = nullptr;
    std::vector<TransformerBlock> blocks;
    Linear head;

    Tensor embed(const ImageTensor& img) const; // [1 x embed], unit norm
};

class ImageTextProbe {
  public:
    explicit ImageTextProbe(const ProbeConfig& config);
    ImageTextProbe(const ImageTextProbe&) = delete;
    ImageTextProbe& operator=(const ImageTextProbe&) = delete;

    ProbeConfig cfg;
    ParamStore params;

    Tensor embed_image(const ImageTensor& img) const;
    Tensor embed_text(const std::string& text) const;
    // symmetric InfoNCE over in-batch negatives; pairs must be distinct
    Tensor batch_loss(const std::vector<ImageTensor>& images,
                      const std::vector<std::string>& texts) const;

    void save(const std::string& path) const;
    void load(const std::string& path);

  private:
    PatchTower image_;
    Parameter* text_embed_ = nullptr;
    Parameter* text_pos_ = nullptr;
    std::vector<TransformerBlock> text_blocks_;
    Linear text_head_;
    void wire();
};

class ImageOnlyProbe {
  public:
    explicit ImageOnlyProbe(const ProbeConfig& config);
    ImageOnlyProbe(const ImageOnlyProbe&) = delete;
    ImageOnlyProbe& operator=(const ImageOnlyProbe&) = delete;

    ProbeConfig cfg;
    ParamStore params;

    Tensor embed(const ImageTensor& img) const;
    // two random views per image agree against in-batch negatives
    Tensor batch_loss(const std::vector<ImageTensor>& images, RandomSource& rs) const;

    // crop / flip / brightness jitter; deterministic given the source
    static ImageTensor augment(const ImageTensor& img, RandomSource& rs);

    void save(const std::string& path) const;
    void load(const std::string& path);

  private:
    PatchTower tower_;
    void wire();
};

// training-visible (image, caption) pool for probe fitting
struct ProbePool {
    std::vector<const RefImage*> items;
    explicit ProbePool(const std::vector<GroupRecord>& manifest);
};

struct ProbeTrainConfig {
    int64_t steps = 300;
    int64_t batch = 8;
    double lr = 1e-3;
};

// returns the per-step losses. both loops are deterministic given the seed.
std::vector<double> train_image_text_probe(ImageTextProbe& probe, const ProbePool& pool,
                                           const ProbeTrainConfig& tc, uint64_t seed);
std::vector<double> train_image_only_probe(ImageOnlyProbe& probe, const ProbePool& pool,
                                           const ProbeTrainConfig& tc, uint64_t seed);

// frozen closures over both probes, in the shape the filter and the metrics
// consume. the probes must outlive the returned set.
ProbeSet probe_set(const ImageTextProbe& a, const ImageOnlyProbe& b);

} // namespace refdiff
