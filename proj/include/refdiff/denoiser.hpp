#pragma once

#include <string>
#include <vector>

#include "refdiff/diffusion.hpp"
#include "refdiff/nn.hpp"
#include "refdiff/params.hpp"

namespace refdiff {

struct DenoiserConfig {
    int64_t blocks = 4;
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t patch = 2;
    int64_t time_dim = 32;
    int64_t cond_dim = 64;
    int64_t channels = 3;
    int64_t max_side = 32;
    double adapter_scale = 1.0; // weight of the image branch at inference

    void validate() const;
};

// cross-attention with a shared query and two key/value branches: the text
// branch is always active; the image branch exists only once adapters are
// installed and starts zero-initialized, so installing it leaves the text-only
// output values unchanged.
struct DecoupledCrossAttention {
    Linear wq, wk, wv, wo; // wk/wv map cond_dim -> dim
    Linear adapter_wk, adapter_wv;
    bool has_adapter = false;
    int64_t heads = 1;
    double adapter_scale = 1.0;

    Tensor forward(const Tensor& x, const Conditions& c) const;
};

// pre-LN residual block: self-attention, decoupled cross-attention, MLP
struct DenoiserBlock {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn;
    DecoupledCrossAttention cross;
    Mlp mlp;

    Tensor forward(const Tensor& x, const Conditions& c) const;
};

// patch-token eps predictor. input [C,H,W] at noise level t plus conditions,
// output an eps estimate of the same shape via a linear patch readout.
struct Denoiser {
    DenoiserConfig cfg;
    Linear in_proj, out_proj;
    Parameter* pos_row = nullptr;
    Parameter* pos_col = nullptr;
    Mlp time_mlp;
    std::vector<DenoiserBlock> blocks;
    bool adapters_installed = false;
    int64_t lora_rank = 0;
    double lora_scale = 1.0;

    void build(ParamStore& store, const DenoiserConfig& config, uint64_t seed);
    void rewire(ParamStore& store);

    // zero-initialized image-branch projections for every block; repeat
    // installation is an error
    void install_adapters(ParamStore& store, uint64_t seed);

    Tensor forward(const Tensor& x_t, int64_t t, const Conditions& c) const;

    // the 8 wrappable projections: {self,cross} x {wq,wk,wv,wo}
    static const std::vector<std::string>& lora_targets_all();
    // attach low-rank pairs to the chosen projections in every block.
    // down is random, up is zero, so wrapping is an exact identity.
    void lora_wrap(ParamStore& store, const std::vector<std::string>& targets, int64_t rank,
                   double scale, uint64_t seed);
    // fold every attached pair into its base weight and drop the pair
    void lora_merge(ParamStore& store);
};

} // namespace refdiff
