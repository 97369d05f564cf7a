#include "refdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>

namespace refdiff {

void DenoiserConfig::validate() const {
    if (blocks < 1) throw TensorError("denoiser.blocks must be >= 1");
    if (dim < 1 || dim % heads != 0) throw TensorError("denoiser.dim must divide by heads");
    if (patch < 1) throw TensorError("denoiser.patch must be >= 1");
    if (time_dim < 2 || time_dim % 2 != 0) throw TensorError("denoiser.time_dim must be even");
    if (cond_dim < 1) throw TensorError("denoiser.cond_dim must be >= 1");
    if (channels < 1) throw TensorError("denoiser.channels must be >= 1");
    if (max_side < patch || max_side % patch != 0)
        throw TensorError("denoiser.max_side must be a positive multiple of patch");
}

Tensor DecoupledCrossAttention::forward(const Tensor& x, const Conditions& c) const {
    Tensor q = wq.forward(x);
    Tensor kt = wk.forward(c.text);
    Tensor vt = wv.forward(c.text);
    bool use_image = has_adapter && c.image.defined() && c.image.dim(0) > 0;
    Tensor ki, vi;
    if (use_image) {
        ki = adapter_wk.forward(c.image);
        vi = adapter_wv.forward(c.image);
    }
    int64_t d = q.dim(1) / heads;
    std::vector<Tensor> outs;
    outs.reserve(size_t(heads));
    for (int64_t h = 0; h < heads; h++) {
        Tensor qh = slice_cols(q, h * d, d);
        Tensor oh = attention(qh, slice_cols(kt, h * d, d), slice_cols(vt, h * d, d));
        if (use_image) {
            Tensor ih = attention(qh, slice_cols(ki, h * d, d), slice_cols(vi, h * d, d));
            oh = add(oh, scale(ih, adapter_scale));
        }
        outs.push_back(oh);
    }
    return wo.forward(heads == 1 ? outs[0] : concat_cols(outs));
}

Tensor DenoiserBlock::forward(const Tensor& x, const Conditions& c) const {
    Tensor xn = ln1.forward(x);
    Tensor h = add(x, self_attn.forward(xn, xn, nullptr));
    h = add(h, cross.forward(ln2.forward(h), c));
    return add(h, mlp.forward(ln3.forward(h)));
}

void Denoiser::build(ParamStore& store, const DenoiserConfig& config, uint64_t seed) {
    config.validate();
    cfg = config;
    int64_t pdim = cfg.patch * cfg.patch * cfg.channels;
    make_linear(store, "denoiser.in_proj", pdim, cfg.dim, seed);
    // random readout: the base stays frozen during adaptation, so a zero
    // readout would pin every upstream gradient at zero for good
    make_linear(store, "denoiser.out_proj", cfg.dim, pdim, seed);
    int64_t grid = cfg.max_side / cfg.patch;
    double s_emb = std::sqrt(1.0 / double(cfg.dim));
    store.create("denoiser.pos_row", {grid, cfg.dim}, seed, s_emb);
    store.create("denoiser.pos_col", {grid, cfg.dim}, seed, s_emb);
    make_mlp(store, "denoiser.time", cfg.time_dim, 4 * cfg.dim, cfg.dim, seed);
    for (int64_t i = 0; i < cfg.blocks; i++) {
        std::string pre = "denoiser.block" + std::to_string(i);
        make_layernorm(store, pre + ".ln1", cfg.dim);
        make_layernorm(store, pre + ".ln2", cfg.dim);
        make_layernorm(store, pre + ".ln3", cfg.dim);
        make_attention(store, pre + ".self", cfg.dim, cfg.heads, seed);
        make_linear(store, pre + ".cross.wq", cfg.dim, cfg.dim, seed, false);
        make_linear(store, pre + ".cross.wk", cfg.cond_dim, cfg.dim, seed, false);
        make_linear(store, pre + ".cross.wv", cfg.cond_dim, cfg.dim, seed, false);
        make_linear(store, pre + ".cross.wo", cfg.dim, cfg.dim, seed, false);
        make_mlp(store, pre + ".mlp", cfg.dim, 4 * cfg.dim, cfg.dim, seed);
    }
    rewire(store);
}

void Denoiser::rewire(ParamStore& store) {
    rewire_linear(store, in_proj, "denoiser.in_proj", lora_scale);
    rewire_linear(store, out_proj, "denoiser.out_proj", lora_scale);
    pos_row = &store.get("denoiser.pos_row");
    pos_col = &store.get("denoiser.pos_col");
    rewire_linear(store, time_mlp.fc1, "denoiser.time.fc1", lora_scale);
    rewire_linear(store, time_mlp.fc2, "denoiser.time.fc2", lora_scale);
    adapters_installed = store.has("denoiser.block0.cross.adapter.wk.w");
    blocks.assign(size_t(cfg.blocks), DenoiserBlock{});
    for (int64_t i = 0; i < cfg.blocks; i++) {
        std::string pre = "denoiser.block" + std::to_string(i);
        DenoiserBlock& b = blocks[size_t(i)];
        for (auto [ln, leaf] : {std::pair<LayerNorm*, const char*>{&b.ln1, ".ln1"},
                                {&b.ln2, ".ln2"},
                                {&b.ln3, ".ln3"}}) {
            ln->gain = &store.get(pre + leaf + ".g");
            ln->bias = &store.get(pre + leaf + ".b");
        }
        b.self_attn.heads = cfg.heads;
        rewire_linear(store, b.self_attn.wq, pre + ".self.wq", lora_scale);
        rewire_linear(store, b.self_attn.wk, pre + ".self.wk", lora_scale);
        rewire_linear(store, b.self_attn.wv, pre + ".self.wv", lora_scale);
        rewire_linear(store, b.self_attn.wo, pre + ".self.wo", lora_scale);
        b.cross.heads = cfg.heads;
        b.cross.adapter_scale = cfg.adapter_scale;
        b.cross.has_adapter = adapters_installed;
        rewire_linear(store, b.cross.wq, pre + ".cross.wq", lora_scale);
        rewire_linear(store, b.cross.wk, pre + ".cross.wk", lora_scale);
        rewire_linear(store, b.cross.wv, pre + ".cross.wv", lora_scale);
        rewire_linear(store, b.cross.wo, pre + ".cross.wo", lora_scale);
        if (adapters_installed) {
            rewire_linear(store, b.cross.adapter_wk, pre + ".cross.adapter.wk", lora_scale);
            rewire_linear(store, b.cross.adapter_wv, pre + ".cross.adapter.wv", lora_scale);
        }
        rewire_linear(store, b.mlp.fc1, pre + ".mlp.fc1", lora_scale);
        rewire_linear(store, b.mlp.fc2, pre + ".mlp.fc2", lora_scale);
    }
}

void Denoiser::install_adapters(ParamStore& store, uint64_t /*seed*/) {
    if (adapters_installed) throw TensorError("image-branch adapters already installed");
    for (int64_t i = 0; i < cfg.blocks; i++) {
        std::string pre = "denoiser.block" + std::to_string(i) + ".cross.adapter";
        store.create_const(pre + ".wk.w", {cfg.cond_dim, cfg.dim}, 0.0);
        store.create_const(pre + ".wv.w", {cfg.cond_dim, cfg.dim}, 0.0);
    }
    rewire(store);
}

Tensor Denoiser::forward(const Tensor& x_t, int64_t t, const Conditions& c) const {
    if (x_t.rank() != 3 || x_t.dim(0) != cfg.channels)
        throw TensorError("denoiser input must be [channels,H,W], got " + shape_str(x_t.shape()));
    int64_t H = x_t.dim(1), W = x_t.dim(2);
    if (H % cfg.patch != 0 || W % cfg.patch != 0 || H > cfg.max_side || W > cfg.max_side)
        throw TensorError("denoiser input sides must be patch multiples within max_side");
    if (!c.text.defined()) throw TensorError("denoiser needs a text condition (use the null token)");
    CostScope cost("denoiser");
    Tensor x = in_proj.forward(patches_from_image(x_t, cfg.patch));
    int64_t rows = H / cfg.patch, cols = W / cfg.patch;
    std::vector<int64_t> rid(size_t(rows * cols)), cid(size_t(rows * cols));
    for (int64_t m = 0; m < rows * cols; m++) {
        rid[size_t(m)] = m / cols;
        cid[size_t(m)] = m % cols;
    }
    x = add(x, add(gather_rows(pos_row->tensor, rid), gather_rows(pos_col->tensor, cid)));
    Tensor tvec = time_mlp.forward(timestep_features(t, cfg.time_dim));
    x = add_rowvec(x, reshape(tvec, {cfg.dim}));
    for (const DenoiserBlock& b : blocks) x = b.forward(x, c);
    return image_from_patches(out_proj.forward(x), cfg.channels, H, W, cfg.patch);
}

const std::vector<std::string>& Denoiser::lora_targets_all() {
    static const std::vector<std::string> all = {"self.wq",  "self.wk",  "self.wv",  "self.wo",
                                                 "cross.wq", "cross.wk", "cross.wv", "cross.wo"};
    return all;
}

void Denoiser::lora_wrap(ParamStore& store, const std::vector<std::string>& targets, int64_t rank,
                         double scale, uint64_t seed) {
    if (rank < 1) throw TensorError("lora rank must be >= 1");
    const auto& all = lora_targets_all();
    for (const std::string& t : targets)
        if (std::find(all.begin(), all.end(), t) == all.end())
            throw TensorError("unknown lora target: " + t);
    for (int64_t i = 0; i < cfg.blocks; i++) {
        std::string pre = "denoiser.block" + std::to_string(i) + ".";
        for (const std::string& t : targets) {
            // cross-branch k/v read the condition rows, everything else reads dim
            bool from_cond = t == "cross.wk" || t == "cross.wv";
            int64_t in = from_cond ? cfg.cond_dim : cfg.dim;
            store.create(pre + t + ".lora.down", {in, rank}, seed, std::sqrt(1.0 / double(in)));
            store.create_const(pre + t + ".lora.up", {rank, cfg.dim}, 0.0);
        }
    }
    lora_rank = rank;
    lora_scale = scale;
    rewire(store);
}

void Denoiser::lora_merge(ParamStore& store) {
    std::vector<std::string> downs;
    for (const std::string& name : store.names())
        if (name.size() > 10 && name.compare(name.size() - 10, 10, ".lora.down") == 0)
            downs.push_back(name);
    if (downs.empty()) throw TensorError("no low-rank pairs to merge");
    for (const std::string& dname : downs) {
        std::string prefix = dname.substr(0, dname.size() - 10);
        Parameter& down = store.get(prefix + ".lora.down");
        Parameter& up = store.get(prefix + ".lora.up");
        Parameter& w = store.get(prefix + ".w");
        int64_t in = down.tensor.dim(0), r = down.tensor.dim(1), out = up.tensor.dim(1);
        const auto& dd = down.tensor.data();
        const auto& ud = up.tensor.data();
        auto& wd = w.tensor.data();
        for (int64_t i = 0; i < in; i++)
            for (int64_t j = 0; j < out; j++) {
                double acc = 0.0;
                for (int64_t k = 0; k < r; k++)
                    acc += dd[size_t(i * r + k)] * ud[size_t(k * out + j)];
                size_t at = size_t(i * out + j);
                wd[at] = quantize(wd[at] + lora_scale * acc);
            }
        store.remove(prefix + ".lora.down");
        store.remove(prefix + ".lora.up");
    }
    lora_rank = 0;
    rewire(store);
}

} // namespace refdiff
