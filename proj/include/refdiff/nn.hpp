#pragma once

#include "refdiff/params.hpp"
#include "refdiff/tensor.hpp"

namespace refdiff {

// y = x.W (+ b). when a low-rank pair is attached the effective weight is
// W + lora_scale * down.up, computed factored so the wrap stays cheap.
struct Linear {
    Parameter* w = nullptr;
    Parameter* b = nullptr;
    Parameter* lora_down = nullptr;
    Parameter* lora_up = nullptr;
    double lora_scale = 1.0;

    Tensor forward(const Tensor& x) const {
        Tensor y = matmul(x, w->tensor);
        if (lora_down && lora_up)
            y = add(y, scale(matmul(matmul(x, lora_down->tensor), lora_up->tensor), lora_scale));
        if (b) y = add_rowvec(y, b->tensor);
        return y;
    }
};

struct LayerNorm {
    Parameter* gain = nullptr;
    Parameter* bias = nullptr;
    Tensor forward(const Tensor& x) const { return layernorm(x, gain->tensor, bias->tensor); }
};

// 2-layer MLP with GELU, dim -> hidden -> out
struct Mlp {
    Linear fc1, fc2;
    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// multi-head attention over pre-projected inputs; the per-head kernel is the
// shared scaled-dot-product attention op
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int64_t heads = 1;

    Tensor forward(const Tensor& x_q, const Tensor& x_kv, const Tensor* mask = nullptr) const {
        Tensor q = wq.forward(x_q);
        Tensor k = wk.forward(x_kv);
        Tensor v = wv.forward(x_kv);
        int64_t d = q.dim(1) / heads;
        std::vector<Tensor> outs;
        outs.reserve(size_t(heads));
        for (int64_t h = 0; h < heads; h++) {
            Tensor qh = slice_cols(q, h * d, d);
            Tensor kh = slice_cols(k, h * d, d);
            Tensor vh = slice_cols(v, h * d, d);
            outs.push_back(attention(qh, kh, vh, mask));
        }
        return wo.forward(heads == 1 ? outs[0] : concat_cols(outs));
    }
};

// pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x))
struct TransformerBlock {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    Mlp mlp;

    Tensor forward(const Tensor& x, const Tensor* mask = nullptr) const {
        Tensor xn = ln1.forward(x);
        Tensor h = add(x, attn.forward(xn, xn, mask));
        return add(h, mlp.forward(ln2.forward(h)));
    }
};

// additive masks shared by the encoders: 0 = attend, -inf = blocked
Tensor causal_mask(int64_t n);
// rows [0,n_ctx) causal among themselves and blind to the tail;
// rows [n_ctx, n_ctx+n_tail) attend everywhere
Tensor causal_context_mask(int64_t n_ctx, int64_t n_tail);

// sinusoidal features of an integer timestep, length dim (half sin, half cos)
Tensor timestep_features(int64_t t, int64_t dim);

// registration helpers: create parameters under `prefix` and wire a module
Linear make_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out,
                   uint64_t seed, bool bias = true);
LayerNorm make_layernorm(ParamStore& ps, const std::string& prefix, int64_t dim);
Mlp make_mlp(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out,
             uint64_t seed);
MultiHeadAttention make_attention(ParamStore& ps, const std::string& prefix, int64_t dim,
                                  int64_t heads, uint64_t seed);
TransformerBlock make_block(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                            uint64_t seed);

// (re-)wire a Linear from the store by prefix: .w required, .b and the
// .lora.* pair optional. used after builds and LoRA install/merge.
void rewire_linear(ParamStore& ps, Linear& lin, const std::string& prefix, double lora_scale);

} // namespace refdiff
