#include "refdiff/nn.hpp"

#include <cmath>
#include <limits>

namespace refdiff {

Tensor causal_mask(int64_t n) {
    std::vector<double> m(size_t(n * n), 0.0);
    double ninf = -std::numeric_limits<double>::infinity();
    for (int64_t r = 0; r < n; r++)
        for (int64_t c = r + 1; c < n; c++) m[size_t(r * n + c)] = ninf;
    return Tensor::from({n, n}, std::move(m));
}

Tensor causal_context_mask(int64_t n_ctx, int64_t n_tail) {
    int64_t n = n_ctx + n_tail;
    std::vector<double> m(size_t(n * n), 0.0);
    double ninf = -std::numeric_limits<double>::infinity();
    for (int64_t r = 0; r < n_ctx; r++)
        for (int64_t c = r + 1; c < n; c++) m[size_t(r * n + c)] = ninf;
    return Tensor::from({n, n}, std::move(m));
}

Tensor timestep_features(int64_t t, int64_t dim) {
    int64_t half = dim / 2;
    std::vector<double> f(size_t(dim), 0.0);
    for (int64_t i = 0; i < half; i++) {
        double omega = std::exp(-std::log(10000.0) * double(i) / double(half));
        f[size_t(i)] = std::sin(double(t) * omega);
        f[size_t(half + i)] = std::cos(double(t) * omega);
    }
    return Tensor::from({1, dim}, std::move(f));
}

Linear make_linear(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out,
                   uint64_t seed, bool bias) {
    Linear lin;
    lin.w = &ps.create(prefix + ".w", {in, out}, seed, std::sqrt(1.0 / double(in)));
    if (bias) lin.b = &ps.create_const(prefix + ".b", {out}, 0.0);
    return lin;
}

LayerNorm make_layernorm(ParamStore& ps, const std::string& prefix, int64_t dim) {
    LayerNorm ln;
    ln.gain = &ps.create_const(prefix + ".g", {dim}, 1.0);
    ln.bias = &ps.create_const(prefix + ".b", {dim}, 0.0);
    return ln;
}

Mlp make_mlp(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out,
             uint64_t seed) {
    Mlp mlp;
    mlp.fc1 = make_linear(ps, prefix + ".fc1", in, hidden, seed);
    mlp.fc2 = make_linear(ps, prefix + ".fc2", hidden, out, seed);
    return mlp;
}

MultiHeadAttention make_attention(ParamStore& ps, const std::string& prefix, int64_t dim,
                                  int64_t heads, uint64_t seed) {
    MultiHeadAttention a;
    a.heads = heads;
    a.wq = make_linear(ps, prefix + ".wq", dim, dim, seed, false);
    a.wk = make_linear(ps, prefix + ".wk", dim, dim, seed, false);
    a.wv = make_linear(ps, prefix + ".wv", dim, dim, seed, false);
    a.wo = make_linear(ps, prefix + ".wo", dim, dim, seed, false);
    return a;
}

TransformerBlock make_block(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                            uint64_t seed) {
    TransformerBlock b;
    b.ln1 = make_layernorm(ps, prefix + ".ln1", dim);
    b.ln2 = make_layernorm(ps, prefix + ".ln2", dim);
    b.attn = make_attention(ps, prefix + ".attn", dim, heads, seed);
    b.mlp = make_mlp(ps, prefix + ".mlp", dim, 4 * dim, dim, seed);
    return b;
}

void rewire_linear(ParamStore& ps, Linear& lin, const std::string& prefix, double lora_scale) {
    lin.w = &ps.get(prefix + ".w");
    lin.b = ps.find(prefix + ".b"); // bias-free linears simply lack the record
    lin.lora_down = ps.find(prefix + ".lora.down");
    lin.lora_up = ps.find(prefix + ".lora.up");
    lin.lora_scale = lora_scale;
}

} // namespace refdiff
