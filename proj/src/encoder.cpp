#include "refdiff/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace refdiff {

void EncoderConfig::validate() const {
    if (layers < 1) throw TensorError("encoder.layers must be >= 1");
    if (agg_blocks < 0 || agg_blocks > layers)
        throw TensorError("encoder.agg_blocks must be in [0, layers]");
    if (dim < 1 || dim % heads != 0) throw TensorError("encoder.dim must divide by heads");
    if (patch < 1) throw TensorError("encoder.patch must be >= 1");
    if (max_image_side < patch || max_image_side % patch != 0)
        throw TensorError("encoder.max_image_side must be a positive multiple of patch");
    if (vocab < 2) throw TensorError("encoder.vocab must be >= 2");
    if (n_ref < 1) throw TensorError("encoder.n_ref must be >= 1");
    if (cond_dim < 1) throw TensorError("encoder.cond_dim must be >= 1");
    if (max_refs < 1) throw TensorError("encoder.max_refs must be >= 1");
    if (int64_t(instruction.size()) > max_text_len)
        throw TensorError("encoder.instruction longer than max_text_len");
    if (max_seq < n_ref + 1) throw TensorError("encoder.max_seq too small for the reference tokens");
}

void RefEncoder::build(ParamStore& store, const EncoderConfig& config, uint64_t seed) {
    config.validate();
    cfg = config;
    double s_emb = std::sqrt(1.0 / double(cfg.dim));
    store.create("encoder.text_embed", {cfg.vocab, cfg.dim}, seed, s_emb);
    store.create("encoder.text_pos", {cfg.max_text_len, cfg.dim}, seed, s_emb);
    make_linear(store, "encoder.vision_proj", cfg.patch * cfg.patch * 3, cfg.dim, seed);
    int64_t grid = cfg.max_image_side / cfg.patch;
    store.create("encoder.pos_row", {grid, cfg.dim}, seed, s_emb);
    store.create("encoder.pos_col", {grid, cfg.dim}, seed, s_emb);
    store.create("encoder.seq_pos", {cfg.max_seq, cfg.dim}, seed, s_emb);
    for (int64_t i = 0; i < cfg.layers; i++)
        make_block(store, "encoder.block" + std::to_string(i), cfg.dim, cfg.heads, seed);
    store.create("encoder.ref_tokens", {cfg.n_ref, cfg.dim}, seed, s_emb);
    make_mlp(store, "encoder.proj_cond", cfg.dim, 4 * cfg.dim, cfg.cond_dim, seed);
    make_mlp(store, "encoder.text_proj", cfg.dim, 4 * cfg.dim, cfg.cond_dim, seed);
    store.create("encoder.null_text", {1, cfg.cond_dim}, seed, s_emb);
    rewire(store);
}

void RefEncoder::rewire(ParamStore& store) {
    ps = &store;
    text_embed = &store.get("encoder.text_embed");
    text_pos = &store.get("encoder.text_pos");
    rewire_linear(store, vision_proj, "encoder.vision_proj", 1.0);
    vision_pos_row = &store.get("encoder.pos_row");
    vision_pos_col = &store.get("encoder.pos_col");
    seq_pos = &store.get("encoder.seq_pos");
    blocks.assign(size_t(cfg.layers), TransformerBlock{});
    for (int64_t i = 0; i < cfg.layers; i++) {
        std::string pre = "encoder.block" + std::to_string(i);
        TransformerBlock& b = blocks[size_t(i)];
        b.ln1.gain = &store.get(pre + ".ln1.g");
        b.ln1.bias = &store.get(pre + ".ln1.b");
        b.ln2.gain = &store.get(pre + ".ln2.g");
        b.ln2.bias = &store.get(pre + ".ln2.b");
        b.attn.heads = cfg.heads;
        rewire_linear(store, b.attn.wq, pre + ".attn.wq", 1.0);
        rewire_linear(store, b.attn.wk, pre + ".attn.wk", 1.0);
        rewire_linear(store, b.attn.wv, pre + ".attn.wv", 1.0);
        rewire_linear(store, b.attn.wo, pre + ".attn.wo", 1.0);
        rewire_linear(store, b.mlp.fc1, pre + ".mlp.fc1", 1.0);
        rewire_linear(store, b.mlp.fc2, pre + ".mlp.fc2", 1.0);
    }
    ref_tokens = &store.get("encoder.ref_tokens");
    rewire_linear(store, proj_cond.fc1, "encoder.proj_cond.fc1", 1.0);
    rewire_linear(store, proj_cond.fc2, "encoder.proj_cond.fc2", 1.0);
    rewire_linear(store, text_proj.fc1, "encoder.text_proj.fc1", 1.0);
    rewire_linear(store, text_proj.fc2, "encoder.text_proj.fc2", 1.0);
    null_text = &store.get("encoder.null_text");
}

Tensor RefEncoder::tokenize_image(const ImageTensor& img) const {
    if (img.channels != 3) throw TensorError("reference images must have 3 channels");
    ImageTensor work = img;
    int64_t side = std::max(img.height, img.width);
    if (side > cfg.max_image_side) {
        // cap the long side exactly, scale the short side to preserve aspect
        int64_t nh, nw;
        if (img.height >= img.width) {
            nh = cfg.max_image_side;
            nw = std::max<int64_t>(1, llround(double(img.width) * cfg.max_image_side / img.height));
        } else {
            nw = cfg.max_image_side;
            nh = std::max<int64_t>(1, llround(double(img.height) * cfg.max_image_side / img.width));
        }
        work = resize_image(img, nh, nw);
    }
    int64_t p = cfg.patch;
    int64_t ph = (work.height + p - 1) / p * p;
    int64_t pw = (work.width + p - 1) / p * p;
    Tensor grid = work.values;
    if (ph != work.height || pw != work.width) {
        std::vector<double> buf(size_t(3 * ph * pw), -1.0); // pad with black
        for (int64_t c = 0; c < 3; c++)
            for (int64_t y = 0; y < work.height; y++)
                for (int64_t x = 0; x < work.width; x++)
                    buf[size_t((c * ph + y) * pw + x)] = work.at(c, y, x);
        grid = Tensor::from({3, ph, pw}, std::move(buf));
    }
    Tensor emb = vision_proj.forward(patches_from_image(grid, p));
    int64_t rows = ph / p, cols = pw / p;
    std::vector<int64_t> rid(size_t(rows * cols)), cid(size_t(rows * cols));
    for (int64_t m = 0; m < rows * cols; m++) {
        rid[size_t(m)] = m / cols;
        cid[size_t(m)] = m % cols;
    }
    return add(emb, add(gather_rows(vision_pos_row->tensor, rid),
                        gather_rows(vision_pos_col->tensor, cid)));
}

Tensor RefEncoder::tokenize_text(const std::string& text) const {
    if (int64_t(text.size()) > cfg.max_text_len)
        throw TensorError("text length " + std::to_string(text.size()) + " exceeds max_text_len " +
                          std::to_string(cfg.max_text_len));
    std::vector<int64_t> ids(text.size()), pos(text.size());
    for (size_t i = 0; i < text.size(); i++) {
        int64_t c = int64_t(static_cast<unsigned char>(text[i]));
        ids[i] = c < cfg.vocab ? c : cfg.vocab - 1; // last id doubles as UNK
        pos[i] = int64_t(i);
    }
    return add(gather_rows(text_embed->tensor, ids), gather_rows(text_pos->tensor, pos));
}

TokenSequence RefEncoder::build_instruction_sequence(const std::vector<ImageTensor>& refs,
                                                     const std::string& prompt) const {
    if (refs.empty()) throw TensorError("need at least one reference image");
    if (int64_t(refs.size()) > cfg.max_refs)
        throw TensorError("got " + std::to_string(refs.size()) +
                          " reference images, max_refs is " + std::to_string(cfg.max_refs));
    TokenSequence seq;
    std::vector<Tensor> parts;
    int64_t at = 0;
    auto push = [&](Tensor t, SegmentKind kind, int64_t image_index) {
        int64_t n = t.dim(0);
        if (n == 0) return;
        seq.segments.push_back({kind, image_index, at, n});
        at += n;
        parts.push_back(std::move(t));
    };
    if (cfg.use_instruction && !cfg.instruction.empty())
        push(tokenize_text(cfg.instruction), SegmentKind::instruction, -1);
    for (size_t i = 0; i < refs.size(); i++)
        push(tokenize_image(refs[i]), SegmentKind::image, int64_t(i));
    if (!cfg.instruction_suffix.empty())
        push(tokenize_text(cfg.instruction_suffix), SegmentKind::suffix, -1);
    if (!prompt.empty()) push(tokenize_text(prompt), SegmentKind::prompt, -1);
    // the reference tokens extend the same position table past L
    if (at + cfg.n_ref > cfg.max_seq)
        throw TensorError("sequence length " + std::to_string(at) + " + " +
                          std::to_string(cfg.n_ref) + " reference tokens exceeds max_seq " +
                          std::to_string(cfg.max_seq));
    seq.positions.resize(size_t(at));
    std::iota(seq.positions.begin(), seq.positions.end(), int64_t(0));
    Tensor cat = parts.size() == 1 ? parts[0] : concat_rows(parts);
    seq.embeddings = add(cat, gather_rows(seq_pos->tensor, seq.positions));
    return seq;
}

Tensor RefEncoder::encode_context(const TokenSequence& seq) const {
    Tensor x = seq.embeddings;
    int64_t n_ctx = cfg.layers - cfg.agg_blocks;
    if (n_ctx <= 0) return x;
    Tensor mask = causal_mask(x.dim(0));
    for (int64_t i = 0; i < n_ctx; i++) x = blocks[size_t(i)].forward(x, &mask);
    return x;
}

RefEncoder::Aggregated RefEncoder::aggregate_references(const Tensor& context) const {
    int64_t L = context.dim(0);
    if (L + cfg.n_ref > cfg.max_seq)
        throw TensorError("context too long to append reference tokens");
    std::vector<int64_t> ids(size_t(cfg.n_ref));
    std::iota(ids.begin(), ids.end(), L); // continued sequence positions
    Tensor ref = add(ref_tokens->tensor, gather_rows(seq_pos->tensor, ids));
    Tensor x = concat_rows({context, ref});
    for (int64_t i = cfg.layers - cfg.agg_blocks; i < cfg.layers; i++) {
        if (cfg.agg_bidirectional) {
            x = blocks[size_t(i)].forward(x, nullptr);
        } else {
            Tensor m = causal_context_mask(L, cfg.n_ref);
            x = blocks[size_t(i)].forward(x, &m);
        }
    }
    auto [ctx_out, ref_out] = split_rows(x, L);
    return {ctx_out, proj_cond.forward(ref_out)};
}

Tensor RefEncoder::encode_references(const std::vector<ImageTensor>& refs,
                                     const std::string& prompt) const {
    TokenSequence seq = build_instruction_sequence(refs, prompt);
    return aggregate_references(encode_context(seq)).cond;
}

Tensor RefEncoder::encode_text_condition(const std::string& prompt) const {
    if (prompt.empty()) return null_text->tensor;
    return text_proj.forward(tokenize_text(prompt));
}

Tensor RefEncoder::average_baseline(const std::vector<ImageTensor>& refs) const {
    if (refs.empty()) throw TensorError("need at least one reference image");
    std::vector<Tensor> parts;
    parts.reserve(refs.size());
    for (const ImageTensor& r : refs) parts.push_back(encode_references({r}, ""));
    // element-wise sorted summation keeps the mean permutation-invariant bit for bit
    return parts.size() == 1 ? parts[0] : mean_tensors(parts);
}

Tensor RefEncoder::concat_baseline(const std::vector<ImageTensor>& refs) const {
    if (refs.empty()) throw TensorError("need at least one reference image");
    std::vector<Tensor> parts;
    parts.reserve(refs.size());
    for (const ImageTensor& r : refs) parts.push_back(encode_references({r}, ""));
    return parts.size() == 1 ? parts[0] : concat_rows(parts);
}

} // namespace refdiff
