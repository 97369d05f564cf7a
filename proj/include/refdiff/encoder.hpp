#pragma once

#include <string>
#include <vector>

#include "refdiff/image.hpp"
#include "refdiff/nn.hpp"
#include "refdiff/params.hpp"

namespace refdiff {

struct EncoderConfig {
    int64_t layers = 4; // total transformer blocks
    int64_t dim = 64;
    int64_t heads = 4;
    int64_t patch = 4;
    int64_t max_image_side = 32; // oversize references are resized down to this
    int64_t vocab = 128;         // char-level; last id is UNK
    int64_t max_text_len = 128;
    int64_t n_ref = 64;   // learned reference-token count (condition rows)
    int64_t cond_dim = 64;
    int64_t max_refs = 28;
    int64_t max_seq = 2048;
    int64_t agg_blocks = 1;        // reference tokens join before the last p blocks
    bool agg_bidirectional = true; // false: context rows stay causal in those blocks
    std::string instruction = "Describe the common elements of these images:";
    std::string instruction_suffix;
    bool use_instruction = true;

    void validate() const;
};

enum class SegmentKind { instruction, image, suffix, prompt, reference };

struct Segment {
    SegmentKind kind;
    int64_t image_index; // which reference, -1 otherwise
    int64_t start, len;  // token span
};

struct TokenSequence {
    Tensor embeddings; // [L x D], sequence positions already added
    std::vector<int64_t> positions;
    std::vector<Segment> segments;
};

// multimodal context encoder: char tokens + image patch tokens run through a
// causal stack, then learned reference tokens join for the last block(s)
// bi-directionally and are projected into the condition space.
struct RefEncoder {
    EncoderConfig cfg;
    ParamStore* ps = nullptr;

    Parameter* text_embed = nullptr; // [vocab x D]
    Parameter* text_pos = nullptr;   // [max_text x D]
    Linear vision_proj;              // patch*patch*3 -> D
    Parameter* vision_pos_row = nullptr;
    Parameter* vision_pos_col = nullptr;
    Parameter* seq_pos = nullptr; // [max_seq x D]
    std::vector<TransformerBlock> blocks;
    Parameter* ref_tokens = nullptr; // [n_ref x D]
    Mlp proj_cond;                   // D -> 4D -> Dc
    Mlp text_proj;                   // D -> 4D -> Dc
    Parameter* null_text = nullptr;  // [1 x Dc]

    void build(ParamStore& store, const EncoderConfig& config, uint64_t seed);
    void rewire(ParamStore& store); // refresh pointers after store mutation

    // patch embedding + 2-D positions; oversize input is aspect-preserving
    // resized to max_image_side, then padded (-1) to a patch multiple
    Tensor tokenize_image(const ImageTensor& img) const;
    // char embeddings + text positions; empty string -> [0 x D]
    Tensor tokenize_text(const std::string& text) const;

    TokenSequence build_instruction_sequence(const std::vector<ImageTensor>& refs,
                                             const std::string& prompt) const;

    // the causal prefix of the stack (layers - agg_blocks blocks)
    Tensor encode_context(const TokenSequence& seq) const;

    struct Aggregated {
        Tensor context; // [L x D] context rows after the aggregation block(s)
        Tensor cond;    // [n_ref x Dc]
    };
    Aggregated aggregate_references(const Tensor& context) const;

    // full pipeline: always exactly n_ref condition rows, any K in [1,max_refs]
    Tensor encode_references(const std::vector<ImageTensor>& refs, const std::string& prompt) const;

    // prompt -> [Lt x Dc]; empty prompt -> the learned null-text token
    Tensor encode_text_condition(const std::string& prompt) const;

    // per-image encodings combined: order-invariant mean / row concatenation
    Tensor average_baseline(const std::vector<ImageTensor>& refs) const;
    Tensor concat_baseline(const std::vector<ImageTensor>& refs) const;
};

} // namespace refdiff
