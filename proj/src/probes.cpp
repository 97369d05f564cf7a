#include "refdiff/probes.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace refdiff {

namespace {

// cap the long side at max_side, then pad up to patch multiples with the
// border value the renderer never emits
ImageTensor normalize_frame(const ImageTensor& img, int64_t patch, int64_t max_side) {
    ImageTensor work = img;
    if (img.height > max_side || img.width > max_side) {
        double s = double(max_side) / double(std::max(img.height, img.width));
        int64_t nh = std::max<int64_t>(1, int64_t(std::llround(double(img.height) * s)));
        int64_t nw = std::max<int64_t>(1, int64_t(std::llround(double(img.width) * s)));
        work = resize_image(img, std::min(nh, max_side), std::min(nw, max_side));
    }
    int64_t ph = (work.height + patch - 1) / patch * patch;
    int64_t pw = (work.width + patch - 1) / patch * patch;
    if (ph == work.height && pw == work.width) return work;
    ImageTensor padded = make_image(work.channels, ph, pw, -1.0);
    for (int64_t c = 0; c < work.channels; c++)
        for (int64_t y = 0; y < work.height; y++)
            for (int64_t x = 0; x < work.width; x++) padded.at(c, y, x) = work.at(c, y, x);
    return padded;
}

Tensor mean_rows(const Tensor& x) {
    int64_t m = x.dim(0);
    return matmul(Tensor::full({1, m}, 1.0 / double(m)), x);
}

std::vector<int64_t> text_ids(const std::string& text, int64_t vocab, int64_t max_text) {
    if (text.empty()) throw std::invalid_argument("probe: empty text");
    if (int64_t(text.size()) > max_text)
        throw std::invalid_argument("probe: text longer than " + std::to_string(max_text));
    std::vector<int64_t> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c < vocab ? int64_t(c) : vocab - 1);
    return ids;
}

PatchTower build_tower(ParamStore& ps, const std::string& prefix, const ProbeConfig& cfg,
                       uint64_t seed) {
    PatchTower t;
    t.dim = cfg.dim;
    t.patch = cfg.patch;
    t.max_side = cfg.max_side;
    int64_t grid = cfg.max_side / cfg.patch;
    double std0 = std::sqrt(1.0 / double(cfg.dim));
    t.proj = make_linear(ps, prefix + ".proj", 3 * cfg.patch * cfg.patch, cfg.dim,
                         derive_seed(seed, "proj"));
    t.pos_row = &ps.create(prefix + ".pos_row", {grid, cfg.dim}, derive_seed(seed, "pr"), std0);
    t.pos_col = &ps.create(prefix + ".pos_col", {grid, cfg.dim}, derive_seed(seed, "pc"), std0);
    for (int64_t b = 0; b < cfg.blocks; b++)
        t.blocks.push_back(make_block(ps, prefix + ".block" + std::to_string(b), cfg.dim,
                                      cfg.heads, derive_seed(seed, "block", uint64_t(b))));
    t.head = make_linear(ps, prefix + ".head", cfg.dim, cfg.embed, derive_seed(seed, "head"));
    return t;
}

void save_probe(const std::string& path, const ParamStore& params, const ProbeConfig& cfg) {
    CheckpointMap records = snapshot_params(params);
    records["meta.cfg"] = TensorRecord{
        {9},
        {double(cfg.dim), double(cfg.heads), double(cfg.blocks), double(cfg.patch),
         double(cfg.embed), double(cfg.max_side), double(cfg.vocab), double(cfg.max_text),
         cfg.temperature}};
    save_checkpoint(path, records);
}

void load_probe(const std::string& path, ParamStore& params, const ProbeConfig& cfg) {
    CheckpointMap records = load_checkpoint(path);
    auto it = records.find("meta.cfg");
    if (it == records.end())
        throw CheckpointError("probe checkpoint " + path + " has no architecture record");
    const std::vector<double> want = {double(cfg.dim),      double(cfg.heads),
                                      double(cfg.blocks),   double(cfg.patch),
                                      double(cfg.embed),    double(cfg.max_side),
                                      double(cfg.vocab),    double(cfg.max_text),
                                      cfg.temperature};
    static const char* names[9] = {"dim",     "heads", "blocks",   "patch",      "embed",
                                   "max_side", "vocab", "max_text", "temperature"};
    if (it->second.data.size() != want.size())
        throw CheckpointError("probe checkpoint " + path + " has a malformed architecture record");
    for (size_t i = 0; i < want.size(); i++)
        if (it->second.data[i] != want[i])
            throw CheckpointError("probe checkpoint " + path + " was trained with " +
                                  names[i] + "=" + std::to_string(it->second.data[i]) +
                                  ", this probe uses " + std::to_string(want[i]));
    apply_to_store(records, params, true);
    for (const auto& [name, rec] : records)
        if (name != "meta.cfg" && !params.has(name))
            throw CheckpointError("probe checkpoint " + path + " has unexpected parameter " +
                                  name);
}

std::vector<size_t> draw_distinct(RandomSource& rs, size_t n, int64_t batch) {
    std::vector<size_t> idx;
    std::set<size_t> used;
    while (int64_t(idx.size()) < batch) {
        size_t k = size_t(rs.uniform_int(0, int64_t(n) - 1));
        if (used.insert(k).second) idx.push_back(k);
    }
    return idx;
}

std::vector<int64_t> iota_targets(int64_t n) {
    std::vector<int64_t> t(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; i++) t[size_t(i)] = i;
    return t;
}

} // namespace

void ProbeConfig::validate() const {
    if (dim < 1 || heads < 1 || dim % heads != 0)
        throw std::invalid_argument("probe: dim must be a positive multiple of heads");
    if (blocks < 1 || patch < 1 || embed < 1) throw std::invalid_argument("probe: bad sizes");
    if (max_side % patch != 0)
        throw std::invalid_argument("probe: max_side must be a multiple of patch");
    if (vocab < 2 || max_text < 1) throw std::invalid_argument("probe: bad text sizes");
    if (temperature <= 0.0) throw std::invalid_argument("probe: temperature must be positive");
}

Tensor PatchTower::embed(const ImageTensor& img) const {
    if (img.channels != 3) throw std::invalid_argument("probe: 3-channel image required");
    ImageTensor frame = normalize_frame(img, patch, max_side);
    Tensor x = proj.forward(patches_from_image(frame.values, patch));
    int64_t cols = frame.width / patch;
    std::vector<int64_t> rids, cids;
    for (int64_t m = 0; m < x.dim(0); m++) {
        rids.push_back(m / cols);
        cids.push_back(m % cols);
    }
    x = add(x, add(gather_rows(pos_row->tensor, rids), gather_rows(pos_col->tensor, cids)));
    for (const TransformerBlock& b : blocks) x = b.forward(x);
    return l2norm_rows(head.forward(mean_rows(x)));
}

ImageTextProbe::ImageTextProbe(const ProbeConfig& config) : cfg(config) {
    cfg.validate();
    uint64_t seed = derive_seed(cfg.init_seed, "probeA");
    image_ = build_tower(params, "img", cfg, derive_seed(seed, "img"));
    double std0 = std::sqrt(1.0 / double(cfg.dim));
    text_embed_ = &params.create("txt.embed", {cfg.vocab, cfg.dim}, derive_seed(seed, "te"), std0);
    text_pos_ = &params.create("txt.pos", {cfg.max_text, cfg.dim}, derive_seed(seed, "tp"), std0);
    for (int64_t b = 0; b < cfg.blocks; b++)
        text_blocks_.push_back(make_block(params, "txt.block" + std::to_string(b), cfg.dim,
                                          cfg.heads, derive_seed(seed, "tb", uint64_t(b))));
    text_head_ = make_linear(params, "txt.head", cfg.dim, cfg.embed, derive_seed(seed, "th"));
}

void ImageTextProbe::wire() {
    rewire_linear(params, image_.proj, "img.proj", 1.0);
    rewire_linear(params, image_.head, "img.head", 1.0);
    rewire_linear(params, text_head_, "txt.head", 1.0);
}

Tensor ImageTextProbe::embed_image(const ImageTensor& img) const { return image_.embed(img); }

Tensor ImageTextProbe::embed_text(const std::string& text) const {
    std::vector<int64_t> ids = text_ids(text, cfg.vocab, cfg.max_text);
    std::vector<int64_t> pos;
    for (size_t i = 0; i < ids.size(); i++) pos.push_back(int64_t(i));
    Tensor x = add(gather_rows(text_embed_->tensor, ids), gather_rows(text_pos_->tensor, pos));
    for (const TransformerBlock& b : text_blocks_) x = b.forward(x);
    return l2norm_rows(text_head_.forward(mean_rows(x)));
}

Tensor ImageTextProbe::batch_loss(const std::vector<ImageTensor>& images,
                                  const std::vector<std::string>& texts) const {
    if (images.size() != texts.size() || images.size() < 2)
        throw std::invalid_argument("probe: batch needs >= 2 aligned pairs");
    std::vector<Tensor> ie, te;
    for (const ImageTensor& im : images) ie.push_back(embed_image(im));
    for (const std::string& t : texts) te.push_back(embed_text(t));
    Tensor logits =
        scale(matmul(concat_rows(ie), transpose(concat_rows(te))), cfg.temperature);
    std::vector<int64_t> diag = iota_targets(int64_t(images.size()));
    // both matching directions, as in standard two-tower contrastive training
    return scale(add(cross_entropy_rows(logits, diag),
                     cross_entropy_rows(transpose(logits), diag)),
                 0.5);
}

void ImageTextProbe::save(const std::string& path) const { save_probe(path, params, cfg); }
void ImageTextProbe::load(const std::string& path) {
    load_probe(path, params, cfg);
    wire();
}

ImageOnlyProbe::ImageOnlyProbe(const ProbeConfig& config) : cfg(config) {
    cfg.validate();
    tower_ = build_tower(params, "img", cfg, derive_seed(cfg.init_seed, "probeB"));
}

void ImageOnlyProbe::wire() {
    rewire_linear(params, tower_.proj, "img.proj", 1.0);
    rewire_linear(params, tower_.head, "img.head", 1.0);
}

Tensor ImageOnlyProbe::embed(const ImageTensor& img) const { return tower_.embed(img); }

ImageTensor ImageOnlyProbe::augment(const ImageTensor& img, RandomSource& rs) {
    // fixed consumption order: crop box, flip coin, brightness shift
    int64_t ch = std::max<int64_t>(4, int64_t(std::llround(rs.uniform(0.6, 1.0) * double(img.height))));
    int64_t cw = std::max<int64_t>(4, int64_t(std::llround(rs.uniform(0.6, 1.0) * double(img.width))));
    ch = std::min(ch, img.height);
    cw = std::min(cw, img.width);
    int64_t y0 = rs.uniform_int(0, img.height - ch);
    int64_t x0 = rs.uniform_int(0, img.width - cw);
    ImageTensor out = crop_image(img, y0, x0, ch, cw);
    if (rs.uniform() < 0.5) {
        ImageTensor flipped = make_image(out.channels, out.height, out.width);
        for (int64_t c = 0; c < out.channels; c++)
            for (int64_t y = 0; y < out.height; y++)
                for (int64_t x = 0; x < out.width; x++)
                    flipped.at(c, y, x) = out.at(c, y, out.width - 1 - x);
        out = std::move(flipped);
    }
    double shift = rs.uniform(-0.15, 0.15);
    for (double& v : out.values.data()) v += shift;
    return clamp_image(out);
}

Tensor ImageOnlyProbe::batch_loss(const std::vector<ImageTensor>& images,
                                  RandomSource& rs) const {
    if (images.size() < 2) throw std::invalid_argument("probe: batch needs >= 2 images");
    std::vector<Tensor> u, v;
    for (const ImageTensor& im : images) {
        u.push_back(embed(augment(im, rs)));
        v.push_back(embed(augment(im, rs)));
    }
    Tensor logits = scale(matmul(concat_rows(u), transpose(concat_rows(v))), cfg.temperature);
    std::vector<int64_t> diag = iota_targets(int64_t(images.size()));
    return scale(add(cross_entropy_rows(logits, diag),
                     cross_entropy_rows(transpose(logits), diag)),
                 0.5);
}

void ImageOnlyProbe::save(const std::string& path) const { save_probe(path, params, cfg); }
void ImageOnlyProbe::load(const std::string& path) {
    load_probe(path, params, cfg);
    wire();
}

ProbePool::ProbePool(const std::vector<GroupRecord>& manifest) {
    for (const GroupRecord& g : manifest)
        for (size_t i : training_visible(g)) items.push_back(&g.images[i]);
    if (items.size() < 2)
        throw std::invalid_argument("probe: need at least 2 training-visible images");
}

std::vector<double> train_image_text_probe(ImageTextProbe& probe, const ProbePool& pool,
                                           const ProbeTrainConfig& tc, uint64_t seed) {
    probe.params.set_trainable({""});
    AdamState optim;
    AdamConfig acfg;
    acfg.lr = tc.lr;
    int64_t batch = std::min<int64_t>(tc.batch, int64_t(pool.items.size()));
    std::vector<double> losses;
    for (int64_t step = 0; step < tc.steps; step++) {
        RandomSource rs(derive_seed(seed, "probeA-step", uint64_t(step)));
        std::vector<ImageTensor> images;
        std::vector<std::string> texts;
        for (size_t k : draw_distinct(rs, pool.items.size(), batch)) {
            images.push_back(pool.items[k]->image);
            texts.push_back(pool.items[k]->caption);
        }
        probe.params.zero_grad();
        Tensor loss = probe.batch_loss(images, texts);
        losses.push_back(loss.item());
        backward(loss);
        adam_step(probe.params, acfg, optim);
    }
    return losses;
}

std::vector<double> train_image_only_probe(ImageOnlyProbe& probe, const ProbePool& pool,
                                           const ProbeTrainConfig& tc, uint64_t seed) {
    probe.params.set_trainable({""});
    AdamState optim;
    AdamConfig acfg;
    acfg.lr = tc.lr;
    int64_t batch = std::min<int64_t>(tc.batch, int64_t(pool.items.size()));
    std::vector<double> losses;
    for (int64_t step = 0; step < tc.steps; step++) {
        RandomSource rs(derive_seed(seed, "probeB-step", uint64_t(step)));
        std::vector<ImageTensor> images;
        for (size_t k : draw_distinct(rs, pool.items.size(), batch))
            images.push_back(pool.items[k]->image);
        probe.params.zero_grad();
        Tensor loss = probe.batch_loss(images, rs);
        losses.push_back(loss.item());
        backward(loss);
        adam_step(probe.params, acfg, optim);
    }
    return losses;
}

ProbeSet probe_set(const ImageTextProbe& a, const ImageOnlyProbe& b) {
    ProbeSet s;
    s.a_image = [&a](const ImageTensor& img) {
        NoGradGuard ng;
        return a.embed_image(img).data();
    };
    s.a_text = [&a](const std::string& text) {
        NoGradGuard ng;
        return a.embed_text(text).data();
    };
    s.b_image = [&b](const ImageTensor& img) {
        NoGradGuard ng;
        return b.embed(img).data();
    };
    return s;
}

} // namespace refdiff
