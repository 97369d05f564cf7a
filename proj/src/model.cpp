#include "refdiff/model.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace refdiff {

std::string agg_mode_name(AggMode m) {
    switch (m) {
        case AggMode::tokens: return "tokens";
        case AggMode::average: return "average";
        case AggMode::concat: return "concat";
    }
    return "tokens";
}

AggMode agg_mode_from(const std::string& s) {
    if (s == "tokens") return AggMode::tokens;
    if (s == "average") return AggMode::average;
    if (s == "concat") return AggMode::concat;
    throw TensorError("unknown aggregation mode: " + s + " (expected tokens|average|concat)");
}

std::string uncond_mode_name(UncondMode m) {
    switch (m) {
        case UncondMode::joint: return "joint";
        case UncondMode::text: return "text";
        case UncondMode::image: return "image";
    }
    return "joint";
}

UncondMode uncond_mode_from(const std::string& s) {
    if (s == "joint") return UncondMode::joint;
    if (s == "text") return UncondMode::text;
    if (s == "image") return UncondMode::image;
    throw TensorError("unknown uncond mode: " + s + " (expected joint|text|image)");
}

RefDiffModel::RefDiffModel(const ModelConfig& config) : cfg(config) {
    if (cfg.encoder.cond_dim != cfg.denoiser.cond_dim)
        throw TensorError("encoder and denoiser disagree on cond_dim");
    encoder.build(params, cfg.encoder, derive_seed(cfg.init_seed, "encoder"));
    denoiser.build(params, cfg.denoiser, derive_seed(cfg.init_seed, "denoiser"));
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end);
}

void RefDiffModel::install_adapters() {
    denoiser.install_adapters(params, derive_seed(cfg.init_seed, "adapter"));
}

void RefDiffModel::lora_wrap(const std::vector<std::string>& targets, int64_t rank, double scale) {
    if (lora_) throw TensorError("low-rank pairs already attached");
    denoiser.lora_wrap(params, targets, rank, scale, derive_seed(cfg.init_seed, "lora"));
    lora_ = LoraInfo{targets, rank, scale};
}

void RefDiffModel::lora_merge() {
    denoiser.lora_merge(params);
    lora_.reset();
}

Tensor RefDiffModel::encode_image_condition(const std::vector<ImageTensor>& refs,
                                            const std::string& prompt) const {
    CostScope cost("encoder");
    switch (cfg.agg) {
        case AggMode::tokens: return encoder.encode_references(refs, prompt);
        case AggMode::average: return encoder.average_baseline(refs);
        case AggMode::concat: return encoder.concat_baseline(refs);
    }
    return encoder.encode_references(refs, prompt);
}

Conditions RefDiffModel::encode_conditions(const std::vector<ImageTensor>& refs,
                                           const std::string& prompt) const {
    return {encoder.encode_text_condition(prompt), encode_image_condition(refs, prompt)};
}

Tensor RefDiffModel::null_image_condition() const {
    // fixed size so the unconditional branch never depends on sample geometry
    int64_t side = std::min(cfg.encoder.max_image_side, 4 * cfg.encoder.patch);
    std::vector<ImageTensor> null_ref = {black_image(3, side, side)};
    return encode_image_condition(null_ref, "");
}

Conditions RefDiffModel::null_conditions() const {
    return {encoder.encode_text_condition(""), null_image_condition()};
}

Conditions RefDiffModel::uncond_from(const Conditions& cond, UncondMode mode) const {
    Conditions null_c = null_conditions();
    switch (mode) {
        case UncondMode::joint: return null_c;
        case UncondMode::text: return {null_c.text, cond.image};
        case UncondMode::image: return {cond.text, null_c.image};
    }
    return null_c;
}

EpsModel RefDiffModel::eps_model() const {
    return [this](const Tensor& x_t, int64_t t, const Conditions& c) {
        return denoiser.forward(x_t, t, c);
    };
}

// ---- checkpoint meta sidecar ----

static std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

static std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (size_t i = 0; i < v.size(); i++) {
        if (i) out.push_back(sep);
        out += v[i];
    }
    return out;
}

void RefDiffModel::write_meta(const std::string& path) const {
    std::ofstream os(path + ".meta");
    if (!os) throw CheckpointError("cannot write meta file: " + path + ".meta");
    const EncoderConfig& e = cfg.encoder;
    const DenoiserConfig& d = cfg.denoiser;
    os << "agg=" << agg_mode_name(cfg.agg) << "\n";
    os << "timesteps=" << cfg.timesteps << "\n";
    os << "beta_start=" << fmt_double(cfg.beta_start) << "\n";
    os << "beta_end=" << fmt_double(cfg.beta_end) << "\n";
    os << "encoder.layers=" << e.layers << "\n";
    os << "encoder.dim=" << e.dim << "\n";
    os << "encoder.heads=" << e.heads << "\n";
    os << "encoder.patch=" << e.patch << "\n";
    os << "encoder.max_image_side=" << e.max_image_side << "\n";
    os << "encoder.vocab=" << e.vocab << "\n";
    os << "encoder.max_text_len=" << e.max_text_len << "\n";
    os << "encoder.n_ref=" << e.n_ref << "\n";
    os << "encoder.cond_dim=" << e.cond_dim << "\n";
    os << "encoder.max_refs=" << e.max_refs << "\n";
    os << "encoder.max_seq=" << e.max_seq << "\n";
    os << "encoder.agg_blocks=" << e.agg_blocks << "\n";
    os << "encoder.agg_bidirectional=" << (e.agg_bidirectional ? 1 : 0) << "\n";
    os << "encoder.instruction=" << e.instruction << "\n";
    os << "encoder.instruction_suffix=" << e.instruction_suffix << "\n";
    os << "encoder.use_instruction=" << (e.use_instruction ? 1 : 0) << "\n";
    os << "denoiser.blocks=" << d.blocks << "\n";
    os << "denoiser.dim=" << d.dim << "\n";
    os << "denoiser.heads=" << d.heads << "\n";
    os << "denoiser.patch=" << d.patch << "\n";
    os << "denoiser.time_dim=" << d.time_dim << "\n";
    os << "denoiser.cond_dim=" << d.cond_dim << "\n";
    os << "denoiser.channels=" << d.channels << "\n";
    os << "denoiser.max_side=" << d.max_side << "\n";
    os << "denoiser.adapter_scale=" << fmt_double(d.adapter_scale) << "\n";
    os << "adapters=" << (denoiser.adapters_installed ? 1 : 0) << "\n";
    if (lora_) {
        os << "lora.rank=" << lora_->rank << "\n";
        os << "lora.scale=" << fmt_double(lora_->scale) << "\n";
        os << "lora.targets=" << join(lora_->targets, ',') << "\n";
    }
    if (!os) throw CheckpointError("meta write failed: " + path + ".meta");
}

void RefDiffModel::check_meta(const std::string& path) {
    std::string mpath = path + ".meta";
    std::ifstream is(mpath);
    if (!is) throw CheckpointError("missing meta file: " + mpath);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw CheckpointError("malformed meta line in " + mpath + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto want = [&](const std::string& key, const std::string& self) {
        auto it = kv.find(key);
        if (it == kv.end()) throw CheckpointError("meta file " + mpath + " missing key " + key);
        if (it->second != self)
            throw CheckpointError("checkpoint " + path + " was written with " + key + "=" +
                                  it->second + ", this run uses " + key + "=" + self);
        kv.erase(it);
    };
    const EncoderConfig& e = cfg.encoder;
    const DenoiserConfig& d = cfg.denoiser;
    want("agg", agg_mode_name(cfg.agg));
    want("timesteps", std::to_string(cfg.timesteps));
    want("beta_start", fmt_double(cfg.beta_start));
    want("beta_end", fmt_double(cfg.beta_end));
    want("encoder.layers", std::to_string(e.layers));
    want("encoder.dim", std::to_string(e.dim));
    want("encoder.heads", std::to_string(e.heads));
    want("encoder.patch", std::to_string(e.patch));
    want("encoder.max_image_side", std::to_string(e.max_image_side));
    want("encoder.vocab", std::to_string(e.vocab));
    want("encoder.max_text_len", std::to_string(e.max_text_len));
    want("encoder.n_ref", std::to_string(e.n_ref));
    want("encoder.cond_dim", std::to_string(e.cond_dim));
    want("encoder.max_refs", std::to_string(e.max_refs));
    want("encoder.max_seq", std::to_string(e.max_seq));
    want("encoder.agg_blocks", std::to_string(e.agg_blocks));
    want("encoder.agg_bidirectional", e.agg_bidirectional ? "1" : "0");
    want("encoder.instruction", e.instruction);
    want("encoder.instruction_suffix", e.instruction_suffix);
    want("encoder.use_instruction", e.use_instruction ? "1" : "0");
    want("denoiser.blocks", std::to_string(d.blocks));
    want("denoiser.dim", std::to_string(d.dim));
    want("denoiser.heads", std::to_string(d.heads));
    want("denoiser.patch", std::to_string(d.patch));
    want("denoiser.time_dim", std::to_string(d.time_dim));
    want("denoiser.cond_dim", std::to_string(d.cond_dim));
    want("denoiser.channels", std::to_string(d.channels));
    want("denoiser.max_side", std::to_string(d.max_side));
    want("denoiser.adapter_scale", fmt_double(d.adapter_scale));
    auto it = kv.find("adapters");
    if (it == kv.end()) throw CheckpointError("meta file " + mpath + " missing key adapters");
    bool file_adapters = it->second == "1";
    kv.erase(it);
    if (file_adapters && !denoiser.adapters_installed) install_adapters();
    if (kv.count("lora.rank")) {
        LoraInfo info;
        info.rank = std::stoll(kv.at("lora.rank"));
        info.scale = std::stod(kv.at("lora.scale"));
        std::stringstream ss(kv.at("lora.targets"));
        std::string tok;
        while (std::getline(ss, tok, ',')) info.targets.push_back(tok);
        kv.erase("lora.rank");
        kv.erase("lora.scale");
        kv.erase("lora.targets");
        if (!lora_) lora_wrap(info.targets, info.rank, info.scale);
    }
    if (!kv.empty())
        throw CheckpointError("meta file " + mpath + " has unexpected key " + kv.begin()->first);
}

void RefDiffModel::save(const std::string& path) const {
    save_checkpoint(path, snapshot_params(params));
    write_meta(path);
}

void RefDiffModel::save(const std::string& path, const AdamState& optim, int64_t stage,
                        int64_t step) const {
    CheckpointMap records = snapshot_params(params);
    snapshot_optimizer(optim, records);
    records["train.progress"] = TensorRecord{{2}, {double(stage), double(step)}};
    save_checkpoint(path, records);
    write_meta(path);
}

RefDiffModel::LoadInfo RefDiffModel::load(const std::string& path) {
    CheckpointMap records = load_checkpoint(path);
    check_meta(path); // may install adapters / attach low-rank pairs
    apply_to_store(records, params, true);
    for (const auto& [name, rec] : records)
        if (name.rfind("optim.", 0) != 0 && name.rfind("train.", 0) != 0 && !params.has(name))
            throw CheckpointError("checkpoint " + path + " has unexpected parameter " + name);
    LoadInfo info;
    if (records.count("optim.step")) info.optim = optimizer_from_checkpoint(records);
    auto it = records.find("train.progress");
    if (it != records.end() && it->second.data.size() == 2) {
        info.stage = int64_t(it->second.data[0]);
        info.step = int64_t(it->second.data[1]);
    }
    return info;
}

void RefDiffModel::load_partial(const std::string& path, const std::string& filter) {
    apply_to_store(load_checkpoint(path), params, false, filter);
}

ModelConfig config_from_meta(const std::string& checkpoint_path) {
    std::string mpath = checkpoint_path + ".meta";
    std::ifstream is(mpath);
    if (!is) throw CheckpointError("missing meta file: " + mpath);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw CheckpointError("malformed meta line in " + mpath + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto take = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw CheckpointError("meta file " + mpath + " missing key " + key);
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto to_i = [&](const std::string& key) {
        try {
            return int64_t(std::stoll(take(key)));
        } catch (const CheckpointError&) {
            throw;
        } catch (const std::exception&) {
            throw CheckpointError("meta file " + mpath + " has a malformed value for " + key);
        }
    };
    auto to_d = [&](const std::string& key) {
        try {
            return std::stod(take(key));
        } catch (const CheckpointError&) {
            throw;
        } catch (const std::exception&) {
            throw CheckpointError("meta file " + mpath + " has a malformed value for " + key);
        }
    };
    ModelConfig mc;
    mc.agg = agg_mode_from(take("agg"));
    mc.timesteps = to_i("timesteps");
    mc.beta_start = to_d("beta_start");
    mc.beta_end = to_d("beta_end");
    EncoderConfig& e = mc.encoder;
    e.layers = to_i("encoder.layers");
    e.dim = to_i("encoder.dim");
    e.heads = to_i("encoder.heads");
    e.patch = to_i("encoder.patch");
    e.max_image_side = to_i("encoder.max_image_side");
    e.vocab = to_i("encoder.vocab");
    e.max_text_len = to_i("encoder.max_text_len");
    e.n_ref = to_i("encoder.n_ref");
    e.cond_dim = to_i("encoder.cond_dim");
    e.max_refs = to_i("encoder.max_refs");
    e.max_seq = to_i("encoder.max_seq");
    e.agg_blocks = to_i("encoder.agg_blocks");
    e.agg_bidirectional = to_i("encoder.agg_bidirectional") != 0;
    e.instruction = take("encoder.instruction");
    e.instruction_suffix = take("encoder.instruction_suffix");
    e.use_instruction = to_i("encoder.use_instruction") != 0;
    DenoiserConfig& d = mc.denoiser;
    d.blocks = to_i("denoiser.blocks");
    d.dim = to_i("denoiser.dim");
    d.heads = to_i("denoiser.heads");
    d.patch = to_i("denoiser.patch");
    d.time_dim = to_i("denoiser.time_dim");
    d.cond_dim = to_i("denoiser.cond_dim");
    d.channels = to_i("denoiser.channels");
    d.max_side = to_i("denoiser.max_side");
    d.adapter_scale = to_d("denoiser.adapter_scale");
    // structural flags are consumed by load(); drop them here
    kv.erase("adapters");
    kv.erase("lora.rank");
    kv.erase("lora.scale");
    kv.erase("lora.targets");
    if (!kv.empty())
        throw CheckpointError("meta file " + mpath + " has unexpected key " + kv.begin()->first);
    return mc;
}

} // namespace refdiff
