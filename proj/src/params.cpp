#include "refdiff/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace refdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes little-endian");

Parameter& ParamStore::create(const std::string& name, const Shape& shape, uint64_t init_seed,
                              double init_stddev) {
    if (params_.count(name)) throw CheckpointError("parameter already exists: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    // seed derived from the name, so init is independent of creation order
    RandomSource rs(derive_seed(init_seed, name));
    p->tensor = Tensor::randn(shape, rs, init_stddev, true);
    auto& ref = *p;
    params_[name] = std::move(p);
    return ref;
}

Parameter& ParamStore::create_const(const std::string& name, const Shape& shape, double fill) {
    if (params_.count(name)) throw CheckpointError("parameter already exists: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->tensor = Tensor::full(shape, fill, true);
    auto& ref = *p;
    params_[name] = std::move(p);
    return ref;
}

Parameter& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw CheckpointError("unknown parameter: " + name);
    return *it->second;
}

const Parameter& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw CheckpointError("unknown parameter: " + name);
    return *it->second;
}

Parameter* ParamStore::find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
}

void ParamStore::remove(const std::string& name) {
    if (!params_.erase(name)) throw CheckpointError("unknown parameter: " + name);
}

void ParamStore::set_trainable(const std::vector<std::string>& filters) {
    for (auto& [name, p] : params_) {
        bool on = false;
        for (const auto& f : filters) {
            if (name.find(f) != std::string::npos) {
                on = true;
                break;
            }
        }
        p->trainable = on;
        // frozen leaves drop out of gradient accumulation entirely; activations
        // flowing through them still carry gradient to trainable ancestors
        p->tensor.set_requires_grad(on);
    }
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(name);
    return out;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, p] : params_) n += p->tensor.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [name, p] : params_) p->tensor.zero_grad();
}

void adam_step(ParamStore& params, const AdamConfig& cfg, AdamState& state) {
    params.for_each([&](Parameter& p) {
        if (!p.trainable || !p.tensor.has_grad()) return;
        auto& mom = state.slots[p.name];
        size_t n = p.tensor.data().size();
        if (mom.m.size() != n) {
            mom.m.assign(n, 0.0);
            mom.v.assign(n, 0.0);
            mom.t = 0;
        }
        mom.t += 1;
        double bc1 = 1.0 - std::pow(cfg.beta1, double(mom.t));
        double bc2 = 1.0 - std::pow(cfg.beta2, double(mom.t));
        auto& w = p.tensor.data();
        const auto& g = p.tensor.grad();
        for (size_t i = 0; i < n; i++) {
            mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
            mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            double mhat = mom.m[i] / bc1;
            double vhat = mom.v[i] / bc2;
            w[i] = quantize(w[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    });
    state.step += 1;
}

// ---- checkpoint io ----

namespace {

template <class T>
void put(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("checkpoint: truncated file");
    return v;
}

const char kMagic[4] = {'E', 'Z', 'R', 'F'};
const uint32_t kVersion = 1;

} // namespace

void save_checkpoint(const std::string& path, const CheckpointMap& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open for write: " + path);
    os.write(kMagic, 4);
    put(os, kVersion);
    uint8_t param_dtype = default_precision() == Precision::f32 ? 0 : 1;
    for (const auto& [name, rec] : records) {
        // optimizer moments and the training cursor are raw double state, so
        // they always go out at f64; rounding them would break exact resume
        bool aux = name.rfind("optim.", 0) == 0 || name.rfind("train.", 0) == 0;
        uint8_t dtype = aux ? 1 : param_dtype;
        put(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        put(os, dtype);
        put(os, uint32_t(rec.shape.size()));
        for (int64_t d : rec.shape) put(os, uint64_t(d));
        if (dtype == 0) {
            std::vector<float> f(rec.data.size());
            for (size_t i = 0; i < f.size(); i++) f[i] = float(rec.data[i]);
            os.write(reinterpret_cast<const char*>(f.data()),
                     std::streamsize(f.size() * sizeof(float)));
        } else {
            os.write(reinterpret_cast<const char*>(rec.data.data()),
                     std::streamsize(rec.data.size() * sizeof(double)));
        }
    }
    if (!os) throw CheckpointError("checkpoint: write failed: " + path);
}

CheckpointMap load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw CheckpointError("checkpoint: bad magic in " + path);
    uint32_t version = take<uint32_t>(is);
    if (version != kVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    CheckpointMap out;
    while (true) {
        is.peek();
        if (is.eof()) break;
        uint32_t name_len = take<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CheckpointError("checkpoint: truncated name");
        uint8_t dtype = take<uint8_t>(is);
        if (dtype > 1) throw CheckpointError("checkpoint: bad dtype tag for " + name);
        uint32_t rank = take<uint32_t>(is);
        TensorRecord rec;
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; i++) {
            int64_t d = int64_t(take<uint64_t>(is));
            rec.shape.push_back(d);
            numel *= d;
        }
        rec.data.resize(size_t(numel));
        if (dtype == 0) {
            std::vector<float> f(static_cast<size_t>(numel));
            is.read(reinterpret_cast<char*>(f.data()), std::streamsize(f.size() * sizeof(float)));
            if (!is) throw CheckpointError("checkpoint: truncated payload for " + name);
            for (size_t i = 0; i < f.size(); i++) rec.data[i] = double(f[i]);
        } else {
            is.read(reinterpret_cast<char*>(rec.data.data()),
                    std::streamsize(rec.data.size() * sizeof(double)));
            if (!is) throw CheckpointError("checkpoint: truncated payload for " + name);
        }
        out.emplace(std::move(name), std::move(rec));
    }
    return out;
}

CheckpointMap snapshot_params(const ParamStore& params) {
    CheckpointMap out;
    params.for_each([&](const Parameter& p) {
        out[p.name] = TensorRecord{p.tensor.shape(), p.tensor.data()};
    });
    return out;
}

void snapshot_optimizer(const AdamState& state, CheckpointMap& out) {
    for (const auto& [name, mom] : state.slots) {
        out["optim." + name + ".m"] = TensorRecord{{int64_t(mom.m.size())}, mom.m};
        out["optim." + name + ".v"] = TensorRecord{{int64_t(mom.v.size())}, mom.v};
        out["optim." + name + ".t"] = TensorRecord{{1}, {double(mom.t)}};
    }
    out["optim.step"] = TensorRecord{{1}, {double(state.step)}};
}

void apply_to_store(const CheckpointMap& records, ParamStore& params, bool strict,
                    const std::string& filter) {
    if (strict) {
        params.for_each([&](Parameter& p) {
            auto it = records.find(p.name);
            if (it == records.end())
                throw CheckpointError("checkpoint: missing parameter " + p.name);
            if (it->second.shape != p.tensor.shape())
                throw CheckpointError("checkpoint: shape mismatch for " + p.name + ": file " +
                                      shape_str(it->second.shape) + " vs model " +
                                      shape_str(p.tensor.shape()));
            p.tensor.data() = it->second.data;
            quantize_buffer(p.tensor.data());
        });
        return;
    }
    for (const auto& [name, rec] : records) {
        if (name.rfind("optim.", 0) == 0 || name.rfind("train.", 0) == 0) continue;
        if (!filter.empty() && name.find(filter) == std::string::npos) continue;
        Parameter* p = params.find(name);
        if (!p) continue;
        if (rec.shape != p->tensor.shape())
            throw CheckpointError("checkpoint: shape mismatch for " + name);
        p->tensor.data() = rec.data;
        quantize_buffer(p->tensor.data());
    }
}

AdamState optimizer_from_checkpoint(const CheckpointMap& records) {
    AdamState st;
    auto step_it = records.find("optim.step");
    if (step_it != records.end()) st.step = int64_t(step_it->second.data[0]);
    for (const auto& [name, rec] : records) {
        if (name.rfind("optim.", 0) != 0 || name == "optim.step") continue;
        // optim.<param>.{m,v,t}
        size_t dot = name.rfind('.');
        std::string kind = name.substr(dot + 1);
        std::string pname = name.substr(6, dot - 6);
        auto& mom = st.slots[pname];
        if (kind == "m") mom.m = rec.data;
        else if (kind == "v") mom.v = rec.data;
        else if (kind == "t") mom.t = int64_t(rec.data[0]);
    }
    return st;
}

} // namespace refdiff
