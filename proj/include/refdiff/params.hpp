#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "refdiff/tensor.hpp"

namespace refdiff {

struct Parameter {
    std::string name;
    Tensor tensor;          // leaf node, requires_grad = true
    bool trainable = true;  // toggled per training stage; frozen params are
                            // skipped by the optimizer entirely
};

// name -> parameter. iteration order is the sorted name order, which keeps
// checkpoints and update sweeps deterministic.
class ParamStore {
  public:
    Parameter& create(const std::string& name, const Shape& shape, uint64_t init_seed,
                      double init_stddev);
    Parameter& create_const(const std::string& name, const Shape& shape, double fill);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    Parameter* find(const std::string& name);
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    void remove(const std::string& name);
    size_t size() const { return params_.size(); }

    template <class F>
    void for_each(F&& f) {
        for (auto& [name, p] : params_) f(*p);
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto& [name, p] : params_) f(*p);
    }

    // a parameter is trainable iff any filter string occurs in its name
    void set_trainable(const std::vector<std::string>& filters);
    std::vector<std::string> names() const;
    int64_t total_elements() const;
    void zero_grad();

  private:
    std::map<std::string, std::unique_ptr<Parameter>> params_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// moment state keyed by parameter name; created lazily on the first update
// so frozen parameters never grow state
struct AdamState {
    struct Moments {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::map<std::string, Moments> slots;
    int64_t step = 0; // global step counter, persisted for resume
};

// one update over every trainable parameter that has a populated grad.
// frozen parameters are left bit-identical.
void adam_step(ParamStore& params, const AdamConfig& cfg, AdamState& state);

// ---- checkpoint container ----
// layout: magic "EZRF", u32 version, then records of
//   u32 name_len | name bytes | u8 dtype (0=f32, 1=f64) | u32 rank |
//   u64 extents[rank] | little-endian payload
// records are sorted by name; round-trips are byte-exact.

struct TensorRecord {
    Shape shape;
    std::vector<double> data;
};

using CheckpointMap = std::map<std::string, TensorRecord>;

void save_checkpoint(const std::string& path, const CheckpointMap& records);
CheckpointMap load_checkpoint(const std::string& path);

CheckpointMap snapshot_params(const ParamStore& params);
void snapshot_optimizer(const AdamState& state, CheckpointMap& out);

// strict: every store parameter must be present with a matching shape.
// prefix mode: only records whose names contain `filter` are applied
// (plug-and-play loading of adapter/LoRA subsets onto a base model).
void apply_to_store(const CheckpointMap& records, ParamStore& params, bool strict,
                    const std::string& filter = "");
AdamState optimizer_from_checkpoint(const CheckpointMap& records);

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace refdiff
