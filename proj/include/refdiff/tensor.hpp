#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "refdiff/rng.hpp"

namespace refdiff {

// numeric storage width. f32 keeps every stored value exactly representable
// as a 32-bit float (ops quantize their outputs); f64 is full double and is
// what the finite-difference gradient checks run under.
enum class Precision { f32, f64 };

Precision default_precision();
void set_default_precision(Precision p);

struct PrecisionGuard {
    Precision saved;
    explicit PrecisionGuard(Precision p) : saved(default_precision()) { set_default_precision(p); }
    ~PrecisionGuard() { set_default_precision(saved); }
};

// when grad mode is off, ops record no parents and no backward closures
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(saved); }
};

// forward matmul MAC counting, keyed by the innermost active scope.
// counters are thread-local; scopes nest.
void cost_scope_push(const std::string& name);
void cost_scope_pop();
uint64_t cost_macs(const std::string& name);
void cost_reset();

struct CostScope {
    explicit CostScope(const std::string& name) { cost_scope_push(name); }
    ~CostScope() { cost_scope_pop(); }
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// one dynamic-tape node. parents + backprop form the tape edge; both are
// dropped after backward() so intermediate buffers free as soon as the
// caller releases its handles.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // allocated lazily, same length as value
    bool requires_grad = false;
    bool backward_done = false;
    uint64_t seq = 0; // creation order, debugging aid
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backprop;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor randn(const Shape& shape, RandomSource& rs, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t dim(size_t i) const { return n_->shape[i]; }
    int64_t rank() const { return int64_t(n_->shape.size()); }
    int64_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    std::vector<double>& data() { return n_->value; }
    const std::vector<double>& data() const { return n_->value; }
    std::vector<double>& grad() { return n_->grad; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

    double item() const;
    double at(int64_t r, int64_t c) const; // rank-2 accessor

    NodePtr node() const { return n_; }

  private:
    NodePtr n_;
};

// rounds v to f32 when the engine is in f32 mode
double quantize(double v);
void quantize_buffer(std::vector<double>& v);

// ---- ops ----
// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// [m x n] + [n] broadcast over rows
Tensor add_rowvec(const Tensor& a, const Tensor& v);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b); // [m x k] * [k x n]
Tensor transpose(const Tensor& a);               // rank 2

Tensor softmax(const Tensor& x, int axis); // negative axis counts from the back
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// rows scaled to unit euclidean norm; eps keeps zero rows finite
Tensor l2norm_rows(const Tensor& x, double eps = 1e-12);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);  // -> scalar
Tensor mean(const Tensor& x); // -> scalar
Tensor mse(const Tensor& a, const Tensor& b);

// scaled dot-product attention: Q [m x d], K [s x d], V [s x dv],
// optional additive mask [m x s] (use -inf to block)
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* mask = nullptr);

// elementwise mean of same-shaped tensors. addends are value-sorted per
// element before summing, so the result is bit-identical under any
// permutation of the inputs.
Tensor mean_tensors(const std::vector<Tensor>& parts);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t row0, int64_t nrows);
std::pair<Tensor, Tensor> split_rows(const Tensor& x, int64_t nrows_first);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, int64_t col0, int64_t ncols);

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);
Tensor reshape(const Tensor& x, const Shape& shape);

// [C,H,W] -> [M x p*p*C] non-overlapping patches in row-major grid order;
// requires H,W divisible by p. within a patch the layout is (c, dy, dx).
Tensor patches_from_image(const Tensor& img, int64_t p);
Tensor image_from_patches(const Tensor& x, int64_t channels, int64_t h, int64_t w, int64_t p);

// cross_entropy over rows of logits against integer targets, mean-reduced
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets);

// reverse pass from a scalar loss. populates .grad on every requires_grad
// node reachable from the loss, accumulating into pre-existing grads. the
// tape (parents + closures) is freed afterwards; a second backward through
// the same graph throws.
void backward(const Tensor& loss);

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& m) : std::runtime_error(m) {}
};

} // namespace refdiff
