#include "refdiff/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_set>

namespace refdiff {

namespace {

Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;
thread_local std::vector<std::string> g_cost_stack;
thread_local std::map<std::string, uint64_t> g_cost_macs;
std::atomic<uint64_t> g_seq{0};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

void count_macs(uint64_t n) {
    if (!g_cost_stack.empty()) g_cost_macs[g_cost_stack.back()] += n;
}

} // namespace

Precision default_precision() { return g_precision; }
void set_default_precision(Precision p) { g_precision = p; }

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

void cost_scope_push(const std::string& name) { g_cost_stack.push_back(name); }
void cost_scope_pop() { g_cost_stack.pop_back(); }
uint64_t cost_macs(const std::string& name) {
    auto it = g_cost_macs.find(name);
    return it == g_cost_macs.end() ? 0 : it->second;
}
void cost_reset() { g_cost_macs.clear(); }

double quantize(double v) {
    return g_precision == Precision::f32 ? double(float(v)) : v;
}

void quantize_buffer(std::vector<double>& v) {
    if (g_precision != Precision::f32) return;
    for (double& x : v) x = double(float(x));
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); i++) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

static void check(bool ok, const std::string& msg) {
    if (!ok) throw TensorError(msg);
}

static Tensor make_leaf(Shape shape, std::vector<double> value, bool requires_grad) {
    quantize_buffer(value);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return Tensor(n);
}

// every op funnels through here: output quantization, requires_grad
// propagation, and tape wiring live in one place
static Tensor make_op(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                      std::function<void(TensorNode&)> bp) {
    quantize_buffer(value);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    bool rg = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) rg = rg || p.requires_grad();
    }
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(bp);
    }
    return Tensor(n);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return make_leaf(shape, std::vector<double>(size_t(shape_numel(shape)), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return make_leaf(shape, std::vector<double>(size_t(shape_numel(shape)), v), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check(int64_t(data.size()) == shape_numel(shape),
          "tensor: data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    return make_leaf(shape, std::move(data), requires_grad);
}

Tensor Tensor::scalar(double v) { return make_leaf({}, {v}, false); }

Tensor Tensor::randn(const Shape& shape, RandomSource& rs, double stddev, bool requires_grad) {
    std::vector<double> d(size_t(shape_numel(shape)));
    for (double& x : d) x = rs.normal() * stddev;
    return make_leaf(shape, std::move(d), requires_grad);
}

double Tensor::item() const {
    check(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
    return n_->value[0];
}

double Tensor::at(int64_t r, int64_t c) const {
    check(rank() == 2, "at: rank-2 accessor on shape " + shape_str(shape()));
    return n_->value[size_t(r * dim(1) + c)];
}

// ---- elementwise ----

static void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); i++) out[i] += bd[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) bn->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); i++) out[i] -= bd[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) bn->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); i++) out[i] *= bd[i];
    NodePtr an = a.node(), bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    check(a.rank() == 2 && v.rank() == 1 && a.dim(1) == v.dim(0),
          "add_rowvec: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(v.shape()));
    int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.data());
    const auto& vd = v.data();
    for (int64_t r = 0; r < m; r++)
        for (int64_t c = 0; c < n; c++) out[size_t(r * n + c)] += vd[size_t(c)];
    NodePtr an = a.node(), vn = v.node();
    return make_op(a.shape(), std::move(out), {a, v}, [an, vn, m, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
        }
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (int64_t r = 0; r < m; r++)
                for (int64_t c = 0; c < n; c++) vn->grad[size_t(c)] += self.grad[size_t(r * n + c)];
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.data());
    for (double& x : out) x *= s;
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, s](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.data());
    for (double& x : out) x += c;
    NodePtr an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++) an->grad[i] += self.grad[i];
    });
}

// ---- matmul family ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(size_t(m * n));
    {
        CMatMap am(a.data().data(), m, k);
        CMatMap bm(b.data().data(), k, n);
        MatMap om(out.data(), m, n);
        om.noalias() = am * bm;
    }
    count_macs(uint64_t(m) * uint64_t(k) * uint64_t(n));
    NodePtr an = a.node(), bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        CMatMap g(self.grad.data(), m, n);
        if (an->requires_grad) {
            an->ensure_grad();
            MatMap ga(an->grad.data(), m, k);
            CMatMap bm(bn->value.data(), k, n);
            ga.noalias() += g * bm.transpose();
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MatMap gb(bn->grad.data(), k, n);
            CMatMap am(an->value.data(), m, k);
            gb.noalias() += am.transpose() * g;
        }
    });
}

Tensor transpose(const Tensor& a) {
    check(a.rank() == 2, "transpose: rank-2 required, got " + shape_str(a.shape()));
    int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(size_t(m * n));
    const auto& ad = a.data();
    for (int64_t r = 0; r < m; r++)
        for (int64_t c = 0; c < n; c++) out[size_t(c * m + r)] = ad[size_t(r * n + c)];
    NodePtr an = a.node();
    return make_op({n, m}, std::move(out), {a}, [an, m, n](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t r = 0; r < m; r++)
            for (int64_t c = 0; c < n; c++) an->grad[size_t(r * n + c)] += self.grad[size_t(c * m + r)];
    });
}

// ---- reductions / losses ----

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    NodePtr xn = x.node();
    return make_op({}, {s}, {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double g = self.grad[0];
        for (double& gv : xn->grad) gv += g;
    });
}

Tensor mean(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    double inv = 1.0 / double(x.numel());
    NodePtr xn = x.node();
    return make_op({}, {s * inv}, {x}, [xn, inv](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double g = self.grad[0] * inv;
        for (double& gv : xn->grad) gv += g;
    });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_same_shape("mse", a, b);
    const auto& ad = a.data();
    const auto& bd = b.data();
    double s = 0.0;
    for (size_t i = 0; i < ad.size(); i++) {
        double d = ad[i] - bd[i];
        s += d * d;
    }
    double inv = 1.0 / double(a.numel());
    NodePtr an = a.node(), bn = b.node();
    return make_op({}, {s * inv}, {a, b}, [an, bn, inv](TensorNode& self) {
        double g = self.grad[0] * 2.0 * inv;
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < an->value.size(); i++)
                an->grad[i] += g * (an->value[i] - bn->value[i]);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < bn->value.size(); i++)
                bn->grad[i] -= g * (an->value[i] - bn->value[i]);
        }
    });
}

// ---- nonlinearities ----

Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 0.70710678118654752440;
    static const double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<double> out(x.data());
    for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    NodePtr xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++) {
            double v = xn->value[i];
            double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += self.grad[i] * d;
        }
    });
}

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.data());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    NodePtr xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++)
            if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
    });
}

// ---- softmax / layernorm ----

Tensor softmax(const Tensor& x, int axis) {
    int64_t r = x.rank();
    check(r >= 1, "softmax: rank >= 1 required");
    int64_t ax = axis < 0 ? r + axis : axis;
    check(ax >= 0 && ax < r, "softmax: axis " + std::to_string(axis) + " out of range for shape " +
                                 shape_str(x.shape()));
    int64_t n = x.dim(size_t(ax));
    int64_t inner = 1, outer = 1;
    for (int64_t i = ax + 1; i < r; i++) inner *= x.dim(size_t(i));
    for (int64_t i = 0; i < ax; i++) outer *= x.dim(size_t(i));

    std::vector<double> out(x.data());
    for (int64_t o = 0; o < outer; o++) {
        for (int64_t in = 0; in < inner; in++) {
            size_t base = size_t(o * n * inner + in);
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t k = 0; k < n; k++) mx = std::max(mx, out[base + size_t(k * inner)]);
            double z = 0.0;
            for (int64_t k = 0; k < n; k++) {
                size_t idx = base + size_t(k * inner);
                out[idx] = std::exp(out[idx] - mx);
                z += out[idx];
            }
            double invz = 1.0 / z;
            for (int64_t k = 0; k < n; k++) out[base + size_t(k * inner)] *= invz;
        }
    }
    NodePtr xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn, n, inner, outer](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t o = 0; o < outer; o++) {
            for (int64_t in = 0; in < inner; in++) {
                size_t base = size_t(o * n * inner + in);
                double dot = 0.0;
                for (int64_t k = 0; k < n; k++) {
                    size_t idx = base + size_t(k * inner);
                    dot += self.grad[idx] * self.value[idx];
                }
                for (int64_t k = 0; k < n; k++) {
                    size_t idx = base + size_t(k * inner);
                    xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
                }
            }
        }
    });
}

Tensor l2norm_rows(const Tensor& x, double eps) {
    check(x.rank() == 2, "l2norm_rows: rank-2 input required, got " + shape_str(x.shape()));
    int64_t rows = x.dim(0), n = x.dim(1);
    const auto& xd = x.data();
    std::vector<double> out(size_t(x.numel()));
    for (int64_t r = 0; r < rows; r++) {
        size_t base = size_t(r * n);
        double s = 0.0;
        for (int64_t k = 0; k < n; k++) s += xd[base + size_t(k)] * xd[base + size_t(k)];
        double inv = 1.0 / std::sqrt(s + eps);
        for (int64_t k = 0; k < n; k++) out[base + size_t(k)] = xd[base + size_t(k)] * inv;
    }
    NodePtr xn = x.node();
    return make_op(x.shape(), std::move(out), {x}, [xn, rows, n, eps](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        // dx = (g - y (g.y)) / ||x||, with y recomputed from the unquantized
        // input so the pullback matches the forward map exactly
        for (int64_t r = 0; r < rows; r++) {
            size_t base = size_t(r * n);
            double s = 0.0;
            for (int64_t k = 0; k < n; k++)
                s += xn->value[base + size_t(k)] * xn->value[base + size_t(k)];
            double inv = 1.0 / std::sqrt(s + eps);
            double dot = 0.0;
            for (int64_t k = 0; k < n; k++) {
                size_t idx = base + size_t(k);
                dot += self.grad[idx] * xn->value[idx] * inv;
            }
            for (int64_t k = 0; k < n; k++) {
                size_t idx = base + size_t(k);
                xn->grad[idx] += (self.grad[idx] - xn->value[idx] * inv * dot) * inv;
            }
        }
    });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check(x.rank() >= 1, "layernorm: rank >= 1 required");
    int64_t n = x.dim(size_t(x.rank() - 1));
    check(gain.rank() == 1 && gain.dim(0) == n && bias.rank() == 1 && bias.dim(0) == n,
          "layernorm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
              " do not match last dim of " + shape_str(x.shape()));
    int64_t rows = x.numel() / n;
    std::vector<double> out(size_t(x.numel()));
    std::vector<double> xhat(size_t(x.numel()));
    std::vector<double> inv_sigma(static_cast<size_t>(rows));
    const auto& xd = x.data();
    const auto& gd = gain.data();
    const auto& bd = bias.data();
    for (int64_t rix = 0; rix < rows; rix++) {
        size_t base = size_t(rix * n);
        double mu = 0.0;
        for (int64_t i = 0; i < n; i++) mu += xd[base + size_t(i)];
        mu /= double(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; i++) {
            double d = xd[base + size_t(i)] - mu;
            var += d * d;
        }
        var /= double(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[size_t(rix)] = is;
        for (int64_t i = 0; i < n; i++) {
            double h = (xd[base + size_t(i)] - mu) * is;
            xhat[base + size_t(i)] = h;
            out[base + size_t(i)] = gd[size_t(i)] * h + bd[size_t(i)];
        }
    }
    NodePtr xn = x.node(), gn = gain.node(), bn = bias.node();
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto isig = std::make_shared<std::vector<double>>(std::move(inv_sigma));
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [xn, gn, bn, xh, isig, n, rows](TensorNode& self) {
        const auto& g = self.grad;
        if (gn->requires_grad) {
            gn->ensure_grad();
            for (int64_t rix = 0; rix < rows; rix++)
                for (int64_t i = 0; i < n; i++)
                    gn->grad[size_t(i)] += g[size_t(rix * n + i)] * (*xh)[size_t(rix * n + i)];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t rix = 0; rix < rows; rix++)
                for (int64_t i = 0; i < n; i++) bn->grad[size_t(i)] += g[size_t(rix * n + i)];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (int64_t rix = 0; rix < rows; rix++) {
                size_t base = size_t(rix * n);
                double mean_u = 0.0, mean_uh = 0.0;
                for (int64_t i = 0; i < n; i++) {
                    double u = g[base + size_t(i)] * gn->value[size_t(i)];
                    mean_u += u;
                    mean_uh += u * (*xh)[base + size_t(i)];
                }
                mean_u /= double(n);
                mean_uh /= double(n);
                double is = (*isig)[size_t(rix)];
                for (int64_t i = 0; i < n; i++) {
                    double u = g[base + size_t(i)] * gn->value[size_t(i)];
                    xn->grad[base + size_t(i)] +=
                        is * (u - mean_u - (*xh)[base + size_t(i)] * mean_uh);
                }
            }
        }
    });
}

// ---- attention (composed; gradients come from the pieces) ----

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* mask) {
    check(q.rank() == 2 && k.rank() == 2 && v.rank() == 2,
          "attention: rank-2 q/k/v required");
    check(q.dim(1) == k.dim(1), "attention: q/k feature mismatch " + shape_str(q.shape()) + " vs " +
                                    shape_str(k.shape()));
    check(k.dim(0) == v.dim(0), "attention: k/v row mismatch " + shape_str(k.shape()) + " vs " +
                                    shape_str(v.shape()));
    if (mask) {
        check(mask->rank() == 2 && mask->dim(0) == q.dim(0) && mask->dim(1) == k.dim(0),
              "attention: mask shape " + shape_str(mask->shape()) + " does not match scores [" +
                  std::to_string(q.dim(0)) + "," + std::to_string(k.dim(0)) + "]");
    }
    double inv_sqrt_d = 1.0 / std::sqrt(double(q.dim(1)));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_d);
    if (mask) scores = add(scores, *mask);
    Tensor probs = softmax(scores, -1);
    return matmul(probs, v);
}

// ---- structural ops ----

Tensor mean_tensors(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "mean_tensors: no inputs");
    for (const auto& p : parts)
        check(p.shape() == parts[0].shape(),
              "mean_tensors: shape mismatch " + shape_str(p.shape()) + " vs " +
                  shape_str(parts[0].shape()));
    size_t k = parts.size();
    size_t n = size_t(parts[0].numel());
    double inv_k = 1.0 / double(k);
    std::vector<double> out(n);
    std::vector<double> col(k);
    for (size_t i = 0; i < n; i++) {
        for (size_t j = 0; j < k; j++) col[j] = parts[j].data()[i];
        std::sort(col.begin(), col.end());
        double s = 0.0;
        for (double v : col) s += v;
        out[i] = s * inv_k;
    }
    std::vector<NodePtr> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    return make_op(parts[0].shape(), std::move(out), parts, [pn, inv_k](TensorNode& self) {
        for (const auto& p : pn) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); i++) p->grad[i] += self.grad[i] * inv_k;
        }
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows: no inputs");
    int64_t cols = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
    check(cols > 0, "concat_rows: rank-2 inputs required");
    int64_t rows = 0;
    for (const auto& p : parts) {
        check(p.rank() == 2 && p.dim(1) == cols,
              "concat_rows: column mismatch " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(size_t(rows * cols));
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<NodePtr> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    return make_op({rows, cols}, std::move(out), parts, [pn, cols](TensorNode& self) {
        size_t off = 0;
        for (const auto& p : pn) {
            size_t sz = p->value.size();
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < sz; i++) p->grad[i] += self.grad[off + i];
            }
            off += sz;
        }
    });
}

Tensor slice_rows(const Tensor& x, int64_t row0, int64_t nrows) {
    check(x.rank() == 2, "slice_rows: rank-2 required");
    check(row0 >= 0 && nrows >= 0 && row0 + nrows <= x.dim(0),
          "slice_rows: range [" + std::to_string(row0) + "," + std::to_string(row0 + nrows) +
              ") out of bounds for " + shape_str(x.shape()));
    int64_t cols = x.dim(1);
    std::vector<double> out(x.data().begin() + row0 * cols,
                            x.data().begin() + (row0 + nrows) * cols);
    NodePtr xn = x.node();
    return make_op({nrows, cols}, std::move(out), {x}, [xn, row0, cols](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        size_t base = size_t(row0 * cols);
        for (size_t i = 0; i < self.grad.size(); i++) xn->grad[base + i] += self.grad[i];
    });
}

std::pair<Tensor, Tensor> split_rows(const Tensor& x, int64_t nrows_first) {
    check(x.rank() == 2 && nrows_first >= 0 && nrows_first <= x.dim(0),
          "split_rows: bad split point " + std::to_string(nrows_first) + " for " +
              shape_str(x.shape()));
    return {slice_rows(x, 0, nrows_first), slice_rows(x, nrows_first, x.dim(0) - nrows_first)};
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols: no inputs");
    int64_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : -1;
    check(rows > 0, "concat_cols: rank-2 inputs required");
    int64_t cols = 0;
    for (const auto& p : parts) {
        check(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch " + shape_str(p.shape()));
        cols += p.dim(1);
    }
    std::vector<double> out(size_t(rows * cols));
    int64_t coff = 0;
    for (const auto& p : parts) {
        int64_t pc = p.dim(1);
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < pc; c++)
                out[size_t(r * cols + coff + c)] = p.data()[size_t(r * pc + c)];
        coff += pc;
    }
    std::vector<NodePtr> pn;
    for (const auto& p : parts) pn.push_back(p.node());
    return make_op({rows, cols}, std::move(out), parts, [pn, rows, cols](TensorNode& self) {
        int64_t coff = 0;
        for (const auto& p : pn) {
            int64_t pc = p->shape[1];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int64_t r = 0; r < rows; r++)
                    for (int64_t c = 0; c < pc; c++)
                        p->grad[size_t(r * pc + c)] += self.grad[size_t(r * cols + coff + c)];
            }
            coff += pc;
        }
    });
}

Tensor slice_cols(const Tensor& x, int64_t col0, int64_t ncols) {
    check(x.rank() == 2, "slice_cols: rank-2 required");
    check(col0 >= 0 && ncols >= 0 && col0 + ncols <= x.dim(1),
          "slice_cols: range [" + std::to_string(col0) + "," + std::to_string(col0 + ncols) +
              ") out of bounds for " + shape_str(x.shape()));
    int64_t rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(size_t(rows * ncols));
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < ncols; c++)
            out[size_t(r * ncols + c)] = x.data()[size_t(r * cols + col0 + c)];
    NodePtr xn = x.node();
    return make_op({rows, ncols}, std::move(out), {x}, [xn, col0, rows, ncols, cols](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < ncols; c++)
                xn->grad[size_t(r * cols + col0 + c)] += self.grad[size_t(r * ncols + c)];
    });
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
    check(table.rank() == 2, "gather_rows: rank-2 table required");
    int64_t v = table.dim(0), d = table.dim(1);
    for (int64_t id : ids)
        check(id >= 0 && id < v, "gather_rows: id " + std::to_string(id) + " out of range [0," +
                                     std::to_string(v) + ")");
    int64_t rows = int64_t(ids.size());
    std::vector<double> out(size_t(rows * d));
    for (int64_t r = 0; r < rows; r++)
        std::copy_n(table.data().begin() + ids[size_t(r)] * d, d, out.begin() + r * d);
    NodePtr tn = table.node();
    auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
    return make_op({rows, d}, std::move(out), {table}, [tn, ids_copy, d](TensorNode& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (size_t r = 0; r < ids_copy->size(); r++) {
            size_t src = r * size_t(d);
            size_t dst = size_t((*ids_copy)[r]) * size_t(d);
            for (int64_t i = 0; i < d; i++) tn->grad[dst + size_t(i)] += self.grad[src + size_t(i)];
        }
    });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    check(shape_numel(shape) == x.numel(), "reshape: numel mismatch " + shape_str(x.shape()) +
                                               " -> " + shape_str(shape));
    std::vector<double> out(x.data());
    NodePtr xn = x.node();
    return make_op(shape, std::move(out), {x}, [xn](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); i++) xn->grad[i] += self.grad[i];
    });
}

// ---- patch layout ----

Tensor patches_from_image(const Tensor& img, int64_t p) {
    check(img.rank() == 3, "patches_from_image: [C,H,W] required, got " + shape_str(img.shape()));
    int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    check(p > 0 && h % p == 0 && w % p == 0,
          "patches_from_image: image " + shape_str(img.shape()) + " not divisible by patch " +
              std::to_string(p));
    int64_t gh = h / p, gw = w / p, m = gh * gw, d = p * p * c;
    std::vector<double> out(size_t(m * d));
    const auto& id = img.data();
    for (int64_t gy = 0; gy < gh; gy++)
        for (int64_t gx = 0; gx < gw; gx++)
            for (int64_t ch = 0; ch < c; ch++)
                for (int64_t dy = 0; dy < p; dy++)
                    for (int64_t dx = 0; dx < p; dx++)
                        out[size_t((gy * gw + gx) * d + ch * p * p + dy * p + dx)] =
                            id[size_t(ch * h * w + (gy * p + dy) * w + gx * p + dx)];
    NodePtr in = img.node();
    return make_op({m, d}, std::move(out), {img}, [in, p, c, h, w, gh, gw, d](TensorNode& self) {
        if (!in->requires_grad) return;
        in->ensure_grad();
        for (int64_t gy = 0; gy < gh; gy++)
            for (int64_t gx = 0; gx < gw; gx++)
                for (int64_t ch = 0; ch < c; ch++)
                    for (int64_t dy = 0; dy < p; dy++)
                        for (int64_t dx = 0; dx < p; dx++)
                            in->grad[size_t(ch * h * w + (gy * p + dy) * w + gx * p + dx)] +=
                                self.grad[size_t((gy * gw + gx) * d + ch * p * p + dy * p + dx)];
    });
}

Tensor image_from_patches(const Tensor& x, int64_t channels, int64_t h, int64_t w, int64_t p) {
    check(x.rank() == 2, "image_from_patches: rank-2 patches required");
    check(p > 0 && h % p == 0 && w % p == 0, "image_from_patches: size not divisible by patch");
    int64_t gh = h / p, gw = w / p, m = gh * gw, d = p * p * channels;
    check(x.dim(0) == m && x.dim(1) == d,
          "image_from_patches: got " + shape_str(x.shape()) + ", expected [" + std::to_string(m) +
              "," + std::to_string(d) + "]");
    std::vector<double> out(size_t(channels * h * w));
    const auto& xd = x.data();
    for (int64_t gy = 0; gy < gh; gy++)
        for (int64_t gx = 0; gx < gw; gx++)
            for (int64_t ch = 0; ch < channels; ch++)
                for (int64_t dy = 0; dy < p; dy++)
                    for (int64_t dx = 0; dx < p; dx++)
                        out[size_t(ch * h * w + (gy * p + dy) * w + gx * p + dx)] =
                            xd[size_t((gy * gw + gx) * d + ch * p * p + dy * p + dx)];
    NodePtr xn = x.node();
    return make_op({channels, h, w}, std::move(out), {x},
                   [xn, channels, h, w, p, gh, gw, d](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int64_t gy = 0; gy < gh; gy++)
            for (int64_t gx = 0; gx < gw; gx++)
                for (int64_t ch = 0; ch < channels; ch++)
                    for (int64_t dy = 0; dy < p; dy++)
                        for (int64_t dx = 0; dx < p; dx++)
                            xn->grad[size_t((gy * gw + gx) * d + ch * p * p + dy * p + dx)] +=
                                self.grad[size_t(ch * h * w + (gy * p + dy) * w + gx * p + dx)];
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int64_t>& targets) {
    check(logits.rank() == 2, "cross_entropy_rows: rank-2 logits required");
    int64_t rows = logits.dim(0), n = logits.dim(1);
    check(int64_t(targets.size()) == rows, "cross_entropy_rows: target count mismatch");
    for (int64_t t : targets)
        check(t >= 0 && t < n, "cross_entropy_rows: target out of range");
    const auto& xd = logits.data();
    auto probs = std::make_shared<std::vector<double>>(xd);
    double total = 0.0;
    for (int64_t r = 0; r < rows; r++) {
        size_t base = size_t(r * n);
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < n; i++) mx = std::max(mx, xd[base + size_t(i)]);
        double z = 0.0;
        for (int64_t i = 0; i < n; i++) {
            (*probs)[base + size_t(i)] = std::exp(xd[base + size_t(i)] - mx);
            z += (*probs)[base + size_t(i)];
        }
        double invz = 1.0 / z;
        for (int64_t i = 0; i < n; i++) (*probs)[base + size_t(i)] *= invz;
        total += std::log(z) + mx - xd[base + size_t(targets[size_t(r)])];
    }
    double inv_rows = 1.0 / double(rows);
    NodePtr xn = logits.node();
    auto tgt = std::make_shared<std::vector<int64_t>>(targets);
    return make_op({}, {total * inv_rows}, {logits}, [xn, probs, tgt, rows, n, inv_rows](TensorNode& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        double g = self.grad[0] * inv_rows;
        for (int64_t r = 0; r < rows; r++) {
            size_t base = size_t(r * n);
            for (int64_t i = 0; i < n; i++) xn->grad[base + size_t(i)] += g * (*probs)[base + size_t(i)];
            xn->grad[base + size_t((*tgt)[size_t(r)])] -= g;
        }
    });
}

// ---- reverse pass ----

void backward(const Tensor& loss) {
    check(loss.defined(), "backward: undefined tensor");
    check(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    TensorNode* root = loss.node().get();
    check(!root->backward_done, "backward: graph already freed by a previous backward");
    check(root->requires_grad, "backward: loss does not require grad");

    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t i;
    };
    std::vector<Frame> st;
    st.push_back({root, 0});
    seen.insert(root);
    while (!st.empty()) {
        Frame& f = st.back();
        if (f.i < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                st.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            st.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    // postorder puts parents first; walk it backwards so every node's grad is
    // complete before its backprop runs
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
    root->backward_done = true;
    for (TensorNode* n : order) {
        if (n->backprop) {
            n->backward_done = true;
            n->backprop = nullptr;
            n->parents.clear();
        }
    }
}

} // namespace refdiff
