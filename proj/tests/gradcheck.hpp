#pragma once

// finite-difference gradient checking. the oracle is central differences on
// the forward function alone, so it shares no code with the backward pass.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "refdiff/tensor.hpp"

namespace gradcheck {

using refdiff::Tensor;

struct Result {
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0, numeric = 0.0;
    bool any = false;
};

// relative error with an absolute floor so near-zero pairs compare sanely
inline double rel_err(double a, double b) {
    double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
    return std::fabs(a - b) / denom;
}

// perturbs every coordinate of `leaf` in turn. `forward` must rebuild the
// whole graph from current leaf values and return the scalar loss value.
inline Result check_leaf(Tensor leaf, const std::function<double()>& forward,
                         const std::vector<double>& analytic_grad, double step) {
    Result r;
    auto& buf = leaf.data();
    for (size_t i = 0; i < buf.size(); i++) {
        double keep = buf[i];
        buf[i] = refdiff::quantize(keep + step);
        double up = forward();
        buf[i] = refdiff::quantize(keep - step);
        double down = forward();
        buf[i] = keep;
        double numeric = (up - down) / (2.0 * step);
        double e = rel_err(analytic_grad[i], numeric);
        if (!r.any || e > r.max_rel_err) {
            r.any = true;
            r.max_rel_err = e;
            r.worst_index = int64_t(i);
            r.analytic = analytic_grad[i];
            r.numeric = numeric;
        }
    }
    return r;
}

} // namespace gradcheck
