#include "refdiff/diffusion.hpp"

#include <cmath>

namespace refdiff {

NoiseSchedule make_schedule(int64_t T, double beta_start, double beta_end) {
    if (T < 1) throw TensorError("make_schedule: T >= 1 required");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw TensorError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.assign(size_t(T + 1), 0.0);
    s.alpha.assign(size_t(T + 1), 1.0);
    s.alpha_bar.assign(size_t(T + 1), 1.0);
    s.posterior_sigma.assign(size_t(T + 1), 0.0);
    for (int64_t t = 1; t <= T; t++) {
        double frac = T == 1 ? 0.0 : double(t - 1) / double(T - 1);
        s.beta[size_t(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha[size_t(t)] = 1.0 - s.beta[size_t(t)];
        s.alpha_bar[size_t(t)] = s.alpha_bar[size_t(t - 1)] * s.alpha[size_t(t)];
        s.posterior_sigma[size_t(t)] = std::sqrt((1.0 - s.alpha_bar[size_t(t - 1)]) /
                                                 (1.0 - s.alpha_bar[size_t(t)]) * s.beta[size_t(t)]);
    }
    return s;
}

Tensor forward_diffuse(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t > s.T)
        throw TensorError("forward_diffuse: t=" + std::to_string(t) + " outside [0," +
                          std::to_string(s.T) + "]");
    if (x0.shape() != eps.shape())
        throw TensorError("forward_diffuse: x0 " + shape_str(x0.shape()) + " vs eps " +
                          shape_str(eps.shape()));
    double ab = s.alpha_bar[size_t(t)];
    return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

Tensor cfg_predict(const Tensor& eps_cond, const Tensor& eps_uncond, double scale_) {
    if (scale_ < 0.0) throw TensorError("cfg_predict: scale >= 0 required");
    if (eps_cond.shape() != eps_uncond.shape())
        throw TensorError("cfg_predict: shape mismatch " + shape_str(eps_cond.shape()) + " vs " +
                          shape_str(eps_uncond.shape()));
    // eps_u + s*(eps_c - eps_u); the endpoints return their input unchanged
    // so that s=1 is bit-identical to never blending at all
    if (scale_ == 1.0) return eps_cond;
    if (scale_ == 0.0) return eps_uncond;
    return add(eps_uncond, scale(sub(eps_cond, eps_uncond), scale_));
}

Tensor training_loss(const EpsModel& model, const Tensor& x0, const Conditions& c, int64_t t,
                     const Tensor& eps, const NoiseSchedule& s) {
    Tensor x_t = forward_diffuse(x0, t, eps, s);
    Tensor eps_hat = model(x_t, t, c);
    if (eps_hat.shape() != eps.shape())
        throw TensorError("training_loss: model output " + shape_str(eps_hat.shape()) +
                          " vs eps " + shape_str(eps.shape()));
    return mse(eps_hat, eps);
}

std::vector<int64_t> ddim_timesteps(int64_t T, int64_t steps) {
    if (steps < 1) throw TensorError("ddim_timesteps: steps must be >= 1");
    // more steps than levels just collapses onto the full schedule
    std::vector<int64_t> ts;
    int64_t prev = -1;
    for (int64_t i = steps; i >= 0; i--) {
        int64_t t = int64_t(std::llround(double(T) * double(i) / double(steps)));
        if (t != prev) ts.push_back(t);
        prev = t;
    }
    // descending from T to 0 by construction
    return ts;
}

Tensor ddim_sample(const EpsModel& model, const Conditions& cond, const Conditions& uncond,
                   const GuidanceConfig& g, const NoiseSchedule& s, const Shape& shape,
                   uint64_t seed) {
    if (g.eta != 0.0) throw TensorError("ddim_sample: only eta=0 (deterministic) is supported");
    if (g.scale < 0.0) throw TensorError("ddim_sample: scale >= 0 required");
    std::vector<int64_t> ts = ddim_timesteps(s.T, g.steps);

    RandomSource rs(seed);
    Tensor x = Tensor::randn(shape, rs);

    NoGradGuard ng;
    for (size_t i = 0; i + 1 < ts.size(); i++) {
        int64_t t = ts[i], t_next = ts[i + 1];
        Tensor eps_hat;
        if (g.scale == 1.0) {
            // cfg_predict(e, u, 1) == e exactly; skip the unconditional pass
            eps_hat = model(x, t, cond);
        } else {
            Tensor eps_c = model(x, t, cond);
            Tensor eps_u = model(x, t, uncond);
            eps_hat = cfg_predict(eps_c, eps_u, g.scale);
        }
        double ab = s.alpha_bar[size_t(t)];
        double ab_next = s.alpha_bar[size_t(t_next)];
        // x0 estimate, then jump to the next level along the same eps direction
        Tensor x0_pred = scale(sub(x, scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
        x = add(scale(x0_pred, std::sqrt(ab_next)),
                scale(eps_hat, std::sqrt(1.0 - ab_next)));
    }
    // final x is the t=0 estimate
    std::vector<double> out(x.data());
    for (double& v : out) v = std::clamp(v, -1.0, 1.0);
    return Tensor::from(shape, std::move(out));
}

} // namespace refdiff
