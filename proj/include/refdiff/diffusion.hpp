#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "refdiff/image.hpp"
#include "refdiff/tensor.hpp"

namespace refdiff {

// linear-beta DDPM schedule. arrays are indexed 0..T where index 0 is the
// identity boundary (beta=0, alpha=1, alpha_bar=1, sigma=0) and 1..T are the
// noise levels; forward_diffuse(t=0) therefore returns x0 exactly.
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> beta;            // T+1 entries
    std::vector<double> alpha;           // 1 - beta
    std::vector<double> alpha_bar;       // running product of alpha
    std::vector<double> posterior_sigma; // sqrt((1-abar[t-1])/(1-abar[t]) * beta[t])
};

NoiseSchedule make_schedule(int64_t T, double beta_start = 1e-4, double beta_end = 0.02);

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, elementwise over any shape
Tensor forward_diffuse(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& s);

// text/image condition pair fed to the denoiser
struct Conditions {
    Tensor text;  // [Lt x Dc]
    Tensor image; // [Ni x Dc]
};

// eps_uncond + scale * (eps_cond - eps_uncond)
Tensor cfg_predict(const Tensor& eps_cond, const Tensor& eps_uncond, double scale);

struct GuidanceConfig {
    int64_t steps = 30;
    double scale = 7.5;
    double eta = 0.0; // deterministic sampling only; nonzero rejected
};

using EpsModel = std::function<Tensor(const Tensor& x_t, int64_t t, const Conditions& c)>;

// eps-prediction MSE at one (t, eps) draw
Tensor training_loss(const EpsModel& model, const Tensor& x0, const Conditions& c, int64_t t,
                     const Tensor& eps, const NoiseSchedule& s);

// deterministic DDIM sampler over an evenly spaced timestep slice T..0.
// the returned final x0 estimate is clamped to [-1,1]. seed fixes x_T.
Tensor ddim_sample(const EpsModel& model, const Conditions& cond, const Conditions& uncond,
                   const GuidanceConfig& g, const NoiseSchedule& s, const Shape& shape,
                   uint64_t seed);

// the timestep slice used by the sampler, descending, ends at 0
std::vector<int64_t> ddim_timesteps(int64_t T, int64_t steps);

} // namespace refdiff
