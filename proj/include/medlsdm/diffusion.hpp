#ifndef MEDLSDM_DIFFUSION_HPP
#define MEDLSDM_DIFFUSION_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "medlsdm/rng.hpp"
#include "medlsdm/tensor.hpp"

namespace medlsdm {

// Noise schedule. alpha_bar[t] is the cumulative product prod_{n<=t}(1 - beta_n)
// (1-based; index 0 is unused and holds the alpha_bar_0 := 1 convention).
struct DiffusionSchedule {
    int64_t T = 0;
    double s  = 0.008;  // cosine offset
    std::vector<double> beta;       // size T + 1, beta[0] unused
    std::vector<double> alpha_bar;  // size T + 1, alpha_bar[0] == 1

    void check_step(int64_t t) const;
};

// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2);
// beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}, clipped to (0, 0.999], and
// alpha_bar recomputed from the clipped betas so the two stay consistent.
DiffusionSchedule build_cosine_schedule(int64_t T, double s = 0.008);

struct NoisingResult {
    Tensor z_t;
    Tensor eps;
    int64_t t = 0;
};

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
NoisingResult forward_sample(const Tensor& z0, int64_t t, const Tensor& eps,
                             const DiffusionSchedule& schedule);

// Mean squared error, averaged over all elements.
double simple_loss(const Tensor& eps, const Tensor& eps_pred);

// One ancestral step. noise must be present exactly when t > 1.
// mu = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(1 - beta_t)
// sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t).
Tensor reverse_step(const Tensor& z_t, int64_t t, const Tensor& eps_pred,
                    const DiffusionSchedule& schedule, const std::optional<Tensor>& noise);

double posterior_variance(const DiffusionSchedule& schedule, int64_t t);

// eps_theta(z_t, t): the conditioning (semantic features) is closed over by
// the caller.
using DenoiserFn = std::function<Tensor(const Tensor& z_t, int64_t t)>;

struct SampleResult {
    Tensor latent;
    std::vector<Tensor> snapshots;      // states z_{T - j*k}, j >= 0, before reaching z_0
    std::vector<int64_t> snapshot_steps;
};

// Ancestral sampling from z_T ~ N(0, I); all Gaussian draws come from the
// seed. snapshot_every = k records every k-th intermediate state starting
// from the initial noise.
SampleResult sample_loop(const std::vector<int64_t>& latent_shape, const DenoiserFn& denoiser,
                         const DiffusionSchedule& schedule, uint64_t seed,
                         std::optional<int64_t> snapshot_every = std::nullopt);

}  // namespace medlsdm

#endif
