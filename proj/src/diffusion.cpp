#include "medlsdm/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "medlsdm/errors.hpp"

namespace medlsdm {

void DiffusionSchedule::check_step(int64_t t) const {
    if (t < 1 || t > T)
        throw DomainError("diffusion step t=" + std::to_string(t) + " outside [1, " +
                          std::to_string(T) + "]");
}

DiffusionSchedule build_cosine_schedule(int64_t T, double s) {
    if (T < 1)
        throw ConfigError("diffusion schedule: T must be >= 1");
    DiffusionSchedule sched;
    sched.T = T;
    sched.s = s;
    sched.beta.assign(static_cast<size_t>(T) + 1, 0.0);
    sched.alpha_bar.assign(static_cast<size_t>(T) + 1, 1.0);

    constexpr double kPi = 3.14159265358979323846;
    const auto f = [&](int64_t t) {
        const double u = (static_cast<double>(t) / static_cast<double>(T) + s) / (1.0 + s);
        const double c = std::cos(u * kPi / 2.0);
        return c * c;
    };
    const double f0 = f(0);

    double prev_ab = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
        const double ab_target = f(t) / f0;
        double beta            = 1.0 - ab_target / prev_ab;
        beta                   = std::clamp(beta, 1e-8, 0.999);
        sched.beta[static_cast<size_t>(t)] = beta;
        // Recompute the cumulative product from the clipped betas so
        // alpha_bar stays exactly prod(1 - beta_n).
        prev_ab *= 1.0 - beta;
        sched.alpha_bar[static_cast<size_t>(t)] = prev_ab;
    }
    return sched;
}

NoisingResult forward_sample(const Tensor& z0, int64_t t, const Tensor& eps,
                             const DiffusionSchedule& schedule) {
    schedule.check_step(t);
    check_same_shape(z0, eps, "forward_sample");
    const double ab = schedule.alpha_bar[static_cast<size_t>(t)];
    const double a  = std::sqrt(ab);
    const double b  = std::sqrt(1.0 - ab);
    NoisingResult out;
    out.t   = t;
    out.eps = eps;
    out.z_t = Tensor(z0.shape());
    for (int64_t i = 0; i < z0.numel(); ++i)
        out.z_t[i] = a * z0[i] + b * eps[i];
    return out;
}

double simple_loss(const Tensor& eps, const Tensor& eps_pred) {
    check_same_shape(eps, eps_pred, "simple_loss");
    return mean_sq_diff(eps, eps_pred);
}

double posterior_variance(const DiffusionSchedule& schedule, int64_t t) {
    schedule.check_step(t);
    const double beta    = schedule.beta[static_cast<size_t>(t)];
    const double ab_prev = schedule.alpha_bar[static_cast<size_t>(t - 1)];  // alpha_bar_0 == 1
    const double ab      = schedule.alpha_bar[static_cast<size_t>(t)];
    return beta * (1.0 - ab_prev) / (1.0 - ab);
}

Tensor reverse_step(const Tensor& z_t, int64_t t, const Tensor& eps_pred,
                    const DiffusionSchedule& schedule, const std::optional<Tensor>& noise) {
    schedule.check_step(t);
    check_same_shape(z_t, eps_pred, "reverse_step");
    if ((t == 1) == noise.has_value())
        throw DomainError("reverse_step: noise must be supplied exactly when t > 1 (t=" +
                          std::to_string(t) + ")");

    const double beta  = schedule.beta[static_cast<size_t>(t)];
    const double ab    = schedule.alpha_bar[static_cast<size_t>(t)];
    const double inv_a = 1.0 / std::sqrt(1.0 - beta);
    const double coef  = beta / std::sqrt(1.0 - ab);
    const double sigma = std::sqrt(posterior_variance(schedule, t));

    Tensor out(z_t.shape());
    if (noise) {
        check_same_shape(z_t, *noise, "reverse_step noise");
        for (int64_t i = 0; i < z_t.numel(); ++i)
            out[i] = inv_a * (z_t[i] - coef * eps_pred[i]) + sigma * (*noise)[i];
    } else {
        for (int64_t i = 0; i < z_t.numel(); ++i)
            out[i] = inv_a * (z_t[i] - coef * eps_pred[i]);
    }
    return out;
}

SampleResult sample_loop(const std::vector<int64_t>& latent_shape, const DenoiserFn& denoiser,
                         const DiffusionSchedule& schedule, uint64_t seed,
                         std::optional<int64_t> snapshot_every) {
    if (snapshot_every && *snapshot_every < 1)
        throw ConfigError("sample_loop: snapshot_every must be >= 1");
    Rng rng(seed);
    SampleResult result;

    Tensor z = Tensor::randn(latent_shape, rng);
    int64_t steps_done = 0;
    for (int64_t t = schedule.T; t >= 1; --t) {
        if (snapshot_every && steps_done % *snapshot_every == 0 && steps_done < schedule.T) {
            result.snapshots.push_back(z.clone());
            result.snapshot_steps.push_back(t);
        }
        Tensor eps_pred = denoiser(z, t);
        std::optional<Tensor> noise;
        if (t > 1)
            noise = Tensor::randn(latent_shape, rng);
        z = reverse_step(z, t, eps_pred, schedule, noise);
        ++steps_done;
        if (!z.all_finite())
            throw DivergenceError("sample_loop: non-finite latent after step t=" +
                                  std::to_string(t));
    }
    result.latent = std::move(z);
    return result;
}

}  // namespace medlsdm
