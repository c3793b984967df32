#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "medlsdm/diffusion.hpp"

using namespace medlsdm;

TEST_CASE("cosine schedule: monotonicity and tail behavior") {
    DiffusionSchedule s = build_cosine_schedule(1000);
    CHECK(s.alpha_bar[0] == 1.0);
    for (int64_t t = 1; t <= 1000; ++t) {
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);  // strictly decreasing
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] <= 0.999);
        if (t > 1)
            CHECK(s.beta[t] >= s.beta[t - 1] - 1e-12);  // non-decreasing
    }
    CHECK(s.alpha_bar[1] < 1.0);
    CHECK(s.alpha_bar[1000] > 0.0);

    // direct evaluation of the closed form: alpha_bar_T below 0.01
    {
        const double kPi = 3.14159265358979323846;
        const auto f     = [&](double t) {
            const double u = (t / 1000.0 + 0.008) / 1.008;
            const double c = std::cos(u * kPi / 2.0);
            return c * c;
        };
        double ab = 1.0;
        for (int64_t t = 1; t <= 1000; ++t) {
            double beta = 1.0 - (f(double(t)) / f(0.0)) / (ab);
            // same clip rule as the builder
            beta = std::clamp(beta, 1e-8, 0.999);
            ab *= 1.0 - beta;
        }
        CHECK(ab < 0.01);
        CHECK(s.alpha_bar[1000] == doctest::Approx(ab).epsilon(1e-12));
    }
    CHECK(s.alpha_bar[1000] < 0.01);

    // alpha_bar is exactly the cumulative product of (1 - beta)
    double prod = 1.0;
    for (int64_t t = 1; t <= 1000; ++t) {
        prod *= 1.0 - s.beta[t];
        CHECK(s.alpha_bar[t] == prod);
    }
}

TEST_CASE("schedule boundary cases") {
    CHECK_THROWS_AS(build_cosine_schedule(0), ConfigError);
    DiffusionSchedule one = build_cosine_schedule(1);
    CHECK(one.beta[1] > 0.0);
    CHECK(one.beta[1] <= 0.999);
}

TEST_CASE("forward_sample limits and range checks") {
    Rng rng(3);
    Tensor z0  = Tensor::randn({2, 2, 2, 2}, rng);
    Tensor eps = Tensor::randn({2, 2, 2, 2}, rng);

    DiffusionSchedule s = build_cosine_schedule(10);

    SUBCASE("alpha_bar = 1 reproduces z0; alpha_bar = 0 reproduces eps") {
        DiffusionSchedule fake = s;
        fake.alpha_bar[5]      = 1.0;
        NoisingResult clean    = forward_sample(z0, 5, eps, fake);
        CHECK(sum_sq_diff(clean.z_t, z0) == 0.0);

        fake.alpha_bar[5]  = 0.0;
        NoisingResult pure = forward_sample(z0, 5, eps, fake);
        CHECK(sum_sq_diff(pure.z_t, eps) == 0.0);
    }

    SUBCASE("t outside [1, T] is rejected") {
        CHECK_THROWS_AS(forward_sample(z0, 0, eps, s), DomainError);
        CHECK_THROWS_AS(forward_sample(z0, 11, eps, s), DomainError);
    }
}

TEST_CASE("forward marginal matches the closed form within Monte Carlo error") {
    DiffusionSchedule s = build_cosine_schedule(50);
    const double z0     = 0.7;
    const int n         = 10000;

    for (int64_t t : {int64_t{1}, int64_t{25}, int64_t{50}}) {
        Rng rng(100 + t);
        double mean = 0.0, m2 = 0.0;
        for (int i = 0; i < n; ++i) {
            // closed-form sampler (Eq.-11 style)
            const double eps = rng.normal();
            const double zt  = std::sqrt(s.alpha_bar[t]) * z0 +
                              std::sqrt(1.0 - s.alpha_bar[t]) * eps;
            mean += zt;
            m2 += zt * zt;
        }
        mean /= n;
        const double var = m2 / n - mean * mean;

        const double mean_theory = std::sqrt(s.alpha_bar[t]) * z0;
        const double var_theory  = 1.0 - s.alpha_bar[t];
        const double se_mean     = std::sqrt(var_theory / n);
        const double se_var      = var_theory * std::sqrt(2.0 / (n - 1));
        CHECK(std::abs(mean - mean_theory) < 3.0 * se_mean + 1e-12);
        CHECK(std::abs(var - var_theory) < 3.0 * se_var + 1e-12);

        // iterated per-step chain agrees with the same marginal
        Rng rng2(200 + t);
        double mean_it = 0.0, m2_it = 0.0;
        for (int i = 0; i < n; ++i) {
            double z = z0;
            for (int64_t step = 1; step <= t; ++step)
                z = std::sqrt(1.0 - s.beta[step]) * z + std::sqrt(s.beta[step]) * rng2.normal();
            mean_it += z;
            m2_it += z * z;
        }
        mean_it /= n;
        const double var_it = m2_it / n - mean_it * mean_it;
        CHECK(std::abs(mean_it - mean_theory) < 3.0 * se_mean + 1e-12);
        CHECK(std::abs(var_it - var_theory) < 3.0 * se_var + 1e-12);
    }
}

TEST_CASE("simple_loss cases and loop oracle") {
    Rng rng(7);
    Tensor a = Tensor::randn({2, 3, 2, 2}, rng);
    CHECK(simple_loss(a, a) == 0.0);

    Tensor zero({2, 2, 2, 1}, 0.0);
    Tensor one({2, 2, 2, 1}, 1.0);
    CHECK(simple_loss(zero, one) == 1.0);

    Tensor b = Tensor::randn({2, 3, 2, 2}, rng);
    double acc = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i)
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    acc /= static_cast<double>(a.numel());
    CHECK(std::abs(simple_loss(a, b) - acc) < 1e-12);

    Tensor wrong({2, 2, 2, 2});
    CHECK_THROWS_AS(simple_loss(a, wrong), ShapeError);
}

TEST_CASE("reverse_step: perfect-oracle inversion at t = 1") {
    DiffusionSchedule s = build_cosine_schedule(30);
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor z0  = Tensor::randn({2, 2, 1, 2}, rng);
        Tensor eps = Tensor::randn({2, 2, 1, 2}, rng);
        NoisingResult nr = forward_sample(z0, 1, eps, s);
        Tensor rec = reverse_step(nr.z_t, 1, eps, s, std::nullopt);
        for (int64_t i = 0; i < z0.numel(); ++i)
            CHECK(std::abs(rec[i] - z0[i]) < 1e-10);
    }
}

TEST_CASE("posterior variance: sigma_1 = 0 via the alpha_bar_0 convention") {
    DiffusionSchedule s = build_cosine_schedule(20);
    CHECK(posterior_variance(s, 1) == 0.0);
    for (int64_t t = 2; t <= 20; ++t)
        CHECK(posterior_variance(s, t) > 0.0);
}

TEST_CASE("reverse_step noise argument contract") {
    DiffusionSchedule s = build_cosine_schedule(5);
    Rng rng(13);
    Tensor z   = Tensor::randn({2, 2, 1, 1}, rng);
    Tensor eps = Tensor::randn({2, 2, 1, 1}, rng);
    Tensor n   = Tensor::randn({2, 2, 1, 1}, rng);
    CHECK_THROWS_AS(reverse_step(z, 1, eps, s, n), DomainError);       // t=1 must omit noise
    CHECK_THROWS_AS(reverse_step(z, 3, eps, s, std::nullopt), DomainError);
    CHECK_THROWS_AS(reverse_step(z, 0, eps, s, std::nullopt), DomainError);
    CHECK_NOTHROW(reverse_step(z, 3, eps, s, n));
}

TEST_CASE("reverse_step output distribution matches N(mu, sigma^2)") {
    DiffusionSchedule s = build_cosine_schedule(20);
    Rng rng(17);
    Tensor z   = Tensor::randn({1, 1, 1, 1}, rng);
    Tensor eps = Tensor::randn({1, 1, 1, 1}, rng);
    const int64_t t = 10;

    const double beta = s.beta[t];
    const double mu =
        (z[0] - beta / std::sqrt(1.0 - s.alpha_bar[t]) * eps[0]) / std::sqrt(1.0 - beta);
    const double sigma2 = posterior_variance(s, t);

    const int n = 10000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        Tensor noise = Tensor::randn({1, 1, 1, 1}, rng);
        Tensor out   = reverse_step(z, t, eps, s, noise);
        mean += out[0];
        m2 += out[0] * out[0];
    }
    mean /= n;
    const double var = m2 / n - mean * mean;
    const double se_mean = std::sqrt(sigma2 / n);
    const double se_var  = sigma2 * std::sqrt(2.0 / (n - 1));
    CHECK(std::abs(mean - mu) < 3.0 * se_mean);
    CHECK(std::abs(var - sigma2) < 3.0 * se_var);
}

TEST_CASE("sample_loop: determinism, seed sensitivity, snapshots") {
    DiffusionSchedule s = build_cosine_schedule(25);
    DenoiserFn zero_fn  = [](const Tensor& z, int64_t) { return Tensor::zeros(z.shape()); };

    SampleResult a = sample_loop({4, 4, 2, 2}, zero_fn, s, 42);
    SampleResult b = sample_loop({4, 4, 2, 2}, zero_fn, s, 42);
    SampleResult c = sample_loop({4, 4, 2, 2}, zero_fn, s, 43);
    CHECK(sum_sq_diff(a.latent, b.latent) == 0.0);
    CHECK(sum_sq_diff(a.latent, c.latent) > 0.0);

    SUBCASE("snapshot_every = T records exactly the initial noise state") {
        SampleResult r = sample_loop({2, 2, 2, 1}, zero_fn, s, 7, 25);
        REQUIRE(r.snapshots.size() == 1);
        CHECK(r.snapshot_steps[0] == 25);
    }

    SUBCASE("snapshot_every = k records every k-th state") {
        SampleResult r = sample_loop({2, 2, 2, 1}, zero_fn, s, 7, 10);
        // states at t = 25, 15, 5 (before reaching z_0)
        REQUIRE(r.snapshots.size() == 3);
        CHECK(r.snapshot_steps == std::vector<int64_t>{25, 15, 5});
    }
}

TEST_CASE("zero denoiser reduces the loop to iterated Gaussian scaling") {
    // analytic recursion for the final variance: v_{t-1} = v_t / (1-beta_t) + sigma_t^2
    DiffusionSchedule s = build_cosine_schedule(40);
    double v = 1.0;
    for (int64_t t = 40; t >= 1; --t) {
        v /= 1.0 - s.beta[t];
        if (t > 1)
            v += posterior_variance(s, t);
    }

    DenoiserFn zero_fn = [](const Tensor& z, int64_t) { return Tensor::zeros(z.shape()); };
    // pool over many elements and several seeds for a stable estimate
    double m = 0.0, m2 = 0.0;
    int64_t count = 0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        SampleResult r = sample_loop({8, 8, 4, 4}, zero_fn, s, seed);
        for (int64_t i = 0; i < r.latent.numel(); ++i) {
            m += r.latent[i];
            m2 += r.latent[i] * r.latent[i];
            ++count;
        }
    }
    m /= static_cast<double>(count);
    const double var = m2 / static_cast<double>(count) - m * m;
    const double se  = v * std::sqrt(2.0 / static_cast<double>(count - 1));
    CHECK(std::abs(m) < 4.0 * std::sqrt(v / static_cast<double>(count)));
    CHECK(std::abs(var - v) < 4.0 * se);
}

TEST_CASE("divergence inside the loop names the failing step") {
    DiffusionSchedule s = build_cosine_schedule(10);
    DenoiserFn nan_fn   = [](const Tensor& z, int64_t t) {
        Tensor out = Tensor::zeros(z.shape());
        if (t == 6)
            out[0] = std::numeric_limits<double>::quiet_NaN();
        return out;
    };
    CHECK_THROWS_WITH_AS(sample_loop({2, 2, 1, 1}, nan_fn, s, 3), doctest::Contains("t=6"),
                         DivergenceError);
}
