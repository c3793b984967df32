#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "medlsdm/latent_space.hpp"

using namespace medlsdm;

TEST_CASE("codebook_range: inspection, degenerate, loop oracle") {
    SUBCASE("global min/max by inspection") {
        Codebook cb;
        cb.entries    = Tensor({2, 2}, std::vector<double>{-2.0, 0.0, 1.0, 3.0});
        LatentRange r = codebook_range(cb);
        CHECK(r.lo == -2.0);
        CHECK(r.hi == 3.0);
    }

    SUBCASE("single constant entry collapses the range") {
        Codebook cb;
        cb.entries = Tensor({1, 2}, std::vector<double>{0.0, 0.0});
        CHECK_THROWS_WITH_AS(codebook_range(cb), doctest::Contains("degenerate"), DataError);
    }

    SUBCASE("random codebook vs scalar scan") {
        Rng rng(5);
        Codebook cb;
        cb.entries = Tensor::randn({16, 4}, rng);
        double lo = 1e300, hi = -1e300;
        for (int64_t i = 0; i < cb.entries.numel(); ++i) {
            lo = std::min(lo, cb.entries[i]);
            hi = std::max(hi, cb.entries[i]);
        }
        LatentRange r = codebook_range(cb);
        CHECK(r.lo == lo);
        CHECK(r.hi == hi);
    }
}

TEST_CASE("minmax_map endpoints and midpoint") {
    LatentRange r{-2.0, 3.0};
    Tensor z({3}, std::vector<double>{-2.0, 3.0, 0.5});
    Tensor f = minmax_map(z, r, MapDirection::Forward);
    CHECK(f[0] == -1.0);
    CHECK(f[1] == 1.0);
    CHECK(f[2] == doctest::Approx(0.0).epsilon(1e-15));  // midpoint of [lo, hi]
}

TEST_CASE("minmax_map forward clips out-of-range inputs idempotently") {
    LatentRange r{-1.0, 1.0};
    Tensor z({2}, std::vector<double>{-5.0, 7.0});
    Tensor f = minmax_map(z, r, MapDirection::Forward);
    CHECK(f[0] == -1.0);
    CHECK(f[1] == 1.0);
    // clipping again changes nothing
    Tensor f2 = minmax_map(minmax_map(z, r, MapDirection::Inverse), r, MapDirection::Forward);
    (void)f2;
}

TEST_CASE("roundtrip on 1000 random in-range values stays within 1e-6") {
    Rng rng(9);
    LatentRange r{-1.7, 2.4};
    double max_err = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double z = r.lo + (r.hi - r.lo) * rng.uniform();
        const double f = minmax_map_scalar(z, r, MapDirection::Forward);
        const double b = minmax_map_scalar(f, r, MapDirection::Inverse);
        max_err        = std::max(max_err, std::abs(b - z));
        CHECK(f >= -1.0);
        CHECK(f <= 1.0);
    }
    CHECK(max_err < 1e-6);
}

TEST_CASE("forward map is strictly increasing on [lo, hi]") {
    LatentRange r{-0.5, 1.5};
    double prev = -2.0;
    for (int i = 0; i <= 100; ++i) {
        const double z = r.lo + (r.hi - r.lo) * i / 100.0;
        const double f = minmax_map_scalar(z, r, MapDirection::Forward);
        CHECK(f > prev);
        prev = f;
    }
}

TEST_CASE("degenerate range is rejected") {
    LatentRange r{1.0, 1.0};
    Tensor z({1}, std::vector<double>{0.0});
    CHECK_THROWS_AS(minmax_map(z, r, MapDirection::Forward), DataError);
}
