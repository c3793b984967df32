#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "medlsdm/rng.hpp"
#include "medlsdm/tensor.hpp"

using namespace medlsdm;

TEST_CASE("shape bookkeeping and element access") {
    Tensor t({2, 3, 4, 5});
    CHECK(t.numel() == 120);
    t.at(1, 2, 3, 4) = 7.5;
    CHECK(t[119] == 7.5);
    CHECK(t.at(0, 0, 0, 0) == 0.0);

    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), ShapeError);
    CHECK_THROWS_AS(t.reshaped({7, 7}), ShapeError);
    CHECK(t.reshaped({120})[119] == 7.5);
}

TEST_CASE("shared storage semantics and clone") {
    Tensor a({4});
    Tensor b = a;  // shallow
    b[0]     = 3.0;
    CHECK(a[0] == 3.0);
    Tensor c = a.clone();
    c[0]     = 9.0;
    CHECK(a[0] == 3.0);
}

TEST_CASE("elementwise helpers match scalar loops") {
    Rng rng(42);
    Tensor a = Tensor::randn({3, 2, 2, 2}, rng);
    Tensor b = Tensor::randn({3, 2, 2, 2}, rng);

    Tensor s = add(a, b);
    Tensor d = sub(a, b);
    Tensor m = mul(a, b);
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(s[i] == a[i] + b[i]);
        CHECK(d[i] == a[i] - b[i]);
        CHECK(m[i] == a[i] * b[i]);
    }

    double dot_ref = 0.0, ssq = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot_ref += a[i] * b[i];
        const double diff = a[i] - b[i];
        ssq += diff * diff;
    }
    CHECK(dot(a, b) == doctest::Approx(dot_ref).epsilon(1e-14));
    CHECK(sum_sq_diff(a, b) == doctest::Approx(ssq).epsilon(1e-14));
    CHECK(mean_sq_diff(a, b) == doctest::Approx(ssq / a.numel()).epsilon(1e-14));
}

TEST_CASE("finiteness and range queries") {
    Tensor t({4});
    t[0] = -2.0;
    t[3] = 5.0;
    CHECK(t.min() == -2.0);
    CHECK(t.max() == 5.0);
    CHECK(t.all_finite());
    t[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(123), b(123), c(124);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
    }
    CHECK(a.next_u64() != c.next_u64());

    // normal() moments over many draws
    Rng r(7);
    double mean = 0.0, var = 0.0;
    const int n = 200000;
    std::vector<double> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i] = r.normal();
        mean += xs[i];
    }
    mean /= n;
    for (int i = 0; i < n; ++i)
        var += (xs[i] - mean) * (xs[i] - mean);
    var /= n - 1;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);

    // substreams differ from the parent and from each other
    Rng s1 = r.substream("a");
    Rng s2 = r.substream("b");
    CHECK(s1.next_u64() != s2.next_u64());
}

TEST_CASE("shuffle is a seeded permutation") {
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    Rng r1(9), r2(9);
    auto v1 = v, v2 = v;
    r1.shuffle(v1);
    r2.shuffle(v2);
    CHECK(v1 == v2);
    std::sort(v1.begin(), v1.end());
    CHECK(v1 == v);
}
