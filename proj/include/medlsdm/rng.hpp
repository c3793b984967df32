#ifndef MEDLSDM_RNG_HPP
#define MEDLSDM_RNG_HPP

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace medlsdm {

// Deterministic random stream. xoshiro256++ seeded through splitmix64,
// with a fixed Box-Muller normal transform so results are pinned across
// platforms and standard-library versions.
class Rng {
public:
    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_)
            si = splitmix64(x);
        have_cached_normal_ = false;
        cached_normal_      = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t      = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    // Standard normal via Box-Muller; the second draw of each pair is cached.
    double normal() {
        if (have_cached_normal_) {
            have_cached_normal_ = false;
            return cached_normal_;
        }
        double u1 = uniform();
        while (u1 <= 0.0)
            u1 = uniform();
        const double u2 = uniform();
        const double r  = std::sqrt(-2.0 * std::log(u1));
        const double a  = 2.0 * 3.14159265358979323846 * u2;
        cached_normal_      = r * std::sin(a);
        have_cached_normal_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent substream for a named purpose (e.g. "vqgan.slices").
    Rng substream(const std::string& name) const {
        return Rng(fnv1a64(name) ^ splitmix_of(s_[0] ^ s_[2]));
    }
    Rng substream(uint64_t salt) const { return Rng(splitmix_of(s_[0] ^ s_[2] ^ salt)); }

    static uint64_t fnv1a64(const std::string& s) {
        uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ull;
        uint64_t z = x;
        z          = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z          = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static uint64_t splitmix_of(uint64_t x) { return splitmix64(x); }

    uint64_t s_[4]{};
    bool have_cached_normal_ = false;
    double cached_normal_    = 0.0;
};

}  // namespace medlsdm

#endif
