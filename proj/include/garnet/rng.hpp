#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace garnet {

// Deterministic RNG used everywhere randomness is needed. std::mt19937_64 is
// fully specified by the standard; the distributions below are hand-rolled
// because the std ones are implementation-defined and would break
// reproducibility across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed), seed0_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, n). Modulo bias is < 2^-50 for any n we ever use.
    uint64_t uniform_u64(uint64_t n) { return n ? engine_() % n : 0; }

    int uniform_int(int lo, int hi) { // inclusive range
        return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi - lo + 1)));
    }

    double uniform_real() { // [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform_real(double lo, double hi) { return lo + (hi - lo) * uniform_real(); }

    double normal() { // Box-Muller; spare value cached for determinism
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform_real();
        } while (u1 <= 0.0);
        const double u2 = uniform_real();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) { // Fisher-Yates
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_u64(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // First k of a shuffled index range: uniform sample without replacement.
    std::vector<int> sample_without_replacement(int n, int k) {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        shuffle(idx);
        idx.resize(static_cast<size_t>(k));
        return idx;
    }

    // Derives an independent stream for a named purpose; keeps data order,
    // view counts and view choices on separate reproducible streams.
    Rng stream(std::string_view tag) const {
        uint64_t h = 0xcbf29ce484222325ull; // FNV-1a
        for (char c : tag) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(mix(seed0_ ^ h));
    }

    Rng stream(uint64_t tag) const {
        return Rng(mix(seed0_ ^ (0x9e3779b97f4a7c15ull * (tag + 1))));
    }

private:
    static uint64_t mix(uint64_t z) { // splitmix64 finalizer
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
    uint64_t seed0_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace garnet
