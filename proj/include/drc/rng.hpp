#pragma once

#include <cmath>
#include <istream>
#include <ostream>
#include <random>

#include "drc/common.hpp"

namespace drc {

inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic random stream. std::*_distribution is implementation-defined,
// so uniform/normal draws are produced by hand from raw engine output; the
// whole state is the engine state, which serializes as text.
class Rng {
public:
    explicit Rng(u64 seed) : eng_(splitmix64(seed)), seed_(seed) {}

    u64 next_u64() { return eng_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // (0, 1]
    double uniform_open0() {
        return (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller without caching: state stays exactly the engine state.
    double normal() {
        double u1 = uniform_open0();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Unbiased integer in [0, n) via rejection.
    i64 uniform_int(i64 n) {
        const u64 un = static_cast<u64>(n);
        const u64 limit = UINT64_MAX - UINT64_MAX % un;
        u64 x;
        do {
            x = eng_();
        } while (x >= limit);
        return static_cast<i64>(x % un);
    }

    // Independent child stream, e.g. one per dataset index.
    Rng derive(u64 stream) const {
        return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x9e3779b9ULL)));
    }

    void save(std::ostream& os) const { os << eng_; }
    void load(std::istream& is) { is >> eng_; }

private:
    std::mt19937_64 eng_;
    u64 seed_;
};

}  // namespace drc
