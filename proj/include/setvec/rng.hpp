#ifndef SETVEC_RNG_HPP_
#define SETVEC_RNG_HPP_

#include <cmath>
#include <cstdint>
#include <string_view>

namespace setvec {

// Deterministic, platform-independent RNG (xoshiro256++ seeded via splitmix64).
// std::<distribution> types are implementation-defined, so uniform/normal
// draws are generated explicitly here; identical seeds give identical streams
// on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (trig form, spare cached)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // uniform index in [0,n) via 128-bit multiply-high
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(
            (static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n)) >> 64);
    }

    // index in [lo,hi] inclusive
    std::size_t index(std::size_t lo, std::size_t hi) { return lo + index(hi - lo + 1); }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Named substream derivation: one top-level seed fans out into
    // independent streams for data, init, shuffle, ...
    static std::uint64_t derive(std::uint64_t seed, std::string_view name) {
        std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        std::uint64_t x = seed ^ h;
        return splitmix64(x);
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t s_[4]{};
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace setvec

#endif  // SETVEC_RNG_HPP_
