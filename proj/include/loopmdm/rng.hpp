#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>

namespace loopmdm {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// reproducible across standard libraries and serializable into checkpoints.
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ull) {}

    explicit Rng(uint64_t seed) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ull;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s = z ^ (z >> 31);
        }
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl_(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased integer in [0, n) by rejection.
    uint64_t below(uint64_t n) {
        if (n <= 1) {
            return 0;
        }
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= limit) {
            v = next_u64();
        }
        return v % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform01();
        const double a = std::sqrt(-2.0 * std::log(u));
        const double b = 6.283185307179586477 * uniform01();
        spare_ = a * std::sin(b);
        has_spare_ = true;
        return a * std::cos(b);
    }

    // Derive an independent child stream.
    Rng split() { return Rng(next_u64()); }

    void save(std::ostream& out) const {
        for (uint64_t s : state_) {
            out.write(reinterpret_cast<const char*>(&s), sizeof(s));
        }
        const uint8_t flag = has_spare_ ? 1 : 0;
        out.write(reinterpret_cast<const char*>(&flag), 1);
        out.write(reinterpret_cast<const char*>(&spare_), sizeof(spare_));
    }

    bool load(std::istream& in) {
        for (uint64_t& s : state_) {
            in.read(reinterpret_cast<char*>(&s), sizeof(s));
        }
        uint8_t flag = 0;
        in.read(reinterpret_cast<char*>(&flag), 1);
        in.read(reinterpret_cast<char*>(&spare_), sizeof(spare_));
        has_spare_ = flag != 0;
        return static_cast<bool>(in);
    }

    static constexpr std::size_t serialized_size() { return 4 * 8 + 1 + 8; }

private:
    static uint64_t rotl_(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace loopmdm
