#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace privdiff {

// Counter-based PRNG (philox4x32-10). Streams are identified by a 64-bit key;
// every (key, counter) pair maps to the same block on every platform, which is
// what makes checkpoint/resume and microbatch-size invariance exact: a draw is
// addressed, never "next in some hidden state".
class Rng {
public:
    explicit Rng(uint64_t key) : key_(key) {}

    uint32_t u32() {
        if (pos_ == 4) {
            block_ = philox_block(key_, counter_++);
            pos_ = 0;
        }
        return block_[pos_++];
    }

    uint64_t u64() {
        uint64_t hi = u32();
        return (hi << 32) | u32();
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi], inclusive, unbiased via rejection.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t v;
        do {
            v = u64();
        } while (v >= limit);
        return lo + static_cast<int64_t>(v % span);
    }

    // Standard normal via Box-Muller; the spare is kept within one stream.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] so log(u1) is finite.
        double u1 = (static_cast<double>(u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = static_cast<double>(u64() >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    void normal_fill(double* dst, size_t n) {
        for (size_t i = 0; i < n; ++i) dst[i] = normal();
    }

    static std::array<uint32_t, 4> philox_block(uint64_t key, uint64_t counter) {
        uint32_t k0 = static_cast<uint32_t>(key);
        uint32_t k1 = static_cast<uint32_t>(key >> 32);
        uint32_t c0 = static_cast<uint32_t>(counter);
        uint32_t c1 = static_cast<uint32_t>(counter >> 32);
        uint32_t c2 = 0, c3 = 0;
        for (int round = 0; round < 10; ++round) {
            uint64_t p0 = static_cast<uint64_t>(0xD2511F53u) * c0;
            uint64_t p1 = static_cast<uint64_t>(0xCD9E8D57u) * c2;
            uint32_t h0 = static_cast<uint32_t>(p0 >> 32), l0 = static_cast<uint32_t>(p0);
            uint32_t h1 = static_cast<uint32_t>(p1 >> 32), l1 = static_cast<uint32_t>(p1);
            uint32_t n0 = h1 ^ c1 ^ k0;
            uint32_t n1 = l1;
            uint32_t n2 = h0 ^ c3 ^ k1;
            uint32_t n3 = l0;
            c0 = n0;
            c1 = n1;
            c2 = n2;
            c3 = n3;
            k0 += 0x9E3779B9u;
            k1 += 0xBB67AE85u;
        }
        return {c0, c1, c2, c3};
    }

private:
    uint64_t key_;
    uint64_t counter_ = 0;
    std::array<uint32_t, 4> block_{};
    int pos_ = 4;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

// Derives the philox key for a named stream. `tag` separates purposes
// ("noise", "poisson", "tau", ...), the indices separate steps and samples.
inline uint64_t rng_key(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0,
                        uint64_t c = 0) {
    uint64_t h = fnv1a64(&seed, sizeof(seed));
    h = fnv1a64(tag, h);
    h = fnv1a64(&a, sizeof(a), h);
    h = fnv1a64(&b, sizeof(b), h);
    h = fnv1a64(&c, sizeof(c), h);
    return h;
}

inline Rng keyed_rng(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0,
                     uint64_t c = 0) {
    return Rng(rng_key(seed, tag, a, b, c));
}

}  // namespace privdiff
