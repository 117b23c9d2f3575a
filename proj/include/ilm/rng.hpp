#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace ilm {

// splitmix64, used to derive independent stream seeds from a master seed.
constexpr uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

constexpr uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t mix_seed(uint64_t base, uint64_t a) {
    return splitmix64(base ^ splitmix64(a + 0x51ed2701ull));
}

inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b) {
    return mix_seed(mix_seed(base, a), b);
}

inline uint64_t mix_seed(uint64_t base, uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(base, a, b), c);
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag) {
    return mix_seed(base, fnv1a64(tag));
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag, uint64_t a) {
    return mix_seed(mix_seed(base, fnv1a64(tag)), a);
}

inline uint64_t mix_seed(uint64_t base, std::string_view tag, uint64_t a, uint64_t b) {
    return mix_seed(mix_seed(base, fnv1a64(tag)), a, b);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are hand-rolled here because the std:: distribution objects
// are implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Unbiased uniform draw in [0, n). n must be > 0.
    uint64_t below(uint64_t n) {
        uint64_t x, r;
        do {
            x = gen_();
            r = x % n;
        } while (x - r > uint64_t(0) - n);
        return r;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller, spare value cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform01(); // avoid log(0)
        const double u2 = uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        has_spare_ = true;
        return radius * std::cos(angle);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Hex rendering of a 64-bit hash, used for vocab and config hashes.
std::string hash_hex(uint64_t h);

} // namespace ilm
