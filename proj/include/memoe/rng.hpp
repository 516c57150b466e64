#pragma once

// Counter-based 64-bit generator. Output i of a stream is a pure function of
// (key, i), so draws are reproducible across platforms and independent of
// the order in which streams are consumed. Child streams are derived by
// hashing the parent key with a tag, e.g. rng.split(rep).split(subject).

#include <cmath>
#include <cstdint>
#include <numbers>

namespace memoe {

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(mix64(key)) {}

    CounterRng split(std::uint64_t tag) const {
        CounterRng child(0);
        child.key_ = mix64(key_ ^ mix64(tag * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
        return child;
    }

    std::uint64_t next_u64() { return mix64(key_ + 0x9E3779B97F4A7C15ULL * (++counter_)); }

    /// Uniform on the open interval (0, 1).
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; consumes two outputs per draw.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Index drawn from a discrete distribution given its probabilities.
    template <class Probs>
    int categorical(const Probs& p) {
        const double u = uniform();
        double acc = 0.0;
        const int n = static_cast<int>(p.size());
        for (int k = 0; k < n; ++k) {
            acc += p[k];
            if (u < acc) return k;
        }
        return n - 1;
    }

    std::uint64_t key() const { return key_; }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace memoe
