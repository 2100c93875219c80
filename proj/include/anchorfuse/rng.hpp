#pragma once

#include <cstdint>
#include <random>

namespace anchorfuse {

// mt19937_64 with a portable normal transform, so that seeded draws are
// identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : m_engine(seed) {}

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(m_engine() >> 11) * 0x1.0p-53; }

    double normal(double mean = 0.0, double stddev = 1.0);

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const auto j = below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    std::mt19937_64& engine() noexcept { return m_engine; }

private:
    std::mt19937_64 m_engine;
    bool m_has_spare = false;
    double m_spare = 0.0;
};

// Derives an independent stream seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

} // namespace anchorfuse
