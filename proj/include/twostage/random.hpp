#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace twostage {

using Rng = std::mt19937_64;

// Stream keys used with make_stream. The numeric values are part of the
// reproducibility contract: changing them changes every seeded output.
enum class StreamTag : std::uint64_t {
    stage1_chain = 1,
    stage2_population = 2,
    stage2_individual = 3,
    full_population = 4,
    full_individual = 5,
    simulate = 6,
    imputation = 7,
    fmm = 8,
};

/// Counter-based substream derivation.
///
/// A stream is a pure function of (seed, tag, indices...): every 64-bit word
/// is split into two 32-bit halves and fed through std::seed_seq. Workers can
/// therefore create their streams in any order and the draws stay identical.
inline Rng make_stream(std::uint64_t seed, StreamTag tag,
                       std::initializer_list<std::uint64_t> indices = {})
{
    std::vector<std::uint32_t> words;
    words.reserve(4 + 2 * indices.size());
    auto push = [&words](std::uint64_t v) {
        words.push_back(static_cast<std::uint32_t>(v & 0xffffffffULL));
        words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    push(static_cast<std::uint64_t>(tag));
    for (auto v : indices)
        push(v);
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

/// Child stream seeded from the parent's next output.
inline Rng spawn(Rng& parent)
{
    const std::uint64_t a = parent();
    const std::uint64_t b = parent();
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

inline double std_normal(Rng& rng)
{
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline double uniform01(Rng& rng)
{
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n)
{
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(rng);
}

inline double chi_squared(Rng& rng, double dof)
{
    std::gamma_distribution<double> dist(0.5 * dof, 2.0);
    return dist(rng);
}

inline double beta_sample(Rng& rng, double a, double b)
{
    std::gamma_distribution<double> ga(a, 1.0);
    std::gamma_distribution<double> gb(b, 1.0);
    const double x = ga(rng);
    const double y = gb(rng);
    return x / (x + y);
}

} // namespace twostage
