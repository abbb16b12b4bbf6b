#pragma once

#include <concepts>
#include <cstdint>
#include <initializer_list>
#include <limits>

#include <boost/random/normal_distribution.hpp>

namespace mlenkf {

/// One round of the splitmix64 output function. Used for seed mixing only.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives a child seed from a parent seed and a path of integer tags.
///
/// Streams are addressed hierarchically, e.g. (master, replica, level,
/// sample). The result depends only on the values, never on the order in
/// which streams are created, so parallel schedules reproduce serial ones.
constexpr std::uint64_t derive_seed(std::uint64_t parent,
                                    std::initializer_list<std::uint64_t> path) noexcept
{
    std::uint64_t h = splitmix64(parent ^ 0x6a09e667f3bcc909ULL);
    for (std::uint64_t tag : path) {
        h = splitmix64(h ^ splitmix64(tag + 0xbb67ae8584caa73bULL));
    }
    return h;
}

/// xoshiro256++ (Blackman & Vigna). Satisfies UniformRandomBitGenerator.
class Xoshiro256pp {
public:
    using result_type = std::uint64_t;

    explicit Xoshiro256pp(std::uint64_t seed = 0) noexcept
    {
        std::uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            word = splitmix64(x);
        }
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept
    {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    friend bool operator==(const Xoshiro256pp&, const Xoshiro256pp&) = default;

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept
    {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4]{};
};

/// Anything that hands out standard normal variates one at a time.
template <class G>
concept GaussianSource = requires(G& g) {
    { g.gaussian() } -> std::convertible_to<double>;
};

/// Private random stream owned by one filter instance or one multilevel sample.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : engine_(seed) {}

    double gaussian() { return normal_(engine_); }

    double uniform()
    {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Stream addressed by a parent seed and a tag path, see derive_seed().
    static RngStream child(std::uint64_t parent, std::initializer_list<std::uint64_t> path)
    {
        return RngStream(derive_seed(parent, path));
    }

private:
    Xoshiro256pp engine_;
    boost::random::normal_distribution<double> normal_{0.0, 1.0};
};

/// Deterministic source that always returns zero. Turns every stochastic
/// input off, leaving only the deterministic part of a computation.
struct ZeroGaussian {
    double gaussian() const noexcept { return 0.0; }
};

} // namespace mlenkf
