#include <set>
#include <vector>

#include <gtest/gtest.h>

#include <mlenkf/rng.hpp>

#include "support.hpp"

using namespace mlenkf;

TEST(DeriveSeed, DependsOnEveryTagAndItsPosition)
{
    EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
    EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
    EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(8, {1, 2}));
    EXPECT_NE(derive_seed(7, {1}), derive_seed(7, {1, 0}));
}

TEST(DeriveSeed, NoCollisionsOverASmallGrid)
{
    std::set<std::uint64_t> seen;
    for (std::uint64_t a = 0; a < 64; ++a) {
        for (std::uint64_t b = 0; b < 64; ++b) seen.insert(derive_seed(0, {a, b}));
    }
    EXPECT_EQ(seen.size(), 64u * 64u);
}

TEST(Xoshiro, SameSeedSameSequence)
{
    Xoshiro256pp a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a();
        EXPECT_EQ(x, b());
        differs |= x != c();
    }
    EXPECT_TRUE(differs);
}

TEST(RngStream, StandardNormalMoments)
{
    RngStream rng(123);
    std::vector<double> z(400000);
    for (auto& v : z) v = rng.gaussian();
    const double se_mean = 1.0 / std::sqrt(static_cast<double>(z.size()));
    EXPECT_NEAR(testing_support::mean(z), 0.0, 4.0 * se_mean);
    EXPECT_NEAR(testing_support::variance(z), 1.0, 4.0 * std::sqrt(2.0) * se_mean);
}

TEST(RngStream, UniformInUnitInterval)
{
    RngStream rng(5);
    double lo = 1.0, hi = 0.0, sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        lo = std::min(lo, u);
        hi = std::max(hi, u);
        sum += u;
    }
    EXPECT_GE(lo, 0.0);
    EXPECT_LT(hi, 1.0);
    EXPECT_NEAR(sum / n, 0.5, 4.0 * std::sqrt(1.0 / 12.0 / n));
}

TEST(RngStream, ChildStreamsAreIndependentOfCreationOrder)
{
    auto a1 = RngStream::child(9, {3, 4});
    auto b = RngStream::child(9, {3, 5});
    auto a2 = RngStream::child(9, {3, 4});
    (void)b.gaussian();
    EXPECT_EQ(a1.gaussian(), a2.gaussian());
}

TEST(ZeroGaussian, AlwaysZero)
{
    ZeroGaussian z;
    static_assert(GaussianSource<ZeroGaussian>);
    static_assert(GaussianSource<RngStream>);
    EXPECT_EQ(z.gaussian(), 0.0);
}
