#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dynaclr/errors.hpp"
#include "dynaclr/rng.hpp"
#include "dynaclr/types.hpp"

using namespace dynaclr;

TEST(Rng, DeriveSeedIsDeterministicAndPathSensitive) {
    EXPECT_EQ(derive_seed(7, {1, 2}), derive_seed(7, {1, 2}));
    EXPECT_NE(derive_seed(7, {1, 2}), derive_seed(7, {2, 1}));
    EXPECT_NE(derive_seed(7, {1}), derive_seed(8, {1}));
    EXPECT_NE(derive_seed(7, {1}), derive_seed(7, {1, 0}));
}

TEST(Rng, UniformIndexStaysInRangeAndCoversIt) {
    Rng rng(1);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        const auto v = uniform_index(rng, 7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
}

TEST(Rng, Uniform01AndNormalMoments) {
    Rng rng(42);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0;
    for (int i = 0; i < n; ++i) {
        const double u = uniform01(rng);
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        su += u;
        const double z = normal(rng);
        sn += z;
        sn2 += z * z;
    }
    EXPECT_NEAR(su / n, 0.5, 0.005);
    EXPECT_NEAR(sn / n, 0.0, 0.01);
    EXPECT_NEAR(sn2 / n, 1.0, 0.02);
}

TEST(Rng, SequencesAreFixedAcrossRuns) {
    Rng a(123), b(123);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(uniform_index(a, 1000), uniform_index(b, 1000));
}

TEST(Types, NodeKeyOrderingIsFovTrackTime) {
    NodeKey a{"A1", 1, 5}, b{"A1", 2, 0}, c{"B1", 0, 0}, d{"A1", 1, 6};
    EXPECT_LT(a, b);
    EXPECT_LT(b, c);
    EXPECT_LT(a, d);
    EXPECT_EQ(NodeKeyHash{}(a), NodeKeyHash{}(NodeKey{"A1", 1, 5}));
    EXPECT_EQ(to_string(a), to_string(NodeKey{"A1", 1, 5}));
}

TEST(Types, VolumeIndexingIsCOrder) {
    Volume v({2, 3, 4, 5});
    EXPECT_EQ(v.data.size(), 120u);
    EXPECT_EQ(v.index(1, 2, 3, 4), 119u);
    EXPECT_EQ(v.index(0, 0, 1, 0), 5u);
    v.at(1, 0, 0, 0) = 3.0f;
    EXPECT_EQ(v.channel(1)[0], 3.0f);
    EXPECT_EQ(v.channel_size(), 60u);
}

TEST(Errors, HierarchyMapsToValidation) {
    EXPECT_THROW(throw ParseError("f", "bad"), ValidationError);
    EXPECT_THROW(throw ConfigError("x"), ValidationError);
    EXPECT_THROW(throw LeakageError("x"), ValidationError);
    EXPECT_THROW(throw RangeError("x"), ValidationError);
    EXPECT_THROW(throw IntegrityError("x"), ValidationError);
    EXPECT_THROW(throw EmptyAnchorSetError("x"), SamplingError);
    EXPECT_THROW(throw CapabilityError("x"), Error);
    ParseError e("volume_shape", "bad");
    EXPECT_EQ(e.field(), "volume_shape");
    DegenerateStatsError d("phase", "zero std");
    EXPECT_EQ(d.channel(), "phase");
}
