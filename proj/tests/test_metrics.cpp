// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include <mhome/metrics.hpp>
#include <mhome/network.hpp>

#include "oracles/metric_brute.hpp"

using namespace mhome;

namespace {

LabelVolume random_labels(Rng& rng, Dims3 d, std::size_t classes, double fg = 0.4)
{
    std::vector<std::uint8_t> l(d[0] * d[1] * d[2]);
    for (auto& v : l)
        v = rng.uniform(0, 1) < fg ? std::uint8_t(1 + rng.index(classes - 1)) : 0;
    return {d, l};
}

std::vector<std::uint8_t> random_mask(Rng& rng, std::size_t n, double p)
{
    std::vector<std::uint8_t> m(n);
    for (auto& v : m)
        v = rng.uniform(0, 1) < p;
    if (std::none_of(m.begin(), m.end(), [](auto v) { return v; }))
        m[rng.index(n)] = 1;
    return m;
}

} // namespace

TEST(Dice, IdenticalDisjointAndPartial)
{
    LabelVolume a({1, 1, 8}, {1, 1, 1, 1, 0, 0, 0, 0});
    LabelVolume b({1, 1, 8}, {0, 0, 0, 0, 1, 1, 1, 1});
    LabelVolume c({1, 1, 8}, {0, 0, 1, 1, 1, 1, 0, 0});
    EXPECT_EQ(dsc(a, a, 1), 1.0);
    EXPECT_EQ(dsc(a, b, 1), 0.0);
    EXPECT_EQ(dsc(a, c, 1), 0.5);
    EXPECT_EQ(dsc(a, a, 2), 1.0); // empty in both
    EXPECT_THROW(dsc(a, LabelVolume({1, 2, 4}, a.labels), 1), ShapeError);
}

TEST(Dice, SymmetricAndBounded)
{
    Rng rng(500);
    for (int i = 0; i < 100; ++i) {
        auto a = random_labels(rng, {3, 4, 5}, 3), b = random_labels(rng, {3, 4, 5}, 3);
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_EQ(dsc(a, b, c), dsc(b, a, c));
            EXPECT_GE(dsc(a, b, c), 0.0);
            EXPECT_LE(dsc(a, b, c), 1.0);
        }
    }
}

TEST(MeanDice, ExamplesAndLoopOracle)
{
    LabelVolume gt({1, 1, 4}, {1, 1, 2, 2});
    LabelVolume half({1, 1, 4}, {1, 1, 0, 0});
    EXPECT_EQ(mdsc(gt, gt, 3), 1.0);
    EXPECT_EQ(mdsc(half, gt, 3), 0.5);
    EXPECT_EQ(mdsc(half, gt, 3, true), (0.0 + 1.0 + 0.0) / 3.0); // background absent in gt

    Rng rng(501);
    for (int i = 0; i < 100; ++i) {
        auto a = random_labels(rng, {4, 4, 4}, 4), b = random_labels(rng, {4, 4, 4}, 4);
        double s = 0;
        for (std::uint8_t c = 1; c < 4; ++c)
            s += oracle::dice_count(a.labels, b.labels, c);
        EXPECT_EQ(mdsc(a, b, 4), s / 3.0);
    }
}

TEST(HD95, IdenticalMasksAreZero)
{
    Rng rng(502);
    auto m = random_mask(rng, 64, 0.3);
    EXPECT_EQ(hd95(m, m, {4, 4, 4}), 0.0);
}

TEST(HD95, TwoVoxelsThreeApart)
{
    std::vector<std::uint8_t> a(5, 0), b(5, 0);
    a[0] = 1;
    b[3] = 1;
    EXPECT_EQ(hd95(a, b, {1, 1, 5}), 3.0);
    EXPECT_EQ(hd95(a, b, {1, 1, 5}, {1.0, 1.0, 0.5}), 1.5);
    EXPECT_EQ(hd95(a, b, {5, 1, 1}, {2.0, 1.0, 1.0}), 6.0);
}

TEST(HD95, EmptyStructureIsAnError)
{
    std::vector<std::uint8_t> a(8, 0), b(8, 0);
    b[2] = 1;
    EXPECT_THROW(hd95(a, b, {2, 2, 2}), EmptyStructureError);
    EXPECT_THROW(hd95(b, a, {2, 2, 2}), EmptyStructureError);
}

TEST(HD95, SurfaceIsSixConnectedBoundary)
{
    // 3x3x3 cube inside a 5^3 volume: all but the centre voxel are surface.
    std::vector<std::uint8_t> m(125, 0);
    for (int z = 1; z < 4; ++z)
        for (int y = 1; y < 4; ++y)
            for (int x = 1; x < 4; ++x)
                m[(z * 5 + y) * 5 + x] = 1;
    auto s = surface_voxels(m, {5, 5, 5});
    EXPECT_EQ(std::count(s.begin(), s.end(), 1), 26);
    EXPECT_EQ(s[(2 * 5 + 2) * 5 + 2], 0);
}

TEST(HD95, MatchesBruteForceOnRandomSmallMasks)
{
    Rng rng(503);
    const double spacings[] = {0.5, 1.0, 1.5, 2.0};
    for (int trial = 0; trial < 1000; ++trial) {
        const Dims3 d{1 + rng.index(5), 1 + rng.index(5), 1 + rng.index(5)};
        const std::size_t n = d[0] * d[1] * d[2];
        const std::array<double, 3> sp{spacings[rng.index(4)], spacings[rng.index(4)], spacings[rng.index(4)]};
        auto a = random_mask(rng, n, rng.uniform(0.05, 0.6));
        auto b = random_mask(rng, n, rng.uniform(0.05, 0.6));
        ASSERT_EQ(hd95(a, b, d, sp), oracle::hd95_brute(a, b, long(d[0]), long(d[1]), long(d[2]), sp))
            << "trial " << trial;
        ASSERT_EQ(hd95(a, b, d, sp), hd95(b, a, d, sp));
    }
}

TEST(HD95, NearestRankIndex)
{
    EXPECT_EQ(nearest_rank_95(1), 0u);
    EXPECT_EQ(nearest_rank_95(20), 18u);
    EXPECT_EQ(nearest_rank_95(21), 19u);
    EXPECT_EQ(nearest_rank_95(100), 94u);
}

TEST(SensSpec, Examples)
{
    using O = Outcome;
    auto r = sensitivity_specificity({O::TP, O::TP, O::TN});
    EXPECT_EQ(r.sensitivity, 1.0);
    EXPECT_EQ(r.specificity, 1.0);
    r = sensitivity_specificity({O::TP, O::TP, O::TP, O::FN, O::TN, O::TN, O::TN, O::TN, O::FP});
    EXPECT_EQ(r.sensitivity, 0.75);
    EXPECT_EQ(r.specificity, 0.8);
    EXPECT_THROW(sensitivity_specificity({O::TN, O::FP}), MetricError);
    EXPECT_EQ(classify_case(true, false), O::FP);
    EXPECT_EQ(classify_case(false, true), O::FN);
}

TEST(CountParameters, SingleLinear)
{
    Rng rng(504);
    EXPECT_EQ(count_parameters<double>(Linear<double>(3, 2, rng)), 8u);
}

TEST(CountParameters, TinyHomeStageClosedForm)
{
    Rng rng(505);
    HoMEStageConfig c;
    c.experts = 2;
    c.experts2 = 4;
    c.slots = 1;
    c.dim = 2;
    c.ffn_ratio = 2;
    // slots 2*1*2 = 4; router1 2*2+2 = 6; router2 2*4+4 = 12; FFN (2*4+4)+(4*2+2) = 22
    EXPECT_EQ(count_parameters<double>(HoMELayer<double>(c, rng)), 4u + 6 + 2 * 22 + 12 + 4 * 22);
}

TEST(CountParameters, NetworkMatchesAnalyticFormula)
{
    Rng rng(506);
    MambaHoMENet<double> net(tiny_preset(), rng);
    EXPECT_EQ(count_parameters<double>(net), MambaHoMENet<double>::parameter_count(tiny_preset()));
}
