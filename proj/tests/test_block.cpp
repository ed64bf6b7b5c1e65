// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include <mhome/block.hpp>

#include "block_fixture.hpp"
#include "test_util.hpp"

using namespace mhome;
using testing_util::params_grad_report;
using testing_util::random_tensor;
using T = Tensor<double>;

namespace {

void randomize(ParamList<double>& ps, Rng& rng, double scale)
{
    for (auto& p : ps) {
        for (auto& v : p.tensor.mutable_data())
            v = rng.uniform(-scale, scale);
        p.tensor.refresh_finite();
    }
}

} // namespace

TEST(GatedSpatialConv, ZeroWeightsArePureResidual)
{
    Rng rng(300);
    GatedSpatialConv<double> g(3, rng);
    ParamList<double> ps;
    g.collect(ps, "");
    zero_params(ps);
    auto x = random_tensor({1, 3, 2, 3, 2}, rng, -1, 1, false);
    EXPECT_EQ(g(x).values(), x.values());
}

TEST(GatedSpatialConv, PreservesShape)
{
    Rng rng(301);
    GatedSpatialConv<double> g(4, rng);
    EXPECT_EQ(g(T::zeros({1, 4, 8, 8, 8})).shape(), (Shape{1, 4, 8, 8, 8}));
    EXPECT_THROW(g(T::zeros({1, 3, 8, 8, 8})), ShapeError);
}

TEST(GatedSpatialConv, GradientMatchesFiniteDifferences)
{
    Rng rng(302);
    GatedSpatialConv<double> g(2, rng);
    auto x = random_tensor({1, 2, 3, 3, 3}, rng);
    ParamList<double> ps;
    g.collect(ps, "gsc");
    ps.push_back({"x", x});
    auto probe = random_tensor({1, 2, 3, 3, 3}, rng, -1, 1, false);
    EXPECT_LT(params_grad_report([&] { return sum(mul(g(x), probe)); }, ps).max_rel_err, 1e-4);
}

TEST(Tokens, RasterOrderRoundTrip)
{
    Rng rng(303);
    auto x = random_tensor({2, 3, 2, 4, 5}, rng, -1, 1, false);
    auto t = volume_to_tokens(x);
    ASSERT_EQ(t.shape(), (Shape{2, 40, 3}));
    // token p = (z*H + y)*W + w, channel c
    EXPECT_EQ(t[(1 * 40 + ((1 * 4 + 2) * 5 + 3)) * 3 + 2], x[(((1 * 3 + 2) * 2 + 1) * 4 + 2) * 5 + 3]);
    EXPECT_EQ(tokens_to_volume(t, x.shape()).values(), x.values());
    EXPECT_THROW(tokens_to_volume(t, Shape{2, 3, 2, 4, 4}), ShapeError);
}

TEST(MambaHoMEBlock, ZeroBranchesGiveExactIdentity)
{
    Rng rng(304);
    for (auto norm : {NormKind::DyT, NormKind::LayerNorm}) {
        MambaHoMEBlock<double> b(testing_util::tiny_block(4, 2, norm), rng);
        b.zero_branches();
        auto x = random_tensor({2, 4, 2, 3, 2}, rng, -3, 3, false);
        auto y = b(x);
        ASSERT_EQ(y.values().size(), x.values().size());
        for (std::size_t i = 0; i < x.numel(); ++i)
            ASSERT_EQ(y[i], x[i]) << "index " << i;
    }
}

TEST(MambaHoMEBlock, AllZeroParametersGiveIdentity)
{
    Rng rng(305);
    MambaHoMEBlock<double> b(testing_util::tiny_block(4, 1, NormKind::DyT), rng);
    ParamList<double> ps;
    b.collect(ps, "");
    zero_params(ps);
    auto x = random_tensor({1, 4, 2, 2, 2}, rng, -1, 1, false);
    EXPECT_EQ(b(x).values(), x.values());
}

TEST(MambaHoMEBlock, PreservesShape)
{
    Rng rng(306);
    MambaHoMEBlock<double> b(testing_util::tiny_block(3, 2, NormKind::DyT), rng);
    for (const Shape& s : {Shape{1, 3, 2, 2, 2}, Shape{2, 3, 1, 4, 3}, Shape{1, 3, 5, 1, 1}})
        EXPECT_EQ(b(T::zeros(s)).shape(), s);
    EXPECT_THROW(b(T::zeros({1, 4, 2, 2, 2})), ShapeError);
}

TEST(MambaHoMEBlock, MatchesMonolithicLoops)
{
    Rng rng(307);
    for (auto norm : {NormKind::DyT, NormKind::LayerNorm}) {
        MambaHoMEBlock<double> b(testing_util::tiny_block(4, 1, norm), rng);
        ParamList<double> ps;
        b.collect(ps, "");
        randomize(ps, rng, 0.6);
        auto x = random_tensor({1, 4, 2, 2, 2}, rng, -1, 1, false);
        auto y = b(x);
        auto ref = testing_util::block_layer_of(b.layers[0]).apply(x.values(), 4, 2, 2, 2);
        double diff = 0.0;
        for (std::size_t i = 0; i < ref.size(); ++i)
            diff = std::max(diff, std::abs(ref[i] - y[i]));
        EXPECT_LT(diff, 1e-12) << to_string(norm);
    }
}

TEST(MambaHoMEBlock, LayersAreIndependentlyParameterized)
{
    Rng rng(308);
    MambaHoMEBlock<double> b(testing_util::tiny_block(3, 2, NormKind::DyT), rng);
    EXPECT_NE(b.layers[0].gsc.main.weight.values(), b.layers[1].gsc.main.weight.values());
    // two layers = two applications of the single-layer composition
    auto x = random_tensor({1, 3, 2, 2, 1}, rng, -1, 1, false);
    auto twice = b.layers[1](b.layers[0](x));
    EXPECT_EQ(b(x).values(), twice.values());
}

TEST(MambaHoMEBlock, GradientOverAllParameters)
{
    Rng rng(309);
    for (auto norm : {NormKind::DyT, NormKind::LayerNorm}) {
        MambaHoMEBlock<double> b(testing_util::tiny_block(2, 1, norm), rng);
        auto x = random_tensor({1, 2, 2, 2, 2}, rng);
        ParamList<double> ps;
        b.collect(ps, "block");
        ps.push_back({"x", x});
        auto probe = random_tensor({1, 2, 2, 2, 2}, rng, -1, 1, false);
        auto rep = params_grad_report([&] { return sum(mul(b(x), probe)); }, ps);
        EXPECT_LT(rep.max_rel_err, 1e-4) << to_string(norm);
        EXPECT_TRUE(b(x).is_finite());
    }
}

TEST(MambaHoMEBlock, ParameterCountMatchesRegistry)
{
    Rng rng(310);
    for (auto norm : {NormKind::DyT, NormKind::LayerNorm}) {
        const auto cfg = testing_util::tiny_block(5, 2, norm);
        MambaHoMEBlock<double> b(cfg, rng);
        ParamList<double> ps;
        b.collect(ps, "");
        EXPECT_EQ(count_elements(ps), MambaHoMEBlock<double>::parameter_count(cfg));
    }
}

TEST(MambaHoMEBlock, ConfigErrors)
{
    Rng rng(311);
    auto cfg = testing_util::tiny_block(4, 0, NormKind::DyT);
    EXPECT_THROW(MambaHoMEBlock<double>(cfg, rng), ConfigError);
    cfg.layers = 1;
    cfg.home.dim = 3;
    EXPECT_THROW(MambaHoMEBlock<double>(cfg, rng), ConfigError);
}
