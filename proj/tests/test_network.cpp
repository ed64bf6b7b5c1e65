// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include <mhome/network.hpp>

#include "test_util.hpp"

using namespace mhome;
using testing_util::random_tensor;
using T = Tensor<double>;

namespace {

/// Independent closed-form count, written per module type.
std::size_t hand_count(const NetworkConfig& c)
{
    auto conv = [](std::size_t ci, std::size_t co, std::size_t k) { return co * ci * k * k * k + co; };
    auto lin = [](std::size_t a, std::size_t b) { return a * b + b; };
    auto norm_of = [](NormKind k, std::size_t ch) { return k == NormKind::DyT ? 2 * ch + 1 : 2 * ch; };
    auto norm = [&](std::size_t ch) { return norm_of(c.norm, ch); };
    std::size_t n = conv(c.in_channels, c.stem_channels, 2);
    for (std::size_t i = 0; i < c.stages; ++i) {
        const std::size_t C = c.stem_channels << i, di = C * c.expand, s = c.state_dim;
        const std::size_t ffn = lin(C, c.ffn_ratio * C) + lin(c.ffn_ratio * C, C);
        const std::size_t gsc = 2 * conv(C, C, 3) + conv(C, C, 1);
        const std::size_t mamba = lin(C, 2 * di) + lin(di, di) + 2 * lin(di, s) + di * s + di + lin(di, C);
        const std::size_t home = c.experts[i] * c.slots * C + lin(C, c.experts[i]) + c.experts[i] * ffn +
                                 lin(C, c.experts2[i]) + c.experts2[i] * ffn;
        n += c.layers[i] * (gsc + 2 * norm(C) + mamba + home + lin(C, C));
        if (i + 1 < c.stages)
            n += conv(C, 2 * C, 2);
    }
    for (std::size_t t = 0; t + 1 < c.stages; ++t) {
        const std::size_t C = c.stem_channels << t;
        n += (2 * C) * C * 8 + C;                                  // transposed upsample
        n += conv(2 * C, C, 3) + conv(C, C, 3) + 2 * norm_of(c.decoder_norm, C); // refinement
    }
    n += c.stem_channels * c.stem_channels * 8 + c.stem_channels; // head upsample
    n += conv(c.stem_channels, c.classes, 1);
    return n;
}

NetworkConfig narrow_desk()
{
    auto c = desk_preset();
    c.stem_channels = 4;
    return c;
}

} // namespace

TEST(NetworkConfig, PresetsValidate)
{
    EXPECT_NO_THROW(desk_preset().validate());
    EXPECT_NO_THROW(full_preset().validate());
    EXPECT_NO_THROW(tiny_preset().validate());
    EXPECT_THROW(preset_by_name("huge"), ConfigError);
}

TEST(NetworkConfig, FullScheduleValues)
{
    const auto c = full_preset();
    EXPECT_EQ(c.stem_channels, 48u);
    EXPECT_EQ(c.stages, 4u);
    EXPECT_EQ(c.channels(), (std::vector<std::size_t>{48, 96, 192, 384}));
    EXPECT_EQ(c.experts, (std::vector<std::size_t>{4, 8, 12, 16}));
    EXPECT_EQ(c.group_sizes, (std::vector<std::size_t>{2048, 1024, 512, 256}));
    EXPECT_EQ(c.slots, 4u);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_EQ(c.experts2[i], 2 * c.experts[i]);
    EXPECT_EQ(c.group_sizes, group_size_schedule(2048, 0.5, 4));
}

TEST(NetworkConfig, InvalidConfigsAreRejected)
{
    auto c = desk_preset();
    c.stages = 1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = desk_preset();
    c.experts = {2, 2, 4, 5};
    EXPECT_THROW(c.validate(), ConfigError);
    c = desk_preset();
    c.group_sizes = {64, 64, 16, 8};
    EXPECT_THROW(c.validate(), ConfigError);
    c = desk_preset();
    c.layers = {1, 1, 1};
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NetworkConfig, InputExtentsMustBeDivisible)
{
    const auto c = desk_preset();
    EXPECT_NO_THROW(c.validate_input({1, 1, 16, 32, 16}));
    EXPECT_THROW(c.validate_input({1, 1, 15, 16, 16}), ConfigError);
    EXPECT_THROW(c.validate_input({1, 1, 8, 16, 16}), ConfigError);
    EXPECT_THROW(c.validate_input({1, 2, 16, 16, 16}), ShapeError);
    try {
        c.validate_input({1, 1, 17, 16, 16});
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
    }
}

TEST(Stem, HalvesExtentsAtFullWidth)
{
    Rng rng(400);
    auto stem = make_stem<double>(full_preset(), rng);
    EXPECT_EQ(stem(T::zeros({1, 1, 16, 16, 16})).shape(), (Shape{1, 48, 8, 8, 8}));
    auto c = desk_preset();
    c.stem_channels = 4;
    EXPECT_EQ(make_stem<double>(c, rng)(T::zeros({1, 1, 8, 8, 8})).shape(), (Shape{1, 4, 4, 4, 4}));
}

TEST(Stem, GradientMatchesFiniteDifferences)
{
    Rng rng(401);
    auto stem = make_stem<double>(tiny_preset(), rng);
    auto x = random_tensor({1, 1, 4, 2, 2}, rng);
    ParamList<double> ps;
    stem.collect(ps, "stem");
    ps.push_back({"x", x});
    auto probe = random_tensor({1, 2, 2, 1, 1}, rng, -1, 1, false);
    EXPECT_LT(testing_util::params_grad_report([&] { return sum(mul(stem(x), probe)); }, ps).max_rel_err, 1e-6);
}

TEST(Encoder, FeatureShapesHalveAndDouble)
{
    Rng rng(402);
    MambaHoMENet<double> net(desk_preset(), rng);
    auto feats = net.encode(random_tensor({1, 1, 32, 32, 32}, rng, -1, 1, false));
    ASSERT_EQ(feats.size(), 4u);
    EXPECT_EQ(feats[0].shape(), (Shape{1, 8, 16, 16, 16}));
    EXPECT_EQ(feats[1].shape(), (Shape{1, 16, 8, 8, 8}));
    EXPECT_EQ(feats[2].shape(), (Shape{1, 32, 4, 4, 4}));
    EXPECT_EQ(feats[3].shape(), (Shape{1, 64, 2, 2, 2}));
    for (const auto& f : feats)
        EXPECT_TRUE(f.is_finite());
}

TEST(Network, LogitsMatchInputExtents)
{
    Rng rng(403);
    MambaHoMENet<double> net(narrow_desk(), rng);
    for (const Shape& s : {Shape{1, 1, 16, 16, 16}, Shape{2, 1, 32, 16, 16}})
        EXPECT_EQ(net(T::zeros(s)).shape(), (Shape{s[0], 3, s[2], s[3], s[4]}));
    MambaHoMENet<double> tiny(tiny_preset(), rng);
    EXPECT_EQ(tiny(T::zeros({1, 1, 4, 8, 12})).shape(), (Shape{1, 2, 4, 8, 12}));
    EXPECT_THROW(tiny(T::zeros({1, 1, 4, 6, 4})), ConfigError);
}

TEST(Network, ZeroHeadGivesUniformPosterior)
{
    Rng rng(404);
    MambaHoMENet<double> net(tiny_preset(), rng);
    std::fill(net.head_out.weight.mutable_data().begin(), net.head_out.weight.mutable_data().end(), 0.0);
    auto logits = net(random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false));
    for (double v : logits.values())
        EXPECT_EQ(v, 0.0);
    auto p = softmax(logits, 1);
    for (double v : p.values())
        EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Network, DecoderRejectsMismatchedSkips)
{
    Rng rng(405);
    MambaHoMENet<double> net(tiny_preset(), rng);
    auto feats = net.encode(T::zeros({1, 1, 8, 8, 8}));
    EXPECT_THROW(net.decode({feats[0]}), ShapeError);
    feats[0] = T::zeros({1, 2, 2, 2, 2});
    EXPECT_THROW(net.decode(feats), ShapeError);
}

TEST(Network, SampledParameterGradients)
{
    Rng rng(406);
    MambaHoMENet<double> net(tiny_preset(), rng);
    auto x = random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false);
    auto probe = random_tensor({1, 2, 8, 8, 8}, rng, -1, 1, false);
    auto loss = [&] { return sum(mul(net(x), probe)); };
    auto ps = net.parameters();
    for (auto& p : ps)
        p.tensor.zero_grad();
    backward(loss());

    // 50 (tensor, index) pairs drawn uniformly over all parameter elements.
    const std::size_t total = count_elements(ps);
    NoGradGuard ng;
    double worst = 0.0;
    for (int s = 0; s < 50; ++s) {
        std::size_t flat = rng.index(total), k = 0;
        while (flat >= ps[k].tensor.numel())
            flat -= ps[k++].tensor.numel();
        auto& t = ps[k].tensor;
        const double analytic = t.has_grad() ? t.grad()[flat] : 0.0;
        auto d = t.mutable_data();
        const double saved = d[flat];
        d[flat] = saved + 1e-5;
        const double up = loss().item();
        d[flat] = saved - 1e-5;
        const double down = loss().item();
        d[flat] = saved;
        worst = std::max(worst, oracle::rel_err(analytic, (up - down) / 2e-5));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Network, ParameterCountMatchesRegistryAndHandFormula)
{
    Rng rng(407);
    for (auto cfg : {tiny_preset(), narrow_desk()}) {
        for (auto norm : {NormKind::DyT, NormKind::LayerNorm}) {
            cfg.norm = norm;
            cfg.decoder_norm = norm == NormKind::DyT ? NormKind::LayerNorm : NormKind::DyT;
            MambaHoMENet<double> net(cfg, rng);
            const std::size_t registry = count_elements(net.parameters());
            EXPECT_EQ(registry, MambaHoMENet<double>::parameter_count(cfg));
            EXPECT_EQ(registry, hand_count(cfg));
        }
    }
    EXPECT_EQ(MambaHoMENet<double>::parameter_count(full_preset()), hand_count(full_preset()));
    EXPECT_EQ(MambaHoMENet<double>::parameter_count(desk_preset()), hand_count(desk_preset()));
}

TEST(Network, ParameterNamesAreUnique)
{
    Rng rng(408);
    MambaHoMENet<double> net(tiny_preset(), rng);
    auto ps = net.parameters();
    std::vector<std::string> names;
    for (const auto& p : ps)
        names.push_back(p.name);
    std::sort(names.begin(), names.end());
    EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
}

TEST(Network, SameSeedSameLogits)
{
    auto run = [] {
        Rng rng(409);
        MambaHoMENet<double> net(tiny_preset(), rng);
        return net(random_tensor({1, 1, 8, 8, 8}, rng, -1, 1, false)).values();
    };
    EXPECT_EQ(run(), run());
}
