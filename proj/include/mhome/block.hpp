// SPDX-License-Identifier: Apache-2.0
//
// Mamba-HoME block: per layer
//   xh  = GSC(x)
//   xt  = Mamba(norm1(xh)) + xh
//   out = Linear(HoME(norm2(xt))) + xt
// with the Mamba and HoME sub-layers acting on the raster-ordered token
// sequence (depth-major, then height, then width) of the feature volume.

#pragma once

#include <string>
#include <vector>

#include "home.hpp"
#include "ssm.hpp"

namespace mhome {

/// Gated spatial convolution: conv_out(conv_main(x) * sigmoid(conv_gate(x))) + x.
template <typename T>
class GatedSpatialConv {
public:
    GatedSpatialConv() = default;
    GatedSpatialConv(std::size_t channels, Rng& rng)
        : main(channels, channels, 3, 1, 1, rng), gate(channels, channels, 1, 1, 0, rng),
          out(channels, channels, 3, 1, 1, rng), channels_(channels)
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        if (x.rank() != 5 || x.dim(1) != channels_)
            throw ShapeError("gsc: expected (B, " + std::to_string(channels_) + ", D, H, W), got " +
                             to_string(x.shape()));
        return add(out(mul(main(x), sigmoid(gate(x)))), x);
    }

    void collect(ParamList<T>& params, const std::string& prefix) const
    {
        main.collect(params, join_name(prefix, "main"));
        gate.collect(params, join_name(prefix, "gate"));
        out.collect(params, join_name(prefix, "out"));
    }

    static std::size_t parameter_count(std::size_t c)
    {
        return 2 * Conv3d<T>::parameter_count(c, c, 3) + Conv3d<T>::parameter_count(c, c, 1);
    }

    Conv3d<T> main, gate, out;

private:
    std::size_t channels_ = 0;
};

struct BlockConfig {
    std::size_t channels = 8;
    std::size_t layers = 1;
    NormKind norm = NormKind::DyT;
    std::size_t state_dim = 8;
    std::size_t expand = 1;
    std::size_t scan_block = 64;
    HoMEStageConfig home;

    SSMConfig ssm() const { return SSMConfig{channels, state_dim, expand, scan_block}; }
};

/// (B, C, D, H, W) -> (B, D*H*W, C) in raster order.
template <typename T>
Tensor<T> volume_to_tokens(const Tensor<T>& x)
{
    const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3) * x.dim(4);
    return permute(reshape(x, {B, C, N}), {0, 2, 1});
}

template <typename T>
Tensor<T> tokens_to_volume(const Tensor<T>& tokens, const Shape& volume_shape)
{
    if (tokens.rank() != 3 || volume_shape.size() != 5 || tokens.dim(0) != volume_shape[0] ||
        tokens.dim(2) != volume_shape[1] || tokens.dim(1) != volume_shape[2] * volume_shape[3] * volume_shape[4])
        throw ShapeError("tokens " + to_string(tokens.shape()) + " do not fit volume " + to_string(volume_shape));
    return reshape(permute(tokens, {0, 2, 1}), volume_shape);
}

/// One application of the block composition.
template <typename T>
class MambaHoMELayer {
public:
    MambaHoMELayer() = default;
    MambaHoMELayer(const BlockConfig& cfg, Rng& rng)
        : gsc(cfg.channels, rng), norm1(cfg.norm, cfg.channels), mamba(cfg.ssm(), rng), norm2(cfg.norm, cfg.channels),
          home(cfg.home, rng), proj(cfg.channels, cfg.channels, rng)
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        auto xh = gsc(x);
        auto tokens = volume_to_tokens(xh);
        auto xt = add(mamba(norm1(tokens, 2)), tokens);
        auto out = add(proj(home(norm2(xt, 2))), xt);
        return tokens_to_volume(out, x.shape());
    }

    /// Zeroes the last map of each residual branch so the layer is the identity.
    void zero_branches()
    {
        for (auto* t : {&gsc.out.weight, &gsc.out.bias, &mamba.out_proj.weight, &mamba.out_proj.bias, &proj.weight,
                        &proj.bias})
            std::fill(t->mutable_data().begin(), t->mutable_data().end(), T(0));
    }

    void collect(ParamList<T>& params, const std::string& prefix) const
    {
        gsc.collect(params, join_name(prefix, "gsc"));
        norm1.collect(params, join_name(prefix, "norm1"));
        mamba.collect(params, join_name(prefix, "mamba"));
        norm2.collect(params, join_name(prefix, "norm2"));
        home.collect(params, join_name(prefix, "home"));
        proj.collect(params, join_name(prefix, "proj"));
    }

    static std::size_t parameter_count(const BlockConfig& cfg)
    {
        return GatedSpatialConv<T>::parameter_count(cfg.channels) +
               2 * ChannelNorm<T>::parameter_count(cfg.norm, cfg.channels) +
               MambaLayer<T>::parameter_count(cfg.ssm()) + HoMELayer<T>::parameter_count(cfg.home) +
               Linear<T>::parameter_count(cfg.channels, cfg.channels);
    }

    GatedSpatialConv<T> gsc;
    ChannelNorm<T> norm1;
    MambaLayer<T> mamba;
    ChannelNorm<T> norm2;
    HoMELayer<T> home;
    Linear<T> proj;
};

/// A stage: `layers` independently parameterized applications of the composition.
template <typename T>
class MambaHoMEBlock {
public:
    MambaHoMEBlock() = default;
    MambaHoMEBlock(const BlockConfig& cfg, Rng& rng) : cfg_(cfg)
    {
        if (cfg.layers == 0)
            throw ConfigError("block needs at least one layer");
        if (cfg.home.dim != cfg.channels)
            throw ConfigError("block: HoME width " + std::to_string(cfg.home.dim) + " differs from channel count " +
                              std::to_string(cfg.channels));
        for (std::size_t l = 0; l < cfg.layers; ++l)
            layers.emplace_back(cfg, rng);
    }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        if (x.rank() != 5 || x.dim(1) != cfg_.channels)
            throw ShapeError("block: expected (B, " + std::to_string(cfg_.channels) + ", D, H, W), got " +
                             to_string(x.shape()));
        Tensor<T> h = x;
        for (const auto& layer : layers)
            h = layer(h);
        return h;
    }

    void zero_branches()
    {
        for (auto& l : layers)
            l.zero_branches();
    }

    const BlockConfig& config() const { return cfg_; }

    void collect(ParamList<T>& params, const std::string& prefix) const
    {
        for (std::size_t l = 0; l < layers.size(); ++l)
            layers[l].collect(params, join_name(prefix, "layer" + std::to_string(l)));
    }

    static std::size_t parameter_count(const BlockConfig& cfg)
    {
        return cfg.layers * MambaHoMELayer<T>::parameter_count(cfg);
    }

    std::vector<MambaHoMELayer<T>> layers;

private:
    BlockConfig cfg_;
};

} // namespace mhome
