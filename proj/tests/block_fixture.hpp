// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <mhome/block.hpp>

#include "home_fixture.hpp"
#include "oracles/block_loops.hpp"

namespace testing_util {

inline oracle::Conv conv_of(const mhome::Conv3d<double>& c, std::size_t pad)
{
    const auto& s = c.weight.shape();
    return {c.weight.values(), c.bias.values(), s[1], s[0], s[2], pad};
}

inline oracle::Norm norm_of(const mhome::ChannelNorm<double>& n)
{
    if (n.kind() == mhome::NormKind::DyT)
        return {true, n.dyt_params().w.values(), n.dyt_params().b.values(), n.dyt_params().alpha.item()};
    return {false, n.gamma().values(), n.beta().values(), 0.0};
}

inline oracle::BlockLayer block_layer_of(const mhome::MambaHoMELayer<double>& l)
{
    oracle::BlockLayer o;
    o.main = conv_of(l.gsc.main, 1);
    o.gate = conv_of(l.gsc.gate, 0);
    o.out = conv_of(l.gsc.out, 1);
    o.norm1 = norm_of(l.norm1);
    o.norm2 = norm_of(l.norm2);
    const auto& m = l.mamba;
    o.mamba.in = dense_of(m.in_proj);
    o.mamba.dt = dense_of(m.dt_proj);
    o.mamba.bp = dense_of(m.b_proj);
    o.mamba.cp = dense_of(m.c_proj);
    o.mamba.out = dense_of(m.out_proj);
    o.mamba.a = m.a_param.values();
    o.mamba.dskip = m.d_skip.values();
    o.mamba.d = m.config().d_model;
    o.mamba.di = m.config().d_model * m.config().expand;
    o.mamba.n = m.config().state_dim;
    o.home = oracle_params(l.home);
    o.proj = dense_of(l.proj);
    return o;
}

/// Small block config on C channels with a HoME stage of matching width.
inline mhome::BlockConfig tiny_block(std::size_t C, std::size_t layers, mhome::NormKind norm)
{
    mhome::BlockConfig b;
    b.channels = C;
    b.layers = layers;
    b.norm = norm;
    b.state_dim = 3;
    b.scan_block = 3;
    b.home.group_size = 3;
    b.home.experts = 2;
    b.home.experts2 = 3;
    b.home.slots = 2;
    b.home.dim = C;
    return b;
}

} // namespace testing_util
