// SPDX-License-Identifier: Apache-2.0
//
// U-shaped encoder-decoder built from Mamba-HoME blocks.
//
// Encoder: stem (k2 s2 conv) -> F_1; for each stage i, block_i(F_i) is kept as
// the stage feature and, except for the last stage, downsampled by a k2 s2 conv
// that doubles the channels. Decoder: from the deepest feature, each step
// upsamples with a k2 s2 transposed conv, concatenates the matching skip and
// refines with an UpBlock. Head: k2 s2 transposed conv back to input
// resolution, GELU, 1x1x1 conv to class logits.

#pragma once

#include <string>
#include <vector>

#include "block.hpp"

namespace mhome {

struct NetworkConfig {
    std::string name = "desk";
    std::size_t in_channels = 1;
    std::size_t classes = 3;
    std::size_t stem_channels = 8;
    std::size_t stages = 4;
    std::vector<std::size_t> layers{1, 1, 1, 1};
    std::vector<std::size_t> experts{2, 3, 4, 5};
    std::vector<std::size_t> experts2{4, 6, 8, 10};
    std::vector<std::size_t> group_sizes{64, 32, 16, 8};
    std::size_t slots = 2;
    std::size_t ffn_ratio = 2;
    double rho = 0.5;
    NormKind norm = NormKind::DyT;          ///< inside the Mamba-HoME blocks
    NormKind decoder_norm = NormKind::LayerNorm; ///< inside the decoder UpBlocks
    std::size_t state_dim = 8;
    std::size_t expand = 1;
    std::size_t scan_block = 64;

    /// C_i = stem * 2^(i-1).
    std::vector<std::size_t> channels() const
    {
        std::vector<std::size_t> c;
        for (std::size_t i = 0; i < stages; ++i)
            c.push_back(stem_channels << i);
        return c;
    }

    HoMEStageConfig home_stage(std::size_t i) const
    {
        HoMEStageConfig h;
        h.stage = i + 1;
        h.group_size = group_sizes.at(i);
        h.experts = experts.at(i);
        h.experts2 = experts2.at(i);
        h.slots = slots;
        h.dim = stem_channels << i;
        h.ffn_ratio = ffn_ratio;
        h.rho = rho;
        return h;
    }

    BlockConfig block(std::size_t i) const
    {
        BlockConfig b;
        b.channels = stem_channels << i;
        b.layers = layers.at(i);
        b.norm = norm;
        b.state_dim = state_dim;
        b.expand = expand;
        b.scan_block = scan_block;
        b.home = home_stage(i);
        return b;
    }

    /// Total down-sampling factor per axis (stem plus T-1 downsamples).
    std::size_t reduction() const { return std::size_t{1} << stages; }

    void validate() const
    {
        auto need = [this](bool ok, const std::string& what) {
            if (!ok)
                throw ConfigError("network config '" + name + "': " + what);
        };
        need(stages >= 2, "needs at least 2 stages, got " + std::to_string(stages));
        need(stages <= 8, "at most 8 stages are supported");
        need(in_channels >= 1 && classes >= 2, "needs >= 1 input channel and >= 2 classes");
        need(stem_channels >= 1, "stem channels must be >= 1");
        for (const auto* v : {&layers, &experts, &experts2, &group_sizes})
            need(v->size() == stages, "per-stage lists must have " + std::to_string(stages) + " entries");
        for (std::size_t l : layers)
            need(l >= 1, "every stage needs at least one layer");
        std::vector<HoMEStageConfig> hs;
        for (std::size_t i = 0; i < stages; ++i)
            hs.push_back(home_stage(i));
        validate_schedule(hs);
    }

    /// Input must be (B, in_channels, D, H, W) with every extent divisible by 2^T.
    void validate_input(const Shape& s) const
    {
        if (s.size() != 5 || s[1] != in_channels)
            throw ShapeError("network input must be (B, " + std::to_string(in_channels) + ", D, H, W), got " +
                             to_string(s));
        const std::size_t r = reduction();
        for (std::size_t a = 2; a < 5; ++a)
            if (s[a] == 0 || s[a] % r != 0)
                throw ConfigError("input extents " + to_string(Shape(s.begin() + 2, s.end())) +
                                  " must be positive multiples of " + std::to_string(r) + " for " +
                                  std::to_string(stages) + " stages; pad the input volume");
    }
};

/// Desk-scale default.
inline NetworkConfig desk_preset() { return NetworkConfig{}; }

/// Production schedule (48-channel stem, 4 stages); used for shape and counting checks.
inline NetworkConfig full_preset()
{
    NetworkConfig c;
    c.name = "full";
    c.stem_channels = 48;
    c.layers = {2, 2, 2, 2};
    c.experts = {4, 8, 12, 16};
    c.experts2 = {8, 16, 24, 32};
    c.group_sizes = {2048, 1024, 512, 256};
    c.slots = 4;
    return c;
}

/// Two-stage miniature for gradient checks and quick tests.
inline NetworkConfig tiny_preset()
{
    NetworkConfig c;
    c.name = "tiny";
    c.classes = 2;
    c.stem_channels = 2;
    c.stages = 2;
    c.layers = {1, 1};
    c.experts = {1, 2};
    c.experts2 = {2, 4};
    c.group_sizes = {8, 4};
    c.slots = 1;
    c.state_dim = 2;
    return c;
}

inline NetworkConfig preset_by_name(const std::string& n)
{
    if (n == "desk")
        return desk_preset();
    if (n == "full")
        return full_preset();
    if (n == "tiny")
        return tiny_preset();
    throw ConfigError("unknown preset '" + n + "' (expected desk, full or tiny)");
}

template <typename T>
Conv3d<T> make_stem(const NetworkConfig& cfg, Rng& rng)
{
    return Conv3d<T>(cfg.in_channels, cfg.stem_channels, 2, 2, 0, rng);
}

/// Decoder refinement: two 3x3x3 convs, each followed by normalization and GELU.
template <typename T>
class UpBlock {
public:
    UpBlock() = default;
    UpBlock(std::size_t c_in, std::size_t c_out, NormKind norm, Rng& rng)
        : conv1(c_in, c_out, 3, 1, 1, rng), norm1(norm, c_out), conv2(c_out, c_out, 3, 1, 1, rng), norm2(norm, c_out)
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        auto h = gelu(norm1(conv1(x), 1));
        return gelu(norm2(conv2(h), 1));
    }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        conv1.collect(out, join_name(prefix, "conv1"));
        norm1.collect(out, join_name(prefix, "norm1"));
        conv2.collect(out, join_name(prefix, "conv2"));
        norm2.collect(out, join_name(prefix, "norm2"));
    }

    static std::size_t parameter_count(std::size_t c_in, std::size_t c_out, NormKind norm)
    {
        return Conv3d<T>::parameter_count(c_in, c_out, 3) + Conv3d<T>::parameter_count(c_out, c_out, 3) +
               2 * ChannelNorm<T>::parameter_count(norm, c_out);
    }

    Conv3d<T> conv1;
    ChannelNorm<T> norm1;
    Conv3d<T> conv2;
    ChannelNorm<T> norm2;
};

template <typename T>
class MambaHoMENet {
public:
    MambaHoMENet(const NetworkConfig& cfg, Rng& rng) : cfg_(cfg)
    {
        cfg.validate();
        const auto ch = cfg.channels();
        const std::size_t S = cfg.stages;
        stem = make_stem<T>(cfg, rng);
        for (std::size_t i = 0; i < S; ++i) {
            blocks.emplace_back(cfg.block(i), rng);
            if (i + 1 < S)
                downs.emplace_back(ch[i], ch[i + 1], 2, 2, 0, rng);
        }
        for (std::size_t t = 0; t + 1 < S; ++t) {
            ups.emplace_back(ch[t + 1], ch[t], 2, 2, rng);
            up_blocks.emplace_back(2 * ch[t], ch[t], cfg.decoder_norm, rng);
        }
        head_up = ConvTranspose3d<T>(ch[0], ch[0], 2, 2, rng);
        head_out = Conv3d<T>(ch[0], cfg.classes, 1, 1, 0, rng);
    }

    const NetworkConfig& config() const { return cfg_; }

    /// Per-stage block outputs F_1..F_T (before downsampling).
    std::vector<Tensor<T>> encode(const Tensor<T>& x) const
    {
        cfg_.validate_input(x.shape());
        std::vector<Tensor<T>> feats;
        Tensor<T> h = stem(x);
        for (std::size_t i = 0; i < cfg_.stages; ++i) {
            feats.push_back(blocks[i](h));
            if (i + 1 < cfg_.stages)
                h = downs[i](feats.back());
        }
        return feats;
    }

    Tensor<T> decode(const std::vector<Tensor<T>>& feats) const
    {
        if (feats.size() != cfg_.stages)
            throw ShapeError("decoder expects " + std::to_string(cfg_.stages) + " features, got " +
                             std::to_string(feats.size()));
        Tensor<T> d = feats.back();
        for (std::size_t t = cfg_.stages - 1; t-- > 0;) {
            auto up = ups[t](d);
            if (up.shape() != feats[t].shape())
                throw ShapeError("skip " + std::to_string(t + 1) + " has shape " + to_string(feats[t].shape()) +
                                 " but the upsampled path has " + to_string(up.shape()) +
                                 " (encoder/decoder config drift)");
            d = up_blocks[t](concat<T>({feats[t], up}, 1));
        }
        return head_out(gelu(head_up(d)));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return decode(encode(x)); }

    void collect(ParamList<T>& out, const std::string& prefix = "") const
    {
        stem.collect(out, join_name(prefix, "stem"));
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string s = "stage" + std::to_string(i + 1);
            blocks[i].collect(out, join_name(prefix, s + ".block"));
            if (i < downs.size())
                downs[i].collect(out, join_name(prefix, s + ".down"));
        }
        for (std::size_t t = 0; t < ups.size(); ++t) {
            const std::string s = "decoder" + std::to_string(t + 1);
            ups[t].collect(out, join_name(prefix, s + ".up"));
            up_blocks[t].collect(out, join_name(prefix, s + ".refine"));
        }
        head_up.collect(out, join_name(prefix, "head.up"));
        head_out.collect(out, join_name(prefix, "head.out"));
    }

    ParamList<T> parameters() const
    {
        ParamList<T> ps;
        collect(ps);
        return ps;
    }

    /// Closed-form parameter total for a config (no allocation).
    static std::size_t parameter_count(const NetworkConfig& cfg)
    {
        cfg.validate();
        const auto ch = cfg.channels();
        std::size_t n = Conv3d<T>::parameter_count(cfg.in_channels, cfg.stem_channels, 2);
        for (std::size_t i = 0; i < cfg.stages; ++i) {
            n += MambaHoMEBlock<T>::parameter_count(cfg.block(i));
            if (i + 1 < cfg.stages)
                n += Conv3d<T>::parameter_count(ch[i], ch[i + 1], 2);
        }
        for (std::size_t t = 0; t + 1 < cfg.stages; ++t)
            n += ConvTranspose3d<T>::parameter_count(ch[t + 1], ch[t], 2) +
                 UpBlock<T>::parameter_count(2 * ch[t], ch[t], cfg.decoder_norm);
        n += ConvTranspose3d<T>::parameter_count(ch[0], ch[0], 2) +
             Conv3d<T>::parameter_count(ch[0], cfg.classes, 1);
        return n;
    }

    Conv3d<T> stem;
    std::vector<MambaHoMEBlock<T>> blocks;
    std::vector<Conv3d<T>> downs;
    std::vector<ConvTranspose3d<T>> ups;
    std::vector<UpBlock<T>> up_blocks;
    ConvTranspose3d<T> head_up;
    Conv3d<T> head_out;

private:
    NetworkConfig cfg_;
};

} // namespace mhome
