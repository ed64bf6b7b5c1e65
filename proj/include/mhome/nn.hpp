// SPDX-License-Identifier: Apache-2.0
//
// Parameterized building blocks. Every block registers its tensors under a
// dotted name via collect(), and exposes a closed-form parameter_count() used
// to cross-check the registry.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "conv.hpp"
#include "ops.hpp"
#include "random.hpp"

namespace mhome {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

inline std::string join_name(const std::string& prefix, const std::string& name)
{
    return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
Tensor<T> make_param(Shape shape, Rng& rng, double bound)
{
    auto t = Tensor<T>::zeros(std::move(shape), true);
    if (bound > 0.0) {
        rng.fill_uniform(t.mutable_data(), -bound, bound);
        t.refresh_finite();
    }
    return t;
}

template <typename T>
void zero_params(ParamList<T>& params)
{
    for (auto& p : params)
        std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), T(0));
}

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::size_t d_in, std::size_t d_out, Rng& rng)
        : weight(make_param<T>({d_in, d_out}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)))),
          bias(Tensor<T>::zeros({d_out}, true))
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        out.push_back({join_name(prefix, "weight"), weight});
        out.push_back({join_name(prefix, "bias"), bias});
    }

    static std::size_t parameter_count(std::size_t d_in, std::size_t d_out) { return d_in * d_out + d_out; }

    Tensor<T> weight;
    Tensor<T> bias;
};

/// Width-preserving two-layer feed-forward expert: d -> ratio*d -> d with GELU.
template <typename T>
class ExpertFFN {
public:
    ExpertFFN() = default;
    ExpertFFN(std::size_t d, std::size_t ratio, Rng& rng) : fc1(d, ratio * d, rng), fc2(ratio * d, d, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        fc1.collect(out, join_name(prefix, "fc1"));
        fc2.collect(out, join_name(prefix, "fc2"));
    }

    static std::size_t parameter_count(std::size_t d, std::size_t ratio)
    {
        return Linear<T>::parameter_count(d, ratio * d) + Linear<T>::parameter_count(ratio * d, d);
    }

    Linear<T> fc1;
    Linear<T> fc2;
};

/// Gating network: a single linear map to one logit per expert.
template <typename T>
class RouterMLP {
public:
    RouterMLP() = default;
    RouterMLP(std::size_t d, std::size_t experts, Rng& rng) : proj(d, experts, rng) {}

    Tensor<T> logits(const Tensor<T>& x) const { return proj(x); }
    std::size_t experts() const { return proj.out_features(); }

    void collect(ParamList<T>& out, const std::string& prefix) const { proj.collect(out, join_name(prefix, "proj")); }

    static std::size_t parameter_count(std::size_t d, std::size_t experts)
    {
        return Linear<T>::parameter_count(d, experts);
    }

    Linear<T> proj;
};

enum class NormKind { DyT, LayerNorm };

inline std::string to_string(NormKind k) { return k == NormKind::DyT ? "dyt" : "ln"; }

inline NormKind parse_norm_kind(const std::string& s)
{
    if (s == "dyt" || s == "DyT")
        return NormKind::DyT;
    if (s == "ln" || s == "LN" || s == "layernorm")
        return NormKind::LayerNorm;
    throw ConfigError("unknown normalization '" + s + "' (expected dyt or ln)");
}

/// Dynamic Tanh: w * tanh(alpha * x) + b.
template <typename T>
struct DyTParams {
    DyTParams() = default;
    explicit DyTParams(std::size_t channels, T alpha0 = T(0.5))
        : w(Tensor<T>::ones({channels}, true)), b(Tensor<T>::zeros({channels}, true)),
          alpha(Tensor<T>::scalar(alpha0, true))
    {
    }
    Tensor<T> w, b, alpha;
};

template <typename T>
Tensor<T> dyt_forward(const DyTParams<T>& p, const Tensor<T>& x, std::size_t axis)
{
    return dyt(x, p.w, p.b, p.alpha, axis);
}

/// Channel normalization selectable between DyT and LayerNorm (eps 1e-5).
template <typename T>
class ChannelNorm {
public:
    ChannelNorm() = default;
    ChannelNorm(NormKind kind, std::size_t channels) : kind_(kind)
    {
        if (kind == NormKind::DyT) {
            dyt_ = DyTParams<T>(channels);
        } else {
            gamma_ = Tensor<T>::ones({channels}, true);
            beta_ = Tensor<T>::zeros({channels}, true);
        }
    }

    Tensor<T> operator()(const Tensor<T>& x, std::size_t axis) const
    {
        return kind_ == NormKind::DyT ? dyt_forward(dyt_, x, axis) : layer_norm(x, gamma_, beta_, axis, T(1e-5));
    }

    NormKind kind() const { return kind_; }
    const DyTParams<T>& dyt_params() const { return dyt_; }
    DyTParams<T>& dyt_params() { return dyt_; }
    const Tensor<T>& gamma() const { return gamma_; }
    const Tensor<T>& beta() const { return beta_; }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        if (kind_ == NormKind::DyT) {
            out.push_back({join_name(prefix, "w"), dyt_.w});
            out.push_back({join_name(prefix, "b"), dyt_.b});
            out.push_back({join_name(prefix, "alpha"), dyt_.alpha});
        } else {
            out.push_back({join_name(prefix, "gamma"), gamma_});
            out.push_back({join_name(prefix, "beta"), beta_});
        }
    }

    static std::size_t parameter_count(NormKind kind, std::size_t channels)
    {
        return kind == NormKind::DyT ? 2 * channels + 1 : 2 * channels;
    }

private:
    NormKind kind_ = NormKind::DyT;
    DyTParams<T> dyt_;
    Tensor<T> gamma_, beta_;
};

template <typename T>
class Conv3d {
public:
    Conv3d() = default;
    Conv3d(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, std::size_t padding, Rng& rng)
        : weight(make_param<T>({c_out, c_in, kernel, kernel, kernel}, rng,
                               1.0 / std::sqrt(static_cast<double>(c_in * kernel * kernel * kernel)))),
          bias(Tensor<T>::zeros({c_out}, true)), stride_(stride), padding_(padding)
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv3d(x, weight, bias, stride_, padding_); }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        out.push_back({join_name(prefix, "weight"), weight});
        out.push_back({join_name(prefix, "bias"), bias});
    }

    static std::size_t parameter_count(std::size_t c_in, std::size_t c_out, std::size_t kernel)
    {
        return c_out * c_in * kernel * kernel * kernel + c_out;
    }

    Tensor<T> weight;
    Tensor<T> bias;

private:
    std::size_t stride_ = 1;
    std::size_t padding_ = 0;
};

template <typename T>
class ConvTranspose3d {
public:
    ConvTranspose3d() = default;
    ConvTranspose3d(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, Rng& rng)
        : weight(make_param<T>({c_in, c_out, kernel, kernel, kernel}, rng,
                               1.0 / std::sqrt(static_cast<double>(
                                         std::max<std::size_t>(1, c_in * kernel * kernel * kernel /
                                                                      (stride * stride * stride)))))),
          bias(Tensor<T>::zeros({c_out}, true)), stride_(stride)
    {
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv_transpose3d(x, weight, bias, stride_); }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        out.push_back({join_name(prefix, "weight"), weight});
        out.push_back({join_name(prefix, "bias"), bias});
    }

    static std::size_t parameter_count(std::size_t c_in, std::size_t c_out, std::size_t kernel)
    {
        return c_in * c_out * kernel * kernel * kernel + c_out;
    }

    Tensor<T> weight;
    Tensor<T> bias;

private:
    std::size_t stride_ = 2;
};

template <typename T>
std::size_t count_elements(const ParamList<T>& params)
{
    std::size_t n = 0;
    for (const auto& p : params)
        n += p.tensor.numel();
    return n;
}

} // namespace mhome
