// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "ops.hpp"

namespace mhome {

struct Extent3 {
    std::size_t d = 0, h = 0, w = 0;
    std::size_t volume() const { return d * h * w; }
    bool operator==(const Extent3&) const = default;
};

namespace detail {

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad)
{
    if (in + 2 * pad < k)
        throw ShapeError("conv3d: kernel " + std::to_string(k) + " larger than padded input extent " +
                         std::to_string(in + 2 * pad));
    return (in + 2 * pad - k) / stride + 1;
}

// Output positions o in [lo, hi) for which o*stride - pad + koff lands inside [0, in).
inline void valid_range(std::size_t in, std::size_t out, std::size_t stride, std::size_t pad, std::size_t koff,
                        std::size_t& lo, std::size_t& hi)
{
    const long long p = static_cast<long long>(pad) - static_cast<long long>(koff);
    const long long s = static_cast<long long>(stride);
    long long l = p > 0 ? (p + s - 1) / s : 0;
    long long h = (static_cast<long long>(in) - 1 + p) / s + 1;
    if (static_cast<long long>(in) - 1 + p < 0)
        h = 0;
    h = std::min<long long>(h, static_cast<long long>(out));
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(std::max(l, h));
}

} // namespace detail

/// 3D cross-correlation. x: (B, Ci, D, H, W); weight: (Co, Ci, k, k, k); bias: (Co).
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0)
{
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 5 || ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || xs[1] != ws[1] ||
        bias.numel() != ws[0] || stride == 0)
        throw ShapeError("conv3d: input " + to_string(xs) + ", weight " + to_string(ws) + ", bias " +
                         to_string(bias.shape()) + " are inconsistent");
    const std::size_t B = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const std::size_t Co = ws[0], k = ws[2];
    const std::size_t Do = detail::conv_out_extent(D, k, stride, padding);
    const std::size_t Ho = detail::conv_out_extent(H, k, stride, padding);
    const std::size_t Wo = detail::conv_out_extent(W, k, stride, padding);
    const std::size_t in_plane = D * H * W, out_plane = Do * Ho * Wo, kvol = k * k * k;

    // Precomputed valid output ranges per kernel offset and axis.
    struct Ranges {
        std::vector<std::size_t> dlo, dhi, hlo, hhi, wlo, whi;
    };
    auto ranges = std::make_shared<Ranges>();
    for (std::size_t o = 0; o < k; ++o) {
        std::size_t lo, hi;
        detail::valid_range(D, Do, stride, padding, o, lo, hi);
        ranges->dlo.push_back(lo), ranges->dhi.push_back(hi);
        detail::valid_range(H, Ho, stride, padding, o, lo, hi);
        ranges->hlo.push_back(lo), ranges->hhi.push_back(hi);
        detail::valid_range(W, Wo, stride, padding, o, lo, hi);
        ranges->wlo.push_back(lo), ranges->whi.push_back(hi);
    }

    // Visits every (output, input) pair of one kernel tap for one channel pair.
    auto for_tap = [=](std::size_t kd, std::size_t kh, std::size_t kw, auto&& body) {
        const auto& R = *ranges;
        for (std::size_t od = R.dlo[kd]; od < R.dhi[kd]; ++od) {
            const std::size_t id = od * stride + kd - padding;
            for (std::size_t oh = R.hlo[kh]; oh < R.hhi[kh]; ++oh) {
                const std::size_t ih = oh * stride + kh - padding;
                const std::size_t obase = (od * Ho + oh) * Wo;
                const std::size_t ibase = (id * H + ih) * W;
                for (std::size_t ow = R.wlo[kw]; ow < R.whi[kw]; ++ow)
                    body(obase + ow, ibase + ow * stride + kw - padding);
            }
        }
    };

    std::vector<T> out(B * Co * out_plane);
    const T* xv = x.values().data();
    const T* wv = weight.values().data();
    const T* bv = bias.values().data();
    parallel_for(
        B * Co,
        [&](std::size_t bc) {
            const std::size_t b = bc / Co, co = bc % Co;
            T* op = out.data() + bc * out_plane;
            std::fill_n(op, out_plane, bv[co]);
            for (std::size_t ci = 0; ci < Ci; ++ci) {
                const T* ip = xv + (b * Ci + ci) * in_plane;
                const T* wk = wv + (co * Ci + ci) * kvol;
                for (std::size_t kd = 0; kd < k; ++kd)
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const T wt = wk[(kd * k + kh) * k + kw];
                            for_tap(kd, kh, kw, [&](std::size_t oi, std::size_t ii) { op[oi] += wt * ip[ii]; });
                        }
            }
        },
        Ci * kvol * out_plane);

    auto xn = x.impl(), wn = weight.impl(), bn = bias.impl();
    return detail::make_result<T>(
        "conv3d", Shape{B, Co, Do, Ho, Wo}, std::move(out), {xn, wn, bn},
        [=](const std::vector<T>& g) {
            const T* xv = xn->value.data();
            const T* wv = wn->value.data();
            if (xn->requires_grad) {
                T* gx = xn->grad_buffer().data();
                parallel_for(
                    B * Ci,
                    [&](std::size_t bci) {
                        const std::size_t b = bci / Ci, ci = bci % Ci;
                        T* gp = gx + bci * in_plane;
                        for (std::size_t co = 0; co < Co; ++co) {
                            const T* gop = g.data() + (b * Co + co) * out_plane;
                            const T* wk = wv + (co * Ci + ci) * kvol;
                            for (std::size_t kd = 0; kd < k; ++kd)
                                for (std::size_t kh = 0; kh < k; ++kh)
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        const T wt = wk[(kd * k + kh) * k + kw];
                                        for_tap(kd, kh, kw,
                                                [&](std::size_t oi, std::size_t ii) { gp[ii] += wt * gop[oi]; });
                                    }
                        }
                    },
                    Co * kvol * out_plane);
            }
            if (wn->requires_grad) {
                T* gw = wn->grad_buffer().data();
                parallel_for(
                    Co * Ci,
                    [&](std::size_t cc) {
                        const std::size_t co = cc / Ci, ci = cc % Ci;
                        T* gk = gw + cc * kvol;
                        for (std::size_t b = 0; b < B; ++b) {
                            const T* gop = g.data() + (b * Co + co) * out_plane;
                            const T* ip = xv + (b * Ci + ci) * in_plane;
                            for (std::size_t kd = 0; kd < k; ++kd)
                                for (std::size_t kh = 0; kh < k; ++kh)
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        T s = T(0);
                                        for_tap(kd, kh, kw,
                                                [&](std::size_t oi, std::size_t ii) { s += gop[oi] * ip[ii]; });
                                        gk[(kd * k + kh) * k + kw] += s;
                                    }
                        }
                    },
                    B * kvol * out_plane);
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t co = 0; co < Co; ++co) {
                        const T* gop = g.data() + (b * Co + co) * out_plane;
                        T s = T(0);
                        for (std::size_t i = 0; i < out_plane; ++i)
                            s += gop[i];
                        gb[co] += s;
                    }
            }
        });
}

/// Transposed 3D convolution without padding: output extent (in-1)*stride + k.
/// x: (B, Ci, D, H, W); weight: (Ci, Co, k, k, k); bias: (Co).
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride)
{
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 5 || ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || xs[1] != ws[0] ||
        bias.numel() != ws[1] || stride == 0)
        throw ShapeError("conv_transpose3d: input " + to_string(xs) + ", weight " + to_string(ws) + ", bias " +
                         to_string(bias.shape()) + " are inconsistent");
    const std::size_t B = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
    const std::size_t Co = ws[1], k = ws[2];
    const std::size_t Do = (D - 1) * stride + k, Ho = (H - 1) * stride + k, Wo = (W - 1) * stride + k;
    const std::size_t in_plane = D * H * W, out_plane = Do * Ho * Wo, kvol = k * k * k;

    auto for_tap = [=](std::size_t kd, std::size_t kh, std::size_t kw, auto&& body) {
        for (std::size_t id = 0; id < D; ++id)
            for (std::size_t ih = 0; ih < H; ++ih) {
                const std::size_t obase = ((id * stride + kd) * Ho + ih * stride + kh) * Wo + kw;
                const std::size_t ibase = (id * H + ih) * W;
                for (std::size_t iw = 0; iw < W; ++iw)
                    body(obase + iw * stride, ibase + iw);
            }
    };

    std::vector<T> out(B * Co * out_plane);
    const T* xv = x.values().data();
    const T* wv = weight.values().data();
    const T* bv = bias.values().data();
    parallel_for(
        B * Co,
        [&](std::size_t bc) {
            const std::size_t b = bc / Co, co = bc % Co;
            T* op = out.data() + bc * out_plane;
            std::fill_n(op, out_plane, bv[co]);
            for (std::size_t ci = 0; ci < Ci; ++ci) {
                const T* ip = xv + (b * Ci + ci) * in_plane;
                const T* wk = wv + (ci * Co + co) * kvol;
                for (std::size_t kd = 0; kd < k; ++kd)
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const T wt = wk[(kd * k + kh) * k + kw];
                            for_tap(kd, kh, kw, [&](std::size_t oi, std::size_t ii) { op[oi] += wt * ip[ii]; });
                        }
            }
        },
        Ci * kvol * in_plane);

    auto xn = x.impl(), wn = weight.impl(), bn = bias.impl();
    return detail::make_result<T>(
        "conv_transpose3d", Shape{B, Co, Do, Ho, Wo}, std::move(out), {xn, wn, bn},
        [=](const std::vector<T>& g) {
            const T* xv = xn->value.data();
            const T* wv = wn->value.data();
            if (xn->requires_grad) {
                T* gx = xn->grad_buffer().data();
                parallel_for(
                    B * Ci,
                    [&](std::size_t bci) {
                        const std::size_t b = bci / Ci, ci = bci % Ci;
                        T* gp = gx + bci * in_plane;
                        for (std::size_t co = 0; co < Co; ++co) {
                            const T* gop = g.data() + (b * Co + co) * out_plane;
                            const T* wk = wv + (ci * Co + co) * kvol;
                            for (std::size_t kd = 0; kd < k; ++kd)
                                for (std::size_t kh = 0; kh < k; ++kh)
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        const T wt = wk[(kd * k + kh) * k + kw];
                                        for_tap(kd, kh, kw,
                                                [&](std::size_t oi, std::size_t ii) { gp[ii] += wt * gop[oi]; });
                                    }
                        }
                    },
                    Co * kvol * in_plane);
            }
            if (wn->requires_grad) {
                T* gw = wn->grad_buffer().data();
                parallel_for(
                    Ci * Co,
                    [&](std::size_t cc) {
                        const std::size_t ci = cc / Co, co = cc % Co;
                        T* gk = gw + cc * kvol;
                        for (std::size_t b = 0; b < B; ++b) {
                            const T* gop = g.data() + (b * Co + co) * out_plane;
                            const T* ip = xv + (b * Ci + ci) * in_plane;
                            for (std::size_t kd = 0; kd < k; ++kd)
                                for (std::size_t kh = 0; kh < k; ++kh)
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        T s = T(0);
                                        for_tap(kd, kh, kw,
                                                [&](std::size_t oi, std::size_t ii) { s += gop[oi] * ip[ii]; });
                                        gk[(kd * k + kh) * k + kw] += s;
                                    }
                        }
                    },
                    B * kvol * in_plane);
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t co = 0; co < Co; ++co) {
                        const T* gop = g.data() + (b * Co + co) * out_plane;
                        T s = T(0);
                        for (std::size_t i = 0; i < out_plane; ++i)
                            s += gop[i];
                        gb[co] += s;
                    }
            }
        });
}

} // namespace mhome
