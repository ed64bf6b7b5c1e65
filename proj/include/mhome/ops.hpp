// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. All reductions run sequentially in index order so
// results are reproducible bit for bit; parallel loops only split work across
// independent output elements.

#pragma once

#include <cmath>
#include <type_traits>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "parallel.hpp"
#include "tensor.hpp"

namespace mhome {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b)
{
    if (a != b)
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF dfdx)
{
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i)
        out[i] = f(xv[i]);
    auto xn = x.impl();
    return make_result<T>(op, x.shape(), std::move(out), {xn},
                          [xn, dfdx](const std::vector<T>& g) {
                              auto& gx = xn->grad_buffer();
                              const auto& v = xn->value;
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  gx[i] += g[i] * dfdx(v[i]);
                          });
}

template <typename T>
T stable_softplus(T v)
{
    return v > T(20) ? v : std::log1p(std::exp(v));
}

template <typename T>
T sigmoid_scalar(T v)
{
    if (v >= T(0))
        return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape("add", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] + b[i];
    auto an = a.impl(), bn = b.impl();
    return detail::make_result<T>("add", a.shape(), std::move(out), {an, bn}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] += g[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape("sub", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] - b[i];
    auto an = a.impl(), bn = b.impl();
    return detail::make_result<T>("sub", a.shape(), std::move(out), {an, bn}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape("mul", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] * b[i];
    auto an = a.impl(), bn = b.impl();
    return detail::make_result<T>("mul", a.shape(), std::move(out), {an, bn}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] += g[i] * an->value[i];
        }
    });
}

/// Elementwise a / b; a zero divisor is reported as a non-finite result.
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_same_shape("div", a.shape(), b.shape());
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = a[i] / b[i];
    auto an = a.impl(), bn = b.impl();
    return detail::make_result<T>("div", a.shape(), std::move(out), {an, bn}, [an, bn](const std::vector<T>& g) {
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] -= g[i] * an->value[i] / (bn->value[i] * bn->value[i]);
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s)
{
    return detail::unary<T>("scale", x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s)
{
    return detail::unary<T>("add_scalar", x, [s](T v) { return v + s; }, [](T) { return T(1); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x)
{
    return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                            [](T v) {
                                const T t = std::tanh(v);
                                return T(1) - t * t;
                            });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x)
{
    return detail::unary<T>("sigmoid", x, [](T v) { return detail::sigmoid_scalar(v); },
                            [](T v) {
                                const T s = detail::sigmoid_scalar(v);
                                return s * (T(1) - s);
                            });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x)
{
    return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x)
{
    return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v) { return T(1) / v; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x)
{
    return detail::unary<T>("softplus", x, [](T v) { return detail::stable_softplus(v); },
                            [](T v) { return detail::sigmoid_scalar(v); });
}

/// Tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x)
{
    constexpr T c = T(0.7978845608028654); // sqrt(2/pi)
    constexpr T k = T(0.044715);
    return detail::unary<T>(
        "gelu", x,
        [](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); },
        [](T v) {
            const T u = c * (v + k * v * v * v);
            const T t = std::tanh(u);
            const T du = c * (T(1) + T(3) * k * v * v);
            return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x)
{
    T s = T(0);
    for (T v : x.data())
        s += v;
    auto xn = x.impl();
    return detail::make_result<T>("sum", Shape{}, {s}, {xn}, [xn](const std::vector<T>& g) {
        auto& gx = xn->grad_buffer();
        for (auto& v : gx)
            v += g[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x)
{
    if (x.numel() == 0)
        throw EmptyReductionError("mean of an empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis)
{
    const auto v = axis_view(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> out(v.outer * v.inner, T(0));
    const auto& xv = x.values();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < v.len; ++l)
            for (std::size_t r = 0; r < v.inner; ++r)
                out[o * v.inner + r] += xv[(o * v.len + l) * v.inner + r];
    auto xn = x.impl();
    return detail::make_result<T>("reduce_sum", std::move(out_shape), std::move(out), {xn},
                                  [xn, v](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t o = 0; o < v.outer; ++o)
                                          for (std::size_t l = 0; l < v.len; ++l)
                                              for (std::size_t r = 0; r < v.inner; ++r)
                                                  gx[(o * v.len + l) * v.inner + r] += g[o * v.inner + r];
                                  });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis)
{
    const auto v = axis_view(x.shape(), axis);
    if (v.len == 0)
        throw EmptyReductionError("reduce_mean over zero-length axis " + std::to_string(axis) + " of " +
                                  to_string(x.shape()));
    return scale(reduce_sum(x, axis), T(1) / static_cast<T>(v.len));
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape)
{
    if (numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    auto xn = x.impl();
    return detail::make_result<T>("reshape", std::move(shape), x.values(), {xn}, [xn](const std::vector<T>& g) {
        auto& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] += g[i];
    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm)
{
    const auto& in = x.shape();
    const std::size_t r = in.size();
    if (perm.size() != r)
        throw ShapeError("permute: permutation rank " + std::to_string(perm.size()) + " vs tensor " + to_string(in));
    std::vector<bool> used(r, false);
    for (auto p : perm) {
        if (p >= r || used[p])
            throw ShapeError("permute: invalid permutation for " + to_string(in));
        used[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i)
        out_shape[i] = in[perm[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;)
        in_stride[i - 1] = in_stride[i] * in[i];
    // Source offset for every destination element.
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i)
            off += idx[i] * in_stride[perm[i]];
        src[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i])
                break;
            idx[i] = 0;
        }
    }
    std::vector<T> out(n);
    const auto& xv = x.values();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = xv[src[i]];
    auto xn = x.impl();
    return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {xn},
                                  [xn, src = std::move(src)](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          gx[src[i]] += g[i];
                                  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::size_t a, std::size_t b)
{
    std::vector<std::size_t> perm(x.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (a >= perm.size() || b >= perm.size())
        throw ShapeError("transpose: axis out of range for " + to_string(x.shape()));
    std::swap(perm[a], perm[b]);
    return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis)
{
    if (parts.empty())
        throw ContractError("concat of zero tensors");
    Shape out_shape = parts[0].shape();
    if (axis >= out_shape.size())
        throw ShapeError("concat: axis out of range for " + to_string(out_shape));
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size())
            throw ShapeError("concat: rank mismatch " + to_string(parts[0].shape()) + " vs " + to_string(s));
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != parts[0].shape()[i])
                throw ShapeError("concat: shape mismatch " + to_string(parts[0].shape()) + " vs " + to_string(s));
        out_shape[axis] += s[axis];
    }
    const auto ov = axis_view(out_shape, axis);
    std::vector<T> out(numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const auto pv = axis_view(p.shape(), axis);
        const auto& v = p.values();
        for (std::size_t o = 0; o < pv.outer; ++o)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * pv.len * pv.inner), pv.len * pv.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * ov.len + off) * ov.inner));
        off += pv.len;
    }
    std::vector<std::shared_ptr<detail::Node<T>>> nodes;
    for (const auto& p : parts)
        nodes.push_back(p.impl());
    return detail::make_result<T>("concat", out_shape, std::move(out), nodes,
                                  [nodes, offsets, ov, axis](const std::vector<T>& g) {
                                      for (std::size_t k = 0; k < nodes.size(); ++k) {
                                          if (!nodes[k]->requires_grad)
                                              continue;
                                          const auto pv = axis_view(nodes[k]->shape, axis);
                                          auto& gp = nodes[k]->grad_buffer();
                                          for (std::size_t o = 0; o < pv.outer; ++o)
                                              for (std::size_t j = 0; j < pv.len * pv.inner; ++j)
                                                  gp[o * pv.len * pv.inner + j] +=
                                                      g[(o * ov.len + offsets[k]) * ov.inner + j];
                                      }
                                  });
}

/// Contiguous range [start, start+len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len)
{
    const auto v = axis_view(x.shape(), axis);
    if (start + len > v.len)
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds axis " + std::to_string(axis) + " of " + to_string(x.shape()));
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    std::vector<T> out(v.outer * len * v.inner);
    const auto& xv = x.values();
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.len + start) * v.inner), len * v.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * len * v.inner));
    auto xn = x.impl();
    return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {xn},
                                  [xn, v, start, len](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t o = 0; o < v.outer; ++o)
                                          for (std::size_t j = 0; j < len * v.inner; ++j)
                                              gx[(o * v.len + start) * v.inner + j] += g[o * len * v.inner + j];
                                  });
}

/// Zero padding along one axis.
template <typename T>
Tensor<T> pad_zeros(const Tensor<T>& x, std::size_t axis, std::size_t before, std::size_t after)
{
    const auto v = axis_view(x.shape(), axis);
    Shape out_shape = x.shape();
    const std::size_t out_len = v.len + before + after;
    out_shape[axis] = out_len;
    std::vector<T> out(v.outer * out_len * v.inner, T(0));
    const auto& xv = x.values();
    for (std::size_t o = 0; o < v.outer; ++o)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(o * v.len * v.inner), v.len * v.inner,
                    out.begin() + static_cast<std::ptrdiff_t>((o * out_len + before) * v.inner));
    auto xn = x.impl();
    return detail::make_result<T>("pad_zeros", std::move(out_shape), std::move(out), {xn},
                                  [xn, v, before, out_len](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t o = 0; o < v.outer; ++o)
                                          for (std::size_t j = 0; j < v.len * v.inner; ++j)
                                              gx[o * v.len * v.inner + j] += g[(o * out_len + before) * v.inner + j];
                                  });
}

/// take_along_axis: `index` has the shape of x with `axis` collapsed to 1 and
/// selects one entry per lane.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& index)
{
    const auto v = axis_view(x.shape(), axis);
    if (index.size() != v.outer * v.inner)
        throw ShapeError("gather: index count " + std::to_string(index.size()) + " does not match lanes of " +
                         to_string(x.shape()));
    Shape out_shape = x.shape();
    out_shape[axis] = 1;
    std::vector<std::size_t> src(index.size());
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
            const auto k = index[o * v.inner + r];
            if (k >= v.len)
                throw ShapeError("gather: index " + std::to_string(k) + " out of range for axis length " +
                                 std::to_string(v.len));
            src[o * v.inner + r] = (o * v.len + k) * v.inner + r;
        }
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i)
        out[i] = x[src[i]];
    auto xn = x.impl();
    return detail::make_result<T>("gather", std::move(out_shape), std::move(out), {xn},
                                  [xn, src = std::move(src)](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          gx[src[i]] += g[i];
                                  });
}

// ---------------------------------------------------------------------------
// Products

/// Batched matrix product a[..., m, k] * b[..., k, n]. Either operand may drop
/// its batch dimensions, in which case it is shared across the other's batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    const auto& as = a.shape();
    const auto& bs = b.shape();
    auto fail = [&] {
        throw ShapeError("matmul: incompatible shapes " + to_string(as) + " and " + to_string(bs));
    };
    if (as.size() < 2 || bs.size() < 2)
        fail();
    const std::size_t m = as[as.size() - 2], k = as.back(), n = bs.back();
    if (bs[bs.size() - 2] != k)
        fail();
    const Shape abatch(as.begin(), as.end() - 2);
    const Shape bbatch(bs.begin(), bs.end() - 2);
    Shape batch;
    if (abatch == bbatch || bbatch.empty())
        batch = abatch;
    else if (abatch.empty())
        batch = bbatch;
    else
        fail();
    const std::size_t nb = numel(batch);
    const bool a_shared = abatch.empty() && !batch.empty();
    const bool b_shared = bbatch.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(nb * m * n, T(0));
    const T* av = a.values().data();
    const T* bv = b.values().data();
    parallel_for(
        nb * m,
        [&](std::size_t row) {
            const std::size_t bi = row / m, i = row % m;
            const T* arow = av + (a_shared ? 0 : bi * m * k) + i * k;
            const T* bmat = bv + (b_shared ? 0 : bi * k * n);
            T* crow = out.data() + row * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T s = arow[p];
                const T* brow = bmat + p * n;
                for (std::size_t j = 0; j < n; ++j)
                    crow[j] += s * brow[j];
            }
        },
        k * n);

    auto an = a.impl(), bn = b.impl();
    return detail::make_result<T>(
        "matmul", std::move(out_shape), std::move(out), {an, bn},
        [an, bn, nb, m, k, n, a_shared, b_shared](const std::vector<T>& g) {
            const T* av = an->value.data();
            const T* bv = bn->value.data();
            if (an->requires_grad) {
                T* ga = an->grad_buffer().data();
                // dA[i,p] = sum_j g[i,j] * B[p,j]
                const std::size_t rows = a_shared ? m : nb * m;
                parallel_for(
                    rows,
                    [&](std::size_t row) {
                        for (std::size_t bi = 0; bi < (a_shared ? nb : 1); ++bi) {
                            const std::size_t batch_i = a_shared ? bi : row / m;
                            const std::size_t i = a_shared ? row : row % m;
                            const T* grow = g.data() + (batch_i * m + i) * n;
                            const T* bmat = bv + (b_shared ? 0 : batch_i * k * n);
                            T* garow = ga + row * k;
                            for (std::size_t p = 0; p < k; ++p) {
                                const T* brow = bmat + p * n;
                                T s = T(0);
                                for (std::size_t j = 0; j < n; ++j)
                                    s += grow[j] * brow[j];
                                garow[p] += s;
                            }
                        }
                    },
                    k * n);
            }
            if (bn->requires_grad) {
                T* gb = bn->grad_buffer().data();
                // dB[p,j] = sum_i A[i,p] * g[i,j]
                const std::size_t rows = b_shared ? k : nb * k;
                parallel_for(
                    rows,
                    [&](std::size_t row) {
                        for (std::size_t bi = 0; bi < (b_shared ? nb : 1); ++bi) {
                            const std::size_t batch_i = b_shared ? bi : row / k;
                            const std::size_t p = b_shared ? row : row % k;
                            const T* amat = av + (a_shared ? 0 : batch_i * m * k);
                            const T* gmat = g.data() + batch_i * m * n;
                            T* gbrow = gb + row * n;
                            for (std::size_t i = 0; i < m; ++i) {
                                const T s = amat[i * k + p];
                                const T* grow = gmat + i * n;
                                for (std::size_t j = 0; j < n; ++j)
                                    gbrow[j] += s * grow[j];
                            }
                        }
                    },
                    m * n);
            }
        });
}

/// x[..., d_in] * W[d_in, d_out] + bias[d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    const auto& xs = x.shape();
    if (weight.rank() != 2 || bias.rank() != 1 || bias.dim(0) != weight.dim(1))
        throw ShapeError("linear: weight " + to_string(weight.shape()) + " and bias " + to_string(bias.shape()) +
                         " are inconsistent");
    if (xs.empty() || xs.back() != weight.dim(0))
        throw ShapeError("linear: input " + to_string(xs) + " does not end in d_in=" + std::to_string(weight.dim(0)));
    const std::size_t din = weight.dim(0), dout = weight.dim(1);
    const std::size_t rows = x.numel() / din;
    Shape out_shape = xs;
    out_shape.back() = dout;
    std::vector<T> out(rows * dout);
    const T* xv = x.values().data();
    const T* wv = weight.values().data();
    const T* bv = bias.values().data();
    parallel_for(
        rows,
        [&](std::size_t r) {
            T* orow = out.data() + r * dout;
            std::copy_n(bv, dout, orow);
            const T* xrow = xv + r * din;
            for (std::size_t p = 0; p < din; ++p) {
                const T s = xrow[p];
                const T* wrow = wv + p * dout;
                for (std::size_t j = 0; j < dout; ++j)
                    orow[j] += s * wrow[j];
            }
        },
        din * dout);
    auto xn = x.impl(), wn = weight.impl(), bn = bias.impl();
    return detail::make_result<T>(
        "linear", std::move(out_shape), std::move(out), {xn, wn, bn},
        [xn, wn, bn, rows, din, dout](const std::vector<T>& g) {
            if (xn->requires_grad) {
                auto& gx = xn->grad_buffer();
                const T* wv = wn->value.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g.data() + r * dout;
                    for (std::size_t p = 0; p < din; ++p) {
                        const T* wrow = wv + p * dout;
                        T s = T(0);
                        for (std::size_t j = 0; j < dout; ++j)
                            s += grow[j] * wrow[j];
                        gx[r * din + p] += s;
                    }
                }
            }
            if (wn->requires_grad) {
                auto& gw = wn->grad_buffer();
                const T* xv = xn->value.data();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* grow = g.data() + r * dout;
                    for (std::size_t p = 0; p < din; ++p) {
                        const T s = xv[r * din + p];
                        T* gwrow = gw.data() + p * dout;
                        for (std::size_t j = 0; j < dout; ++j)
                            gwrow[j] += s * grow[j];
                    }
                }
            }
            if (bn->requires_grad) {
                auto& gb = bn->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < dout; ++j)
                        gb[j] += g[r * dout + j];
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax family

/// What softmax does with a slice whose entries are all -inf.
enum class DegenerateSlice {
    Throw, ///< raise DegenerateSliceError
    Zero,  ///< emit an all-zero slice (no gradient flows through it)
};

/// Softmax along `axis`, subtracting the slice maximum before exponentiation.
/// Entries equal to -inf map to exactly 0.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, DegenerateSlice policy = DegenerateSlice::Throw)
{
    const auto v = axis_view(x.shape(), axis);
    const auto& xv = x.values();
    std::vector<T> out(xv.size(), T(0));
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
            const std::size_t base = o * v.len * v.inner + r;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < v.len; ++l)
                mx = std::max(mx, xv[base + l * v.inner]);
            if (mx == -std::numeric_limits<T>::infinity()) {
                if (policy == DegenerateSlice::Throw)
                    throw DegenerateSliceError("softmax: slice of all -inf entries");
                continue;
            }
            T s = T(0);
            for (std::size_t l = 0; l < v.len; ++l) {
                const T e = std::exp(xv[base + l * v.inner] - mx);
                out[base + l * v.inner] = e;
                s += e;
            }
            for (std::size_t l = 0; l < v.len; ++l)
                out[base + l * v.inner] /= s;
        }
    auto xn = x.impl();
    auto result = detail::make_result<T>("softmax", x.shape(), std::move(out), {xn}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<detail::Node<T>> self = result.impl();
        result.impl()->backward = [xn, self, v](const std::vector<T>& g) {
            const auto& y = self.lock()->value;
            auto& gx = xn->grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t r = 0; r < v.inner; ++r) {
                    const std::size_t base = o * v.len * v.inner + r;
                    T dot = T(0);
                    for (std::size_t l = 0; l < v.len; ++l)
                        dot += g[base + l * v.inner] * y[base + l * v.inner];
                    for (std::size_t l = 0; l < v.len; ++l) {
                        const std::size_t i = base + l * v.inner;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
        };
    }
    return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis)
{
    const auto v = axis_view(x.shape(), axis);
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
            const std::size_t base = o * v.len * v.inner + r;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t l = 0; l < v.len; ++l)
                mx = std::max(mx, xv[base + l * v.inner]);
            if (mx == -std::numeric_limits<T>::infinity())
                throw DegenerateSliceError("log_softmax: slice of all -inf entries");
            T s = T(0);
            for (std::size_t l = 0; l < v.len; ++l)
                s += std::exp(xv[base + l * v.inner] - mx);
            const T lse = mx + std::log(s);
            for (std::size_t l = 0; l < v.len; ++l)
                out[base + l * v.inner] = xv[base + l * v.inner] - lse;
        }
    auto xn = x.impl();
    auto result = detail::make_result<T>("log_softmax", x.shape(), std::move(out), {xn}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<detail::Node<T>> self = result.impl();
        result.impl()->backward = [xn, self, v](const std::vector<T>& g) {
            const auto& y = self.lock()->value;
            auto& gx = xn->grad_buffer();
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t r = 0; r < v.inner; ++r) {
                    const std::size_t base = o * v.len * v.inner + r;
                    T gs = T(0);
                    for (std::size_t l = 0; l < v.len; ++l)
                        gs += g[base + l * v.inner];
                    for (std::size_t l = 0; l < v.len; ++l) {
                        const std::size_t i = base + l * v.inner;
                        gx[i] += g[i] - std::exp(y[i]) * gs;
                    }
                }
        };
    }
    return result;
}

/// Replaces whole rows (lanes of the last axis) with `fill` where row_valid is 0.
/// Masked rows receive no gradient.
template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& row_valid, T fill)
{
    if (x.rank() == 0)
        throw ShapeError("mask_rows on a scalar");
    const std::size_t width = x.shape().back();
    if (row_valid.size() * width != x.numel())
        throw ShapeError("mask_rows: " + std::to_string(row_valid.size()) + " row flags for " + to_string(x.shape()));
    std::vector<T> out = x.values();
    for (std::size_t r = 0; r < row_valid.size(); ++r)
        if (!row_valid[r])
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(r * width), width, fill);
    auto xn = x.impl();
    return detail::make_result<T>("mask_rows", x.shape(), std::move(out), {xn},
                                  [xn, row_valid, width](const std::vector<T>& g) {
                                      auto& gx = xn->grad_buffer();
                                      for (std::size_t r = 0; r < row_valid.size(); ++r)
                                          if (row_valid[r])
                                              for (std::size_t j = 0; j < width; ++j)
                                                  gx[r * width + j] += g[r * width + j];
                                  },
                                  !std::isfinite(fill));
}

/// Weighted sum of expert outputs: out[p, ...] = sum_e gates[p, e] * outputs[e][p, ...].
/// `gates` has shape prefix + (E); each output has shape prefix + trailing dims.
template <typename T>
Tensor<T> mix_experts(const Tensor<T>& gates, const std::vector<Tensor<T>>& outputs)
{
    if (gates.rank() == 0 || outputs.size() != gates.shape().back())
        throw ShapeError("mix_experts: gates " + to_string(gates.shape()) + " for " +
                         std::to_string(outputs.size()) + " expert outputs");
    const std::size_t experts = outputs.size();
    const std::size_t positions = gates.numel() / experts;
    const Shape out_shape = outputs[0].shape();
    const Shape prefix(gates.shape().begin(), gates.shape().end() - 1);
    if (out_shape.size() < prefix.size() || !std::equal(prefix.begin(), prefix.end(), out_shape.begin()))
        throw ShapeError("mix_experts: expert output " + to_string(out_shape) + " does not start with gate prefix " +
                         to_string(prefix));
    for (const auto& o : outputs)
        detail::require_same_shape("mix_experts", out_shape, o.shape());
    const std::size_t width = numel(out_shape) / positions;
    std::vector<T> out(numel(out_shape), T(0));
    const auto& gv = gates.values();
    for (std::size_t e = 0; e < experts; ++e) {
        const auto& ov = outputs[e].values();
        for (std::size_t p = 0; p < positions; ++p) {
            const T w = gv[p * experts + e];
            for (std::size_t j = 0; j < width; ++j)
                out[p * width + j] += w * ov[p * width + j];
        }
    }
    std::vector<std::shared_ptr<detail::Node<T>>> nodes{gates.impl()};
    for (const auto& o : outputs)
        nodes.push_back(o.impl());
    return detail::make_result<T>("mix_experts", out_shape, std::move(out), nodes,
                                  [nodes, experts, positions, width](const std::vector<T>& g) {
                                      const auto& gn = nodes[0];
                                      for (std::size_t e = 0; e < experts; ++e) {
                                          const auto& on = nodes[e + 1];
                                          if (gn->requires_grad) {
                                              auto& gg = gn->grad_buffer();
                                              for (std::size_t p = 0; p < positions; ++p) {
                                                  T s = T(0);
                                                  for (std::size_t j = 0; j < width; ++j)
                                                      s += g[p * width + j] * on->value[p * width + j];
                                                  gg[p * experts + e] += s;
                                              }
                                          }
                                          if (on->requires_grad) {
                                              auto& go = on->grad_buffer();
                                              for (std::size_t p = 0; p < positions; ++p) {
                                                  const T w = gn->value[p * experts + e];
                                                  for (std::size_t j = 0; j < width; ++j)
                                                      go[p * width + j] += w * g[p * width + j];
                                              }
                                          }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Channel-wise normalizations. `axis` names the channel dimension; the
// per-channel parameters have length shape[axis].

namespace detail {

/// Clamped odd rational approximation of tanh for f32, max abs error about
/// 4e-7 on the real line. It vectorizes where libm tanhf does not.
inline float rational_tanh(float x)
{
    const float c = 7.90531110763549805f;
    x = std::clamp(x, -c, c);
    const float x2 = x * x;
    float p = -2.76076847742355e-16f;
    p = p * x2 + 2.00018790482477e-13f;
    p = p * x2 - 8.60467152213735e-11f;
    p = p * x2 + 5.12229709037114e-08f;
    p = p * x2 + 1.48572235717979e-05f;
    p = p * x2 + 6.37261928875436e-04f;
    p = p * x2 + 4.89352455891786e-03f;
    float q = 1.19825839466702e-06f;
    q = q * x2 + 1.18534705686654e-04f;
    q = q * x2 + 2.26843463243900e-03f;
    q = q * x2 + 4.89352518554385e-03f;
    return p * x / q;
}

/// tanh used by dyt: the rational form for f32, libm otherwise.
template <typename T>
T dyt_tanh(T v)
{
    if constexpr (std::is_same_v<T, float>)
        return rational_tanh(v);
    else
        return std::tanh(v);
}

} // namespace detail

/// w * tanh(alpha * x) + b with per-channel w, b and a scalar alpha.
template <typename T>
Tensor<T> dyt(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& alpha, std::size_t axis)
{
    const auto v = axis_view(x.shape(), axis);
    if (w.numel() != v.len || b.numel() != v.len || alpha.numel() != 1)
        throw ShapeError("dyt: parameters w" + to_string(w.shape()) + " b" + to_string(b.shape()) +
                         " do not match channel extent " + std::to_string(v.len) + " of " + to_string(x.shape()));
    const T a = alpha[0];
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    if (v.inner == 1) { // channels last: keep the contiguous channel loop innermost
        const T* wp = w.values().data();
        const T* bp = b.values().data();
        for (std::size_t o = 0; o < v.outer; ++o) {
            const T* xr = xv.data() + o * v.len;
            T* yr = out.data() + o * v.len;
            for (std::size_t c = 0; c < v.len; ++c)
                yr[c] = wp[c] * detail::dyt_tanh(a * xr[c]) + bp[c];
        }
    } else {
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t c = 0; c < v.len; ++c) {
                const T wc = w[c], bc = b[c];
                const std::size_t base = (o * v.len + c) * v.inner;
                for (std::size_t r = 0; r < v.inner; ++r)
                    out[base + r] = wc * detail::dyt_tanh(a * xv[base + r]) + bc;
            }
    }
    auto xn = x.impl(), wn = w.impl(), bn = b.impl(), an = alpha.impl();
    return detail::make_result<T>(
        "dyt", x.shape(), std::move(out), {xn, wn, bn, an}, [xn, wn, bn, an, v](const std::vector<T>& g) {
            const T a = an->value[0];
            T galpha = T(0);
            std::vector<T>* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
            std::vector<T>* gw = wn->requires_grad ? &wn->grad_buffer() : nullptr;
            std::vector<T>* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t c = 0; c < v.len; ++c) {
                    const T wc = wn->value[c];
                    const std::size_t base = (o * v.len + c) * v.inner;
                    for (std::size_t r = 0; r < v.inner; ++r) {
                        const T xi = xn->value[base + r];
                        const T t = detail::dyt_tanh(a * xi);
                        const T gi = g[base + r];
                        const T dt = gi * wc * (T(1) - t * t);
                        if (gx)
                            (*gx)[base + r] += dt * a;
                        if (gw)
                            (*gw)[c] += gi * t;
                        if (gb)
                            (*gb)[c] += gi;
                        galpha += dt * xi;
                    }
                }
            if (an->requires_grad)
                an->grad_buffer()[0] += galpha;
        });
}

/// Standardize across the channel axis, then gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t axis,
                     T eps = T(1e-5))
{
    const auto v = axis_view(x.shape(), axis);
    if (v.len == 0)
        throw EmptyReductionError("layer_norm over an empty channel axis");
    if (gamma.numel() != v.len || beta.numel() != v.len)
        throw ShapeError("layer_norm: parameters do not match channel extent " + std::to_string(v.len));
    const auto& xv = x.values();
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> inv_std(v.outer * v.inner);
    const T inv_len = T(1) / static_cast<T>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t r = 0; r < v.inner; ++r) {
            const std::size_t base = o * v.len * v.inner + r;
            T mu = T(0);
            for (std::size_t c = 0; c < v.len; ++c)
                mu += xv[base + c * v.inner];
            mu *= inv_len;
            T var = T(0);
            for (std::size_t c = 0; c < v.len; ++c) {
                const T d = xv[base + c * v.inner] - mu;
                var += d * d;
            }
            var *= inv_len;
            const T is = T(1) / std::sqrt(var + eps);
            inv_std[o * v.inner + r] = is;
            for (std::size_t c = 0; c < v.len; ++c) {
                const std::size_t i = base + c * v.inner;
                xhat[i] = (xv[i] - mu) * is;
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    auto xn = x.impl(), gn = gamma.impl(), bn = beta.impl();
    return detail::make_result<T>(
        "layer_norm", x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, v, xhat = std::move(xhat), inv_std = std::move(inv_std)](const std::vector<T>& g) {
            const T inv_len = T(1) / static_cast<T>(v.len);
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t r = 0; r < v.inner; ++r) {
                    const std::size_t base = o * v.len * v.inner + r;
                    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                    for (std::size_t c = 0; c < v.len; ++c) {
                        const std::size_t i = base + c * v.inner;
                        const T dxh = g[i] * gn->value[c];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[i];
                        if (gn->requires_grad)
                            gn->grad_buffer()[c] += g[i] * xhat[i];
                        if (bn->requires_grad)
                            bn->grad_buffer()[c] += g[i];
                    }
                    if (xn->requires_grad) {
                        auto& gx = xn->grad_buffer();
                        const T is = inv_std[o * v.inner + r];
                        for (std::size_t c = 0; c < v.len; ++c) {
                            const std::size_t i = base + c * v.inner;
                            const T dxh = g[i] * gn->value[c];
                            gx[i] += is * (dxh - inv_len * sum_dxhat - xhat[i] * inv_len * sum_dxhat_xhat);
                        }
                    }
                }
        });
}

} // namespace mhome
