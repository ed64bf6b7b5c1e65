// SPDX-License-Identifier: Apache-2.0
//
// Diagonal selective state-space layer (single causal scan).
//
// Per batch element b and channel c the state h in R^n evolves as
//   h_t = abar_t (.) h_{t-1} + bbar_t * x_t,   h_{-1} = 0
//   y_t = <c_t, h_t> + D_c * x_t
// abar is per (position, channel, state); bbar and c are per (position, state)
// and shared across channels.

#pragma once

#include <cmath>
#include <vector>

#include "nn.hpp"

namespace mhome {

struct ScanOptions {
    /// Positions per chunk in the blocked evaluation.
    std::size_t block = 64;
};

/// abar = exp(-delta (x) rate): delta (B, N, C), rate (C, n) -> (B, N, C, n).
template <typename T>
Tensor<T> discretize(const Tensor<T>& delta, const Tensor<T>& rate)
{
    if (delta.rank() != 3 || rate.rank() != 2 || rate.dim(0) != delta.dim(2))
        throw ShapeError("discretize: delta " + to_string(delta.shape()) + " and rate " + to_string(rate.shape()) +
                         " are inconsistent");
    const std::size_t rows = delta.dim(0) * delta.dim(1), C = delta.dim(2), n = rate.dim(1);
    std::vector<T> out(rows * C * n);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) {
            const T dv = delta[r * C + c];
            for (std::size_t i = 0; i < n; ++i)
                out[(r * C + c) * n + i] = std::exp(-dv * rate[c * n + i]);
        }
    auto dn = delta.impl(), rn = rate.impl();
    auto result = detail::make_result<T>("discretize", Shape{delta.dim(0), delta.dim(1), C, n}, std::move(out),
                                         {dn, rn}, nullptr);
    if (result.requires_grad()) {
        std::weak_ptr<detail::Node<T>> self = result.impl();
        result.impl()->backward = [dn, rn, self, rows, C, n](const std::vector<T>& g) {
            const auto& a = self.lock()->value;
            std::vector<T>* gd = dn->requires_grad ? &dn->grad_buffer() : nullptr;
            std::vector<T>* gr = rn->requires_grad ? &rn->grad_buffer() : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < C; ++c) {
                    const T dv = dn->value[r * C + c];
                    T acc = T(0);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t k = (r * C + c) * n + i;
                        const T ga = g[k] * a[k];
                        acc -= ga * rn->value[c * n + i];
                        if (gr)
                            (*gr)[c * n + i] -= ga * dv;
                    }
                    if (gd)
                        (*gd)[r * C + c] += acc;
                }
        };
    }
    return result;
}

namespace detail {

struct ScanDims {
    std::size_t B, N, C, n;
};

inline ScanDims check_scan_shapes(const Shape& abar, const Shape& bbar, const Shape& c, const Shape& x,
                                  const Shape& d)
{
    if (x.size() != 3 || abar.size() != 4 || bbar.size() != 3 || c.size() != 3 || d.size() != 1)
        throw ShapeError("selective_scan: expected abar (B,N,C,n), bbar/c (B,N,n), x (B,N,C), D (C)");
    ScanDims s{x[0], x[1], x[2], abar[3]};
    if (abar != Shape{s.B, s.N, s.C, s.n} || bbar != Shape{s.B, s.N, s.n} || c != Shape{s.B, s.N, s.n} ||
        d[0] != s.C)
        throw ShapeError("selective_scan: inconsistent shapes abar" + to_string(abar) + " bbar" + to_string(bbar) +
                         " c" + to_string(c) + " x" + to_string(x) + " D" + to_string(d));
    if (s.N == 0)
        throw ShapeError("selective_scan: empty sequence");
    return s;
}

} // namespace detail

/// Blocked evaluation of the selective scan. Each chunk is scanned from a zero
/// state while tracking the running product of abar; chunk carries are then
/// propagated and folded back in. Equivalent to the per-step recurrence.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& abar, const Tensor<T>& bbar, const Tensor<T>& c, const Tensor<T>& x,
                         const Tensor<T>& dskip, ScanOptions opts = {})
{
    const auto s = detail::check_scan_shapes(abar.shape(), bbar.shape(), c.shape(), x.shape(), dskip.shape());
    const std::size_t B = s.B, N = s.N, C = s.C, n = s.n;
    const std::size_t L = std::max<std::size_t>(1, opts.block);
    const std::size_t chunks = (N + L - 1) / L;

    const T* av = abar.values().data();
    const T* bv = bbar.values().data();
    const T* cv = c.values().data();
    const T* xv = x.values().data();
    const T* dv = dskip.values().data();

    // h[((b*N + t)*C + ch)*n + i]
    auto states = std::make_shared<std::vector<T>>(B * N * C * n);
    std::vector<T> y(B * N * C);

    parallel_for(
        B * C,
        [&](std::size_t bc) {
            const std::size_t b = bc / C, ch = bc % C;
            auto at = [&](std::size_t t) { return ((b * N + t) * C + ch) * n; };
            std::vector<T> prod(N * n);
            std::vector<T> local(N * n);
            // Pass 1: independent chunk-local scans.
            for (std::size_t j = 0; j < chunks; ++j) {
                const std::size_t t0 = j * L, t1 = std::min(N, t0 + L);
                for (std::size_t t = t0; t < t1; ++t) {
                    const T* a = av + at(t);
                    const T* bb = bv + (b * N + t) * n;
                    const T xt = xv[(b * N + t) * C + ch];
                    for (std::size_t i = 0; i < n; ++i) {
                        const T prev_h = t == t0 ? T(0) : local[(t - 1) * n + i];
                        const T prev_p = t == t0 ? T(1) : prod[(t - 1) * n + i];
                        local[t * n + i] = a[i] * prev_h + bb[i] * xt;
                        prod[t * n + i] = a[i] * prev_p;
                    }
                }
            }
            // Pass 2 + 3: carry propagation and fold-in.
            std::vector<T> carry(n, T(0));
            for (std::size_t j = 0; j < chunks; ++j) {
                const std::size_t t0 = j * L, t1 = std::min(N, t0 + L);
                for (std::size_t t = t0; t < t1; ++t) {
                    T* h = states->data() + at(t);
                    const T* ct = cv + (b * N + t) * n;
                    T acc = T(0);
                    for (std::size_t i = 0; i < n; ++i) {
                        h[i] = local[t * n + i] + prod[t * n + i] * carry[i];
                        acc += ct[i] * h[i];
                    }
                    const T xt = xv[(b * N + t) * C + ch];
                    y[(b * N + t) * C + ch] = acc + dv[ch] * xt;
                }
                const T* hend = states->data() + at(t1 - 1);
                std::copy_n(hend, n, carry.begin());
            }
        },
        N * n * 4);

    auto an = abar.impl(), bn = bbar.impl(), cn = c.impl(), xn = x.impl(), dn = dskip.impl();
    return detail::make_result<T>(
        "selective_scan", x.shape(), std::move(y), {an, bn, cn, xn, dn},
        [an, bn, cn, xn, dn, states, B, N, C, n](const std::vector<T>& g) {
            const auto& h = *states;
            std::vector<T>* ga = an->requires_grad ? &an->grad_buffer() : nullptr;
            std::vector<T>* gb = bn->requires_grad ? &bn->grad_buffer() : nullptr;
            std::vector<T>* gc = cn->requires_grad ? &cn->grad_buffer() : nullptr;
            std::vector<T>* gx = xn->requires_grad ? &xn->grad_buffer() : nullptr;
            std::vector<T>* gd = dn->requires_grad ? &dn->grad_buffer() : nullptr;
            std::vector<T> r(n);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t ch = 0; ch < C; ++ch) {
                    std::fill(r.begin(), r.end(), T(0));
                    for (std::size_t t = N; t-- > 0;) {
                        const std::size_t hs = ((b * N + t) * C + ch) * n;
                        const std::size_t pos = (b * N + t);
                        const T gy = g[pos * C + ch];
                        const T xt = xn->value[pos * C + ch];
                        if (t + 1 < N) {
                            const T* anext = an->value.data() + ((b * N + t + 1) * C + ch) * n;
                            for (std::size_t i = 0; i < n; ++i)
                                r[i] *= anext[i];
                        }
                        const T* ct = cn->value.data() + pos * n;
                        for (std::size_t i = 0; i < n; ++i)
                            r[i] += ct[i] * gy;
                        T gxt = dn->value[ch] * gy;
                        const T* bt = bn->value.data() + pos * n;
                        for (std::size_t i = 0; i < n; ++i) {
                            if (ga)
                                (*ga)[hs + i] += r[i] * (t > 0 ? h[hs - C * n + i] : T(0));
                            if (gb)
                                (*gb)[pos * n + i] += r[i] * xt;
                            if (gc)
                                (*gc)[pos * n + i] += gy * h[hs + i];
                            gxt += r[i] * bt[i];
                        }
                        if (gx)
                            (*gx)[pos * C + ch] += gxt;
                        if (gd)
                            (*gd)[ch] += gy * xt;
                    }
                }
        });
}

struct SSMConfig {
    std::size_t d_model = 8;
    std::size_t state_dim = 8;
    std::size_t expand = 1;
    std::size_t block = 64;
};

/// Gated selective-scan layer over token sequences (B, N, d).
template <typename T>
class MambaLayer {
public:
    MambaLayer() = default;
    MambaLayer(const SSMConfig& cfg, Rng& rng) : cfg_(cfg)
    {
        const std::size_t d = cfg.d_model, di = cfg.expand * cfg.d_model, n = cfg.state_dim;
        in_proj = Linear<T>(d, 2 * di, rng);
        dt_proj = Linear<T>(di, di, rng);
        b_proj = Linear<T>(di, n, rng);
        c_proj = Linear<T>(di, n, rng);
        out_proj = Linear<T>(di, d, rng);
        // softplus(a[c, i]) = i + 1: a spread of decay rates per state.
        std::vector<T> a(di * n);
        for (std::size_t ch = 0; ch < di; ++ch)
            for (std::size_t i = 0; i < n; ++i)
                a[ch * n + i] = static_cast<T>(std::log(std::expm1(static_cast<double>(i + 1))));
        a_param = Tensor<T>({di, n}, std::move(a), true);
        d_skip = Tensor<T>::ones({di}, true);
    }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        if (x.rank() != 3 || x.dim(2) != cfg_.d_model)
            throw ShapeError("mamba_layer: expected (B, N, " + std::to_string(cfg_.d_model) + "), got " +
                             to_string(x.shape()));
        const std::size_t di = cfg_.expand * cfg_.d_model;
        auto xz = in_proj(x);
        auto u = slice(xz, 2, 0, di);
        auto z = slice(xz, 2, di, di);
        auto delta = softplus(dt_proj(u));
        auto abar = discretize(delta, softplus(a_param));
        auto y = selective_scan(abar, b_proj(u), c_proj(u), u, d_skip, ScanOptions{cfg_.block});
        return out_proj(mul(y, sigmoid(z)));
    }

    const SSMConfig& config() const { return cfg_; }

    void collect(ParamList<T>& out, const std::string& prefix) const
    {
        in_proj.collect(out, join_name(prefix, "in_proj"));
        dt_proj.collect(out, join_name(prefix, "dt_proj"));
        b_proj.collect(out, join_name(prefix, "b_proj"));
        c_proj.collect(out, join_name(prefix, "c_proj"));
        out.push_back({join_name(prefix, "a"), a_param});
        out.push_back({join_name(prefix, "d"), d_skip});
        out_proj.collect(out, join_name(prefix, "out_proj"));
    }

    static std::size_t parameter_count(const SSMConfig& cfg)
    {
        const std::size_t d = cfg.d_model, di = cfg.expand * cfg.d_model, n = cfg.state_dim;
        return Linear<T>::parameter_count(d, 2 * di) + Linear<T>::parameter_count(di, di) +
               2 * Linear<T>::parameter_count(di, n) + di * n + di + Linear<T>::parameter_count(di, d);
    }

    Linear<T> in_proj, dt_proj, b_proj, c_proj, out_proj;
    Tensor<T> a_param;
    Tensor<T> d_skip;

private:
    SSMConfig cfg_;
};

} // namespace mhome
