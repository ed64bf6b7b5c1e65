// SPDX-License-Identifier: Apache-2.0
//
// Per-step selective-scan recurrence on raw arrays:
//   h_t = abar_t * h_{t-1} + bbar_t * x_t,  y_t = <c_t, h_t> + D * x_t.

#pragma once

#include <cstddef>
#include <vector>

namespace oracle {

/// abar (B,N,C,n), bbar/c (B,N,n), x (B,N,C), dskip (C) -> y (B,N,C).
inline std::vector<double> scan_recurrence(const std::vector<double>& abar, const std::vector<double>& bbar,
                                           const std::vector<double>& c, const std::vector<double>& x,
                                           const std::vector<double>& dskip, std::size_t B, std::size_t N,
                                           std::size_t C, std::size_t n)
{
    std::vector<double> y(B * N * C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t ch = 0; ch < C; ++ch) {
            std::vector<double> h(n, 0.0);
            for (std::size_t t = 0; t < N; ++t) {
                const double xt = x[(b * N + t) * C + ch];
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    h[i] = abar[((b * N + t) * C + ch) * n + i] * h[i] + bbar[(b * N + t) * n + i] * xt;
                    acc += c[(b * N + t) * n + i] * h[i];
                }
                y[(b * N + t) * C + ch] = acc + dskip[ch] * xt;
            }
        }
    return y;
}

} // namespace oracle
