// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences, forward passes only. Used as the independent
// reference for every analytic gradient in the unit and acceptance suites.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <mhome/tensor.hpp>

namespace oracle {

struct FdReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
};

/// Relative error with magnitudes floored at `floor`, so entries whose true
/// derivative is ~0 are compared on an absolute scale of floor * tol.
inline double rel_err(double analytic, double numeric, double floor = 1e-4)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the gradient already stored in each leaf against central
/// differences of `loss`. `loss` must rebuild the forward pass from the
/// current leaf values. `stride` > 1 samples every stride-th element.
inline FdReport check_leaves(const std::function<double()>& loss, std::vector<mhome::Tensor<double>> leaves,
                             double h = 1e-5, std::size_t stride = 1)
{
    FdReport rep;
    mhome::NoGradGuard no_grad;
    for (auto& leaf : leaves) {
        const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
        auto data = leaf.mutable_data();
        for (std::size_t i = 0; i < data.size(); i += stride) {
            const double saved = data[i];
            data[i] = saved + h;
            const double up = loss();
            data[i] = saved - h;
            const double down = loss();
            data[i] = saved;
            const double numeric = (up - down) / (2 * h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(a, numeric));
            ++rep.checked;
        }
    }
    return rep;
}

} // namespace oracle
