// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include <mhome/nn.hpp>
#include <mhome/ops.hpp>
#include <mhome/random.hpp>

#include "oracles/finite_difference.hpp"

namespace testing_util {

using Tensor = mhome::Tensor<double>;

inline Tensor random_tensor(mhome::Shape shape, mhome::Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true)
{
    auto t = Tensor::zeros(std::move(shape), requires_grad);
    rng.fill_uniform(t.mutable_data(), lo, hi);
    t.refresh_finite();
    return t;
}

/// Max relative error between backward() and central differences for
/// loss = sum(w * f(inputs)) with a fixed random projection w.
inline double op_grad_error(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                            std::vector<Tensor> inputs, std::uint64_t seed = 7)
{
    mhome::Rng rng(seed);
    Tensor probe;
    {
        mhome::NoGradGuard ng;
        probe = random_tensor(f(inputs).shape(), rng, -1.0, 1.0, false);
    }
    auto loss_of = [&]() { return mhome::sum(mhome::mul(f(inputs), probe)); };
    for (auto& t : inputs)
        t.zero_grad();
    mhome::backward(loss_of());
    return oracle::check_leaves([&] { return loss_of().item(); }, inputs).max_rel_err;
}

} // namespace testing_util

namespace testing_util {

/// Backward once through `loss`, then compare every parameter gradient with
/// central differences (every `stride`-th element).
inline oracle::FdReport params_grad_report(const std::function<Tensor()>& loss,
                                           const mhome::ParamList<double>& params, std::size_t stride = 1)
{
    std::vector<Tensor> leaves;
    for (const auto& p : params) {
        leaves.push_back(p.tensor);
        leaves.back().zero_grad();
    }
    mhome::backward(loss());
    return oracle::check_leaves([&] { return loss().item(); }, leaves, 1e-5, stride);
}

} // namespace testing_util
