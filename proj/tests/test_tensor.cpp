// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include <mhome/conv.hpp>
#include <mhome/ops.hpp>

#include "test_util.hpp"

using namespace mhome;
using testing_util::op_grad_error;
using testing_util::random_tensor;
using T = Tensor<double>;

namespace {

constexpr double kOpGradTol = 1e-6;

T make(Shape s, std::vector<double> v, bool rg = false) { return T(std::move(s), std::move(v), rg); }

} // namespace

TEST(Matmul, IdentityTimesIdentity)
{
    auto i2 = make({2, 2}, {1, 0, 0, 1});
    auto r = matmul(i2, i2);
    EXPECT_EQ(r.values(), (std::vector<double>{1, 0, 0, 1}));
}

TEST(Matmul, SmallProduct)
{
    auto r = matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 1}, {0, 1}));
    EXPECT_EQ(r.shape(), (Shape{2, 1}));
    EXPECT_EQ(r.values(), (std::vector<double>{2, 4}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes)
{
    try {
        matmul(T::zeros({3, 4}), T::zeros({3, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(3,4)"), std::string::npos);
        EXPECT_NE(msg.find("(3,2)"), std::string::npos);
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences)
{
    Rng rng(1);
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 2}, rng);
    // loss = sum(a*b), as in the documented example
    auto loss = [&] { return sum(matmul(a, b)); };
    backward(loss());
    auto rep = oracle::check_leaves([&] { return loss().item(); }, {a, b});
    EXPECT_LT(rep.max_rel_err, 1e-6);
}

TEST(Matmul, BatchedAndSharedOperandsGradient)
{
    Rng rng(2);
    auto f_shared = [](const std::vector<T>& in) { return matmul(in[0], in[1]); };
    EXPECT_LT(op_grad_error(f_shared, {random_tensor({2, 3, 4, 5}, rng), random_tensor({5, 2}, rng)}), kOpGradTol);
    EXPECT_LT(op_grad_error(f_shared, {random_tensor({4, 5}, rng), random_tensor({2, 5, 3}, rng)}), kOpGradTol);
    EXPECT_LT(op_grad_error(f_shared, {random_tensor({2, 4, 5}, rng), random_tensor({2, 5, 3}, rng)}), kOpGradTol);
}

TEST(Softmax, UniformOnZeros)
{
    auto r = softmax(T::zeros({4}), 0);
    for (double v : r.values())
        EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, NegativeInfinityMapsToZero)
{
    auto r = softmax(make({2}, {0.0, -std::numeric_limits<double>::infinity()}), 0);
    EXPECT_EQ(r[0], 1.0);
    EXPECT_EQ(r[1], 0.0);
}

TEST(Softmax, ScalarReference)
{
    // exp(k) / (e + e^2 + e^3), k = 1..3
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    auto r = softmax(make({3}, {1, 2, 3}), 0);
    EXPECT_NEAR(r[0], std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(r[0], 0.09003057, 1e-8);
    EXPECT_NEAR(r[1], 0.24472847, 1e-8);
    EXPECT_NEAR(r[2], 0.66524096, 1e-8);
}

TEST(Softmax, AllNegativeInfinityIsDegenerate)
{
    const double ninf = -std::numeric_limits<double>::infinity();
    EXPECT_THROW(softmax(make({2, 2}, {0, 1, ninf, ninf}), 1), DegenerateSliceError);
    auto z = softmax(make({2, 2}, {0, 1, ninf, ninf}), 1, DegenerateSlice::Zero);
    EXPECT_EQ(z[2], 0.0);
    EXPECT_EQ(z[3], 0.0);
}

TEST(Softmax, RowsSumToOneOnRandomInputs)
{
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng.index(6), cols = 1 + rng.index(9);
        auto x = random_tensor({rows, cols}, rng, -30.0, 30.0, false);
        for (std::size_t axis = 0; axis < 2; ++axis) {
            auto y = softmax(x, axis);
            auto s = reduce_sum(y, axis);
            for (double v : s.values())
                EXPECT_NEAR(v, 1.0, 1e-12);
            for (double v : y.values()) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
        }
    }
}

TEST(ReduceMean, Examples)
{
    EXPECT_DOUBLE_EQ(reduce_mean(make({2}, {2, 4}), 0).item(), 3.0);
    auto c = reduce_mean(T::full({3, 5}, 1.75), 1);
    for (double v : c.values())
        EXPECT_DOUBLE_EQ(v, 1.75);
}

TEST(ReduceMean, EmptyAxisIsRejected) { EXPECT_THROW(reduce_mean(T::zeros({2, 0}), 1), EmptyReductionError); }

TEST(ReduceMean, GradientMatchesFiniteDifferences)
{
    Rng rng(4);
    auto f = [](const std::vector<T>& in) { return reduce_mean(in[0], 1); };
    EXPECT_LT(op_grad_error(f, {random_tensor({2, 3}, rng)}), kOpGradTol);
}

TEST(Backward, SumGivesOnes)
{
    auto x = T::zeros({2, 3, 2}, true);
    backward(sum(x));
    for (double g : x.grad())
        EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput)
{
    auto x = make({2}, {1, 2}, true);
    backward(sum(mul(x, x)));
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, RejectsNonScalarLoss)
{
    auto x = T::ones({2}, true);
    EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Backward, RejectsSecondCallWithoutForward)
{
    auto x = T::ones({2}, true);
    auto loss = sum(mul(x, x));
    backward(loss);
    EXPECT_THROW(backward(loss), ContractError);
}

TEST(Backward, VisitsSharedNodesOnce)
{
    // y = tanh(x) feeds two branches; each tape node is visited exactly once.
    auto x = make({3}, {0.1, -0.2, 0.3}, true);
    auto y = tanh(x);
    auto loss = sum(add(mul(y, y), scale(y, 3.0)));
    // nodes: x, tanh, mul, scale, add, sum
    EXPECT_EQ(backward(loss), 6u);
    for (std::size_t i = 0; i < 3; ++i) {
        const double t = std::tanh(x[i]);
        EXPECT_NEAR(x.grad()[i], (2 * t + 3) * (1 - t * t), 1e-14);
    }
}

TEST(Backward, NoGradGuardSkipsRecording)
{
    auto x = T::ones({2}, true);
    NoGradGuard guard;
    auto y = sum(mul(x, x));
    EXPECT_FALSE(y.requires_grad());
}

TEST(Tensor, NonFiniteResultFromFiniteInputsIsAnError)
{
    EXPECT_THROW(log(make({2}, {1.0, -1.0})), NumericalError);
    EXPECT_THROW(exp(make({1}, {1000.0})), NumericalError);
}

TEST(Tensor, ShapeMustMatchData) { EXPECT_THROW(T({2, 2}, {1, 2, 3}), ShapeError); }

struct OpCase {
    const char* name;
    std::function<T(const std::vector<T>&)> f;
    std::vector<Shape> shapes;
    double lo = -1.0;
    double hi = 1.0;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences)
{
    const auto& c = GetParam();
    Rng rng(11);
    std::vector<T> inputs;
    for (const auto& s : c.shapes)
        inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
    EXPECT_LT(op_grad_error(c.f, inputs), kOpGradTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add", [](auto& in) { return add(in[0], in[1]); }, {{2, 3}, {2, 3}}},
        OpCase{"sub", [](auto& in) { return sub(in[0], in[1]); }, {{2, 3}, {2, 3}}},
        OpCase{"mul", [](auto& in) { return mul(in[0], in[1]); }, {{2, 3}, {2, 3}}},
        OpCase{"div", [](auto& in) { return div(in[0], in[1]); }, {{2, 3}, {2, 3}}, 0.5, 2.0},
        OpCase{"scale", [](auto& in) { return scale(in[0], -1.5); }, {{4}}},
        OpCase{"add_scalar", [](auto& in) { return add_scalar(in[0], 0.3); }, {{4}}},
        OpCase{"tanh", [](auto& in) { return tanh(in[0]); }, {{2, 4}}},
        OpCase{"sigmoid", [](auto& in) { return sigmoid(in[0]); }, {{2, 4}}},
        OpCase{"exp", [](auto& in) { return exp(in[0]); }, {{2, 4}}},
        OpCase{"log", [](auto& in) { return log(in[0]); }, {{2, 4}}, 0.5, 2.0},
        OpCase{"softplus", [](auto& in) { return softplus(in[0]); }, {{2, 4}}},
        OpCase{"gelu", [](auto& in) { return gelu(in[0]); }, {{2, 4}}},
        OpCase{"reshape", [](auto& in) { return reshape(in[0], {3, 2}); }, {{2, 3}}},
        OpCase{"permute", [](auto& in) { return permute(in[0], {2, 0, 1}); }, {{2, 3, 4}}},
        OpCase{"transpose", [](auto& in) { return transpose(in[0], 0, 2); }, {{2, 3, 4}}},
        OpCase{"concat", [](auto& in) { return concat<double>({in[0], in[1]}, 1); }, {{2, 3, 2}, {2, 1, 2}}},
        OpCase{"slice", [](auto& in) { return slice(in[0], 1, 1, 2); }, {{2, 4, 3}}},
        OpCase{"pad_zeros", [](auto& in) { return pad_zeros(in[0], 1, 1, 2); }, {{2, 3, 2}}},
        OpCase{"gather", [](auto& in) { return gather(in[0], 1, {2, 0, 1, 1}); }, {{2, 3, 2}}},
        OpCase{"reduce_sum", [](auto& in) { return reduce_sum(in[0], 1); }, {{2, 3, 2}}},
        OpCase{"softmax", [](auto& in) { return softmax(in[0], 1); }, {{2, 4, 3}}},
        OpCase{"log_softmax", [](auto& in) { return log_softmax(in[0], 1); }, {{2, 4, 3}}},
        OpCase{"mask_rows", [](auto& in) { return mask_rows(in[0], {1, 0, 1}, 0.0); }, {{3, 2}}},
        OpCase{"mix_experts", [](auto& in) { return mix_experts<double>(in[0], {in[1], in[2]}); },
               {{2, 3, 2}, {2, 3, 4}, {2, 3, 4}}},
        OpCase{"linear", [](auto& in) { return linear(in[0], in[1], in[2]); }, {{2, 3, 4}, {4, 5}, {5}}},
        OpCase{"dyt", [](auto& in) { return dyt(in[0], in[1], in[2], in[3], 1); }, {{2, 3, 4}, {3}, {3}, {}}},
        OpCase{"layer_norm", [](auto& in) { return layer_norm(in[0], in[1], in[2], 2); }, {{2, 3, 4}, {4}, {4}}},
        OpCase{"conv3d", [](auto& in) { return conv3d(in[0], in[1], in[2], 1, 1); },
               {{1, 2, 3, 3, 4}, {2, 2, 3, 3, 3}, {2}}},
        OpCase{"conv3d_strided", [](auto& in) { return conv3d(in[0], in[1], in[2], 2, 0); },
               {{2, 1, 4, 4, 4}, {3, 1, 2, 2, 2}, {3}}},
        OpCase{"conv_transpose3d", [](auto& in) { return conv_transpose3d(in[0], in[1], in[2], 2); },
               {{1, 2, 2, 3, 2}, {2, 3, 2, 2, 2}, {3}}}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Determinism, SameSeedSameBits)
{
    auto run = [] {
        Rng rng(99);
        auto a = random_tensor({5, 7}, rng);
        auto b = random_tensor({7, 3}, rng);
        return softmax(matmul(a, b), 1).values();
    };
    EXPECT_EQ(run(), run());
}
