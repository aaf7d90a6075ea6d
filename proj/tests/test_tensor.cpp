// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ovd/checkpoint.hpp"
#include "ovd/error.hpp"
#include "ovd/gradcheck.hpp"
#include "ovd/tensor.hpp"
#include "test_util.hpp"

using namespace ovd;
using ovd::test::random_tensor;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor::from({r, c}, v); }

}  // namespace

TEST(Matmul, IdentityLeavesMatrix) {
    const Tensor a = mat(2, 3, {1, 2, 3, 4, 5, 6});
    const Tensor c = matmul(mat(2, 2, {1, 0, 0, 1}), a);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, HandExample) {
    const Tensor c = matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 1, {1, 1}));
    ASSERT_EQ(c.shape(), (Shape{2, 1}));
    EXPECT_EQ(c[0], 3.0);
    EXPECT_EQ(c[1], 7.0);
}

TEST(Matmul, ZeroAnnihilates) {
    Rng rng(1, 0);
    const Tensor c = matmul(Tensor::zeros({3, 4}), random_tensor({4, 5}, rng));
    for (double v : c.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchIsDimensionError) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension);
    }
}

TEST(Softmax, Examples) {
    const Tensor a = softmax(mat(1, 2, {0, 0}), 1);
    EXPECT_EQ(a[0], 0.5);
    EXPECT_EQ(a[1], 0.5);
    const Tensor b = softmax(mat(1, 2, {std::log(1.0), std::log(3.0)}), 1);
    EXPECT_NEAR(b[0], 0.25, 1e-15);
    EXPECT_NEAR(b[1], 0.75, 1e-15);
    const Tensor c = softmax(mat(1, 2, {1000, 0}), 1);
    EXPECT_TRUE(std::isfinite(c[0]) && std::isfinite(c[1]));
    EXPECT_NEAR(c[0], 1.0, 1e-15);
    EXPECT_NEAR(c[1], 0.0, 1e-15);
}

TEST(Softmax, SumsToOneOnEveryAxisSlice) {
    Rng rng(2, 0);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(7);
        const Tensor x = random_tensor({r, c}, rng, 5.0);
        const Tensor s1 = softmax(x, 1);
        for (std::size_t i = 0; i < r; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < c; ++j) sum += s1.at(i, j);
            ASSERT_NEAR(sum, 1.0, 1e-12);
        }
        const Tensor s0 = softmax(x, 0);
        for (std::size_t j = 0; j < c; ++j) {
            double sum = 0;
            for (std::size_t i = 0; i < r; ++i) sum += s0.at(i, j);
            ASSERT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(Sigmoid, Examples) {
    const Tensor s = sigmoid(mat(1, 3, {0, std::log(3.0), -std::log(3.0)}));
    EXPECT_EQ(s[0], 0.5);
    EXPECT_NEAR(s[1], 0.75, 1e-15);
    EXPECT_NEAR(s[2], 0.25, 1e-15);
}

TEST(LayerNorm, Examples) {
    const Tensor one = Tensor::full({3}, 1.0), zero = Tensor::zeros({3});
    const Tensor a = layer_norm(mat(1, 3, {2, 2, 2}), one, zero);
    for (double v : a.data()) EXPECT_EQ(v, 0.0);
    const Tensor b = layer_norm(mat(1, 2, {1, -1}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
    EXPECT_NEAR(b[0], 1.0, 1e-15);
    EXPECT_NEAR(b[1], -1.0, 1e-15);
    const Tensor bias = Tensor::from({3}, {0.1, -0.2, 0.3});
    const Tensor c = layer_norm(mat(1, 3, {5, 1, -2}), Tensor::zeros({3}), bias);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(c[i], bias[i]);
}

TEST(CrossEntropy, Examples) {
    EXPECT_NEAR(cross_entropy(Tensor::from({3}, {200, 0, 0}), 0).item(), 0.0, 1e-12);
    EXPECT_NEAR(cross_entropy(Tensor::zeros({4}), 2).item(), std::log(4.0), 1e-15);
    EXPECT_NEAR(cross_entropy(Tensor::from({2}, {std::log(1.0), std::log(3.0)}), 0).item(),
                -std::log(0.25), 1e-15);
    try {
        cross_entropy(Tensor::zeros({4}), 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::index);
    }
}

TEST(Backward, SquareHasGradientSix) {
    Tensor x = Tensor::parameter({1}, {3.0});
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = sum(mul(x, x));
    backward(loss);
    ASSERT_EQ(x.grad().size(), 1u);
    EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ConstantLossGivesZeroGradients) {
    Tensor x = Tensor::parameter({2}, {1.0, 2.0});
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = add(scale(sum(x), 0.0), Tensor::scalar(4.0));
    backward(loss);
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SumOfSoftmaxHasNearZeroGradient) {
    Rng rng(3, 0);
    Tensor x = random_tensor({2, 5}, rng, 1.0, true);
    Tape tape;
    TapeScope scope(tape);
    backward(sum(softmax(x, 1)));
    for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, SecondCallIsTapeError) {
    Tensor x = Tensor::parameter({1}, {2.0});
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = sum(mul(x, x));
    backward(loss);
    try {
        backward(loss);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::tape);
    }
}

TEST(Backward, DetachedTensorIsTapeError) {
    try {
        backward(Tensor::scalar(1.0));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::tape);
    }
}

TEST(GradCheck, QuadraticFormIsExact) {
    Rng rng(4, 0);
    const Tensor A = random_tensor({4, 4}, rng);
    std::vector<Tensor> point = {random_tensor({4, 1}, rng, 1.0, true)};
    const auto f = [&](std::span<const Tensor> p) {
        return sum(mul(p[0], matmul(A, p[0])));
    };
    EXPECT_LT(grad_check(f, point).max_rel_error, 1e-8);
}

TEST(GradCheck, CompositionsMatchCentralDifferences) {
    Rng rng(5, 0);
    std::vector<Tensor> point = {random_tensor({3, 4}, rng, 1.0, true),
                                 random_tensor({4, 6}, rng, 0.5, true),
                                 random_tensor({6}, rng, 1.0, true),
                                 random_tensor({6}, rng, 0.1, true)};
    const auto f = [](std::span<const Tensor> p) {
        const Tensor h = layer_norm(matmul(p[0], p[1]), p[2], p[3]);
        const Tensor s = softmax(sigmoid(h), 1);
        return add(sum(mul(s, h)), cross_entropy(reshape(column(h, 0), {3}), 1));
    };
    EXPECT_LE(grad_check(f, point).max_rel_error, 1e-4);
}

TEST(GradCheck, NonFiniteFunctionIsCheckError) {
    std::vector<Tensor> point = {Tensor::parameter({1}, {1.0})};
    const auto f = [](std::span<const Tensor> p) { return scale(sum(p[0]), INFINITY); };
    try {
        grad_check(f, point);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::check);
    }
}

TEST(Determinism, SameSeedSameForward) {
    auto run = [] {
        Rng rng(9, 1);
        const Tensor a = random_tensor({5, 7}, rng);
        const Tensor b = random_tensor({7, 3}, rng);
        return softmax(gelu(matmul(a, b)), 1);
    };
    const Tensor x = run(), y = run();
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x[i], y[i]);
}

TEST(Checkpoint, BitExactRoundTrip) {
    Rng rng(6, 0);
    ParameterSet ps = {{"a", random_tensor({3, 4}, rng, 1e-3, true)},
                       {"b", Tensor::parameter({2}, {-0.0, 1.0 / 3.0})}};
    const auto dir = std::filesystem::temp_directory_path() / "ovd_ck_test";
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "ck.json", ps, {{"step", 3}});
    const Checkpoint ck = load_checkpoint(dir / "ck.json");
    ASSERT_EQ(ck.tensors.size(), 2u);
    EXPECT_EQ(parameter_checksum(ck.tensors), parameter_checksum(ps));
    EXPECT_EQ(ck.meta["step"], 3);
    EXPECT_TRUE(std::signbit(ck.tensors[1].tensor[0]));
}
