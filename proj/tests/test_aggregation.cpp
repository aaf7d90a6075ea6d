// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ovd/aggregation.hpp"
#include "ovd/error.hpp"
#include "ovd/gradcheck.hpp"
#include "test_util.hpp"

using namespace ovd;
using ovd::test::random_tensor;

namespace {

constexpr std::size_t kD = 8;

AggregationRouter make_router(AggregationConfig cfg = {}, std::uint64_t seed = 1) {
    Rng rng(seed, 0);
    return AggregationRouter(cfg, kD, rng);
}

void fill(Tensor& t, double v) {
    for (double& x : t.mutable_data()) x = v;
}

ErrorKind strategy_error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::io;
}

}  // namespace

TEST(RouteWeights, ZeroSecondLayerGivesHalves) {
    AggregationRouter r = make_router();
    fill(r.w2, 0.0);
    fill(r.b2, 0.0);
    Rng rng(2, 0);
    const Tensor w = r.route_weights(random_tensor({1, kD}, rng));
    ASSERT_EQ(w.shape(), (Shape{10, 2}));
    for (double v : w.data()) EXPECT_EQ(v, 0.5);
}

TEST(RouteWeights, BiasRowClosedForm) {
    AggregationRouter r = make_router();
    fill(r.w2, 0.0);
    fill(r.b2, 0.0);
    r.b2.mutable_data()[2 * 3] = std::log(3.0);
    Rng rng(3, 0);
    const Tensor w = r.route_weights(random_tensor({1, kD}, rng));
    EXPECT_NEAR(w.at(3, 0), 0.75, 1e-15);
    EXPECT_NEAR(w.at(3, 1), 0.25, 1e-15);
    EXPECT_EQ(w.at(4, 0), 0.5);
}

TEST(RouteWeights, RowsSumToOneForAllSeeds) {
    for (auto act : {GateActivation::sigmoid, GateActivation::relu})
        for (auto gran : {GateGranularity::per_position, GateGranularity::per_frame})
            for (std::uint64_t seed = 0; seed < 50; ++seed) {
                AggregationConfig cfg;
                cfg.activation = act;
                cfg.granularity = gran;
                const AggregationRouter r = make_router(cfg, seed);
                Rng rng(seed, 9);
                const Tensor w = r.route_weights(random_tensor({1, kD}, rng, 3.0));
                for (std::size_t i = 0; i < 10; ++i) {
                    EXPECT_NEAR(w.at(i, 0) + w.at(i, 1), 1.0, 1e-12);
                    EXPECT_GT(w.at(i, 0), 0.0);
                    EXPECT_LT(w.at(i, 0), 1.0);
                }
            }
}

TEST(RouteWeights, PerFrameModeSharesOnePair) {
    AggregationConfig cfg;
    cfg.granularity = GateGranularity::per_frame;
    const AggregationRouter r = make_router(cfg);
    Rng rng(4, 0);
    const Tensor w = r.route_weights(random_tensor({1, kD}, rng));
    for (std::size_t i = 1; i < 10; ++i) {
        EXPECT_EQ(w.at(i, 0), w.at(0, 0));
        EXPECT_EQ(w.at(i, 1), w.at(0, 1));
    }
}

TEST(AggregateAdaptive, OneHotAndHalfWeights) {
    Rng rng(5, 0);
    const Tensor s = random_tensor({10, kD}, rng), t = random_tensor({10, kD}, rng);
    std::vector<double> onehot(20, 0.0), half(20, 0.5);
    for (std::size_t i = 0; i < 10; ++i) onehot[2 * i] = 1.0;
    const Tensor a = aggregate_adaptive(s, t, Tensor::from({10, 2}, onehot));
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_EQ(a[i], s[i]);
    const Tensor m = aggregate_adaptive(s, t, Tensor::from({10, 2}, half));
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(m[i], 0.5 * (s[i] + t[i]), 1e-15);
    EXPECT_EQ(m.rows(), 10u);
}

TEST(AggregateAdaptive, ModeMismatchIsStrategyError) {
    Rng rng(6, 0);
    const Tensor s = random_tensor({10, kD}, rng), t = random_tensor({1, kD}, rng);
    EXPECT_EQ(strategy_error_of([&] {
                  aggregate_adaptive(s, t, Tensor::full({10, 2}, 0.5));
              }),
              ErrorKind::strategy);
}

TEST(AggregateAdaptive, ConvexCombinationBound) {
    const AggregationRouter r = make_router();
    Rng rng(7, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor s = random_tensor({10, kD}, rng), t = random_tensor({10, kD}, rng);
        const Tensor out = r.aggregate(s, t);
        for (std::size_t i = 0; i < out.numel(); ++i) {
            EXPECT_GE(out[i], std::min(s[i], t[i]) - 1e-12);
            EXPECT_LE(out[i], std::max(s[i], t[i]) + 1e-12);
        }
    }
}

TEST(AggregateAdaptive, GradientsMatchCentralDifferences) {
    AggregationRouter r = make_router();
    Rng rng(8, 0);
    std::vector<Tensor> point = {random_tensor({10, kD}, rng, 1.0, true),
                                 random_tensor({10, kD}, rng, 1.0, true), r.w1, r.b1, r.w2, r.b2};
    const Tensor target = random_tensor({10, kD}, rng);
    const auto f = [&](std::span<const Tensor> p) {
        const Tensor d = sub(r.aggregate(p[0], p[1]), target);
        return sum(mul(d, d));
    };
    EXPECT_LE(grad_check(f, point).max_rel_error, 1e-4);
}

TEST(AggregateConcat, Counts) {
    Rng rng(9, 0);
    const Tensor s = random_tensor({10, kD}, rng);
    EXPECT_EQ(aggregate_concat(s, random_tensor({10, kD}, rng)).rows(), 20u);
    EXPECT_EQ(aggregate_concat(s, random_tensor({1, kD}, rng)).rows(), 11u);
    EXPECT_EQ(strategy_error_of([&] { aggregate_concat(s, Tensor::zeros({0, kD})); }),
              ErrorKind::strategy);
    EXPECT_EQ(fused_token_count(AggregationVariant::concat, 10, 10), 20u);
    EXPECT_EQ(fused_token_count(AggregationVariant::concat, 10, 1), 11u);
}

TEST(AggregateAddition, Modes) {
    Rng rng(10, 0);
    const Tensor s = random_tensor({10, kD}, rng);
    const Tensor zero = aggregate_addition(s, Tensor::zeros({10, kD}));
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_EQ(zero[i], s[i]);

    const Tensor t1 = random_tensor({1, kD}, rng);
    const Tensor mixed = aggregate_addition(s, t1);
    ASSERT_EQ(mixed.rows(), 10u);
    for (std::size_t j = 0; j < kD; ++j) EXPECT_EQ(mixed.at(0, j), s.at(0, j) + t1.at(0, j));
    for (std::size_t i = 1; i < 10; ++i)
        for (std::size_t j = 0; j < kD; ++j) EXPECT_EQ(mixed.at(i, j), s.at(i, j));
    EXPECT_EQ(aggregate_addition(t1, s).rows(), 10u);
    EXPECT_EQ(strategy_error_of([&] { aggregate_addition(t1, t1); }), ErrorKind::strategy);
    for (auto [a, b] : {std::pair{10, 10}, {10, 1}, {1, 10}})
        EXPECT_EQ(fused_token_count(AggregationVariant::addition, a, b), 10u);
}

TEST(AggregateLearnable, ZeroLogitsGiveTheMean) {
    Rng rng(11, 0);
    const Tensor s = random_tensor({10, kD}, rng), t = random_tensor({10, kD}, rng);
    const Tensor m = aggregate_learnable(s, t, Tensor::zeros({10, 2}));
    ASSERT_EQ(m.rows(), 10u);
    for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(m[i], 0.5 * (s[i] + t[i]), 1e-15);
}

TEST(AggregateLearnable, EqualsInputIndependentAdaptiveGate) {
    AggregationRouter adaptive = make_router();
    fill(adaptive.w1, 0.0);
    fill(adaptive.w2, 0.0);
    Rng rng(12, 0);
    const Tensor logits = random_tensor({10, 2}, rng);
    for (std::size_t i = 0; i < 20; ++i) adaptive.b2.mutable_data()[i] = logits[i];
    const Tensor s = random_tensor({10, kD}, rng), t = random_tensor({10, kD}, rng);
    const Tensor a = adaptive.aggregate(s, t);
    const Tensor l = aggregate_learnable(s, t, logits);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], l[i]);
}

TEST(AggregationConfig, AdaptiveRequiresTenTen) {
    AggregationConfig cfg;
    cfg.ego_mode = 1;
    EXPECT_EQ(strategy_error_of([&] { validate_aggregation(cfg); }), ErrorKind::strategy);
}
