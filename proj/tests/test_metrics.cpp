// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "ovd/dataset.hpp"
#include "ovd/error.hpp"
#include "ovd/metrics.hpp"
#include "test_util.hpp"

using namespace ovd;

namespace {

constexpr std::size_t kWrong = vocab::kSize - 1;  // never a target below

// positions: silent frames, respond frames, then response tokens
InterleavedSequence supervised(std::size_t silent, std::size_t respond, std::vector<std::size_t> lm) {
    InterleavedSequence s;
    auto push = [&](bool st, bool l, std::size_t target) {
        s.elements.push_back(Element::special(vocab::STREAM_TAG));
        s.stream.push_back(st);
        s.lm.push_back(l);
        s.target.push_back(target);
    };
    for (std::size_t i = 0; i < silent; ++i) push(true, false, vocab::SILENCE);
    for (std::size_t i = 0; i < respond; ++i) push(true, false, vocab::RESPOND);
    for (std::size_t t : lm) push(false, true, t);
    push(false, false, 0);  // unsupervised tail
    return s;
}

Tensor perfect_logits(const InterleavedSequence& s, std::size_t V = vocab::kSize) {
    std::vector<double> l(s.size() * V, -30.0);
    for (std::size_t i = 0; i < s.size(); ++i) l[i * V + s.target[i]] = 30.0;
    return Tensor::from({s.size(), V}, std::move(l));
}

}  // namespace

TEST(LmPpl, PerfectAndUniform) {
    const auto s = supervised(3, 1, {10, 11, vocab::TURN_END});
    EXPECT_NEAR(lm_ppl(score_logits(perfect_logits(s), s, {}, {})), 1.0, 1e-9);
    const auto u = supervised(5, 0, {});
    EXPECT_NEAR(lm_ppl(score_logits(Tensor::zeros({u.size(), 8}), u, {}, {})), 8.0, 1e-12);
    EXPECT_THROW(lm_ppl(TokenCounts{}), Error);
}

TEST(LmPpl, EqualsExpOfSupervisedLoss) {
    Rng rng(1, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const auto seq = ovd::test::random_sequence(rng, 8, 5);
        const Tensor logits = ovd::test::random_tensor({seq.size(), vocab::kSize}, rng, 2.0);
        const auto terms = streaming_lm_loss(logits, seq);
        const auto c = score_logits(logits, seq, {}, {});
        const double n_sup = static_cast<double>(terms.n_stream + terms.n_lm);
        const double mean_nll = terms.total.item() * static_cast<double>(terms.n_positions) / n_sup;
        EXPECT_NEAR(lm_ppl(c), std::exp(mean_nll), 1e-9 * lm_ppl(c));
    }
}

TEST(LmPpl, OrderOfEpisodesDoesNotMatter) {
    Rng rng(2, 0);
    std::vector<TokenCounts> parts;
    for (int k = 0; k < 5; ++k) {
        const auto seq = ovd::test::random_sequence(rng, 8, 4);
        parts.push_back(score_logits(ovd::test::random_tensor({seq.size(), vocab::kSize}, rng), seq, {}, {}));
    }
    TokenCounts fwd, rev;
    for (const auto& p : parts) fwd += p;
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) rev += *it;
    EXPECT_NEAR(lm_ppl(fwd), lm_ppl(rev), 1e-12);
    EXPECT_EQ(fwd.lm_correct, rev.lm_correct);
}

TEST(LmCorrectness, CountingOracle) {
    const std::vector<std::size_t> targets = {10, 11, 12, 13, 14, 15, 16, 17, 18, vocab::TURN_END};
    const auto s = supervised(0, 0, targets);
    Tensor logits = perfect_logits(s);
    // three wrong predictions
    for (std::size_t i : {1, 4, 9}) logits.mutable_data()[i * vocab::kSize + kWrong] = 60.0;
    EXPECT_DOUBLE_EQ(lm_correctness(score_logits(logits, s, {}, {})), 0.7);
    EXPECT_DOUBLE_EQ(lm_correctness(score_logits(perfect_logits(s), s, {}, {})), 1.0);
    std::vector<double> fixed(s.size() * vocab::kSize, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) fixed[i * vocab::kSize + kWrong] = 1.0;
    EXPECT_DOUBLE_EQ(lm_correctness(score_logits(Tensor::from({s.size(), vocab::kSize}, fixed), s, {}, {})), 0.0);
}

TEST(LmCorrectness, CorruptedTurnsAreExcludedByDefault) {
    const auto s = supervised(1, 1, {10, 11, 12, 13});
    Tensor logits = perfect_logits(s);
    logits.mutable_data()[2 * vocab::kSize + kWrong] = 60.0;
    logits.mutable_data()[3 * vocab::kSize + kWrong] = 60.0;
    std::vector<char> corrupted(s.size(), 0);
    corrupted[2] = corrupted[3] = 1;
    ScoreOptions opt;
    const auto excl = score_logits(logits, s, corrupted, opt);
    EXPECT_EQ(excl.n_lm, 2u);
    EXPECT_DOUBLE_EQ(lm_correctness(excl), 1.0);
    opt.include_corrupted = true;
    EXPECT_DOUBLE_EQ(lm_correctness(score_logits(logits, s, corrupted, opt)), 0.5);
}

TEST(Fluency, SilenceOnlyPredictorScores18Of30) {
    std::vector<std::size_t> tokens(10, 20);
    const auto s = supervised(18, 2, tokens);
    std::vector<double> l(s.size() * vocab::kSize, 0.0);
    for (std::size_t i = 0; i < s.size(); ++i) {
        l[i * vocab::kSize + vocab::SILENCE] = 5.0;
        l[i * vocab::kSize + kWrong] = 1.0;
    }
    const auto c = score_logits(Tensor::from({s.size(), vocab::kSize}, l), s, {}, {});
    EXPECT_DOUBLE_EQ(fluency(c), 0.6);
    EXPECT_DOUBLE_EQ(fluency(score_logits(perfect_logits(s), s, {}, {})), 1.0);
}

TEST(Fluency, DecomposesByPositionCounts) {
    Rng rng(3, 0);
    for (int trial = 0; trial < 200; ++trial) {
        const auto seq = ovd::test::random_sequence(rng, 8, 1 + rng.below(6));
        const auto c = score_logits(ovd::test::random_tensor({seq.size(), vocab::kSize}, rng), seq, {}, {});
        const double f = fluency(c);
        ASSERT_LE(f, 1.0);
        const double nd = static_cast<double>(c.n_det), nl = static_cast<double>(c.n_lm);
        const double mix = c.n_lm == 0 ? determination_accuracy(c)
                                       : (nd * determination_accuracy(c) + nl * lm_correctness(c)) / (nd + nl);
        ASSERT_NEAR(f, mix, 1e-12);
    }
    // only respond frames: fluency tracks the LM side once decisions are right
    const auto s = supervised(0, 2, {10, 11, 12, 13});
    Tensor logits = perfect_logits(s);
    logits.mutable_data()[3 * vocab::kSize + kWrong] = 60.0;
    const auto c = score_logits(logits, s, {}, {});
    EXPECT_DOUBLE_EQ(fluency(c), 5.0 / 6.0);
}

TEST(TimeDiff, Examples) {
    const std::vector<double> e = {3.0};
    EXPECT_DOUBLE_EQ(time_diff(e, std::vector<double>{3.0}, 10.0).mean(), 0.0);
    EXPECT_DOUBLE_EQ(time_diff(e, std::vector<double>{3.5}, 10.0).mean(), 0.5);
    const auto miss = time_diff(std::vector<double>{9.0}, std::vector<double>{}, 10.0);
    EXPECT_DOUBLE_EQ(miss.mean(), 1.0);
    EXPECT_EQ(miss.unmatched, 1u);
    EXPECT_DOUBLE_EQ(time_diff(std::vector<double>{9.0}, std::vector<double>{}, 10.0, 2.5).mean(), 2.5);
    EXPECT_TRUE(time_diff(std::vector<double>{}, std::vector<double>{1.0}, 10.0).empty);
    // nearest unmatched response; the earlier one wins a tie
    const auto two = time_diff(std::vector<double>{2.0, 4.0}, std::vector<double>{3.0, 4.5}, 10.0);
    EXPECT_DOUBLE_EQ(two.sum, 1.0 + 0.5);
    const auto tie = time_diff(std::vector<double>{2.0}, std::vector<double>{3.0, 1.0}, 10.0);
    EXPECT_DOUBLE_EQ(tie.sum, 1.0);
}

TEST(TimeDiff, TranslationInvariant) {
    Rng rng(4, 0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> e, a;
        for (std::size_t k = 0, n = rng.below(5); k < n; ++k) e.push_back(0.5 * rng.below(20));
        for (std::size_t k = 0, n = rng.below(5); k < n; ++k) a.push_back(0.5 * rng.below(20));
        const double shift = 0.5 * rng.below(40);
        auto moved = [&](std::vector<double> v) {
            for (double& x : v) x += shift;
            return v;
        };
        const auto r0 = time_diff(e, a, 10.0);
        const auto r1 = time_diff(moved(e), moved(a), 10.0 + shift);
        ASSERT_NEAR(r0.sum, r1.sum, 1e-9);
        ASSERT_EQ(r0.unmatched, r1.unmatched);
    }
}

TEST(EvalReport, DeterministicAndRoundTrips) {
    RunConfig cfg = ovd::test::small_config();
    cfg.data.duration = 3.0;
    const Assistant a(cfg);
    const auto samples = generate_dataset(cfg.data.heldout_seed, 4, cfg.data);
    const EvalReport r1 = build_report(a, samples);
    const EvalReport r2 = build_report(a, samples, EvalOptions{true, 2});
    EXPECT_EQ(r1.to_json().dump(), r2.to_json().dump());
    EXPECT_EQ(EvalReport::from_json(r1.to_json()).to_json().dump(), r1.to_json().dump());
    EXPECT_EQ(r1.n_episodes, 4u);
    EXPECT_EQ(r1.n_frames, 4u * 6);
    EXPECT_GT(r1.flops, 0u);
    const auto csv = reports_to_csv({r1, r2});
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
