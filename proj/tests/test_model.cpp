// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "ovd/dataset.hpp"
#include "ovd/error.hpp"
#include "ovd/gradcheck.hpp"
#include "ovd/model.hpp"
#include "ovd/trainer.hpp"
#include "test_util.hpp"

using namespace ovd;
using ovd::test::random_sequence;

namespace {

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::io;
}

ModelConfig model_config(std::size_t layers, std::size_t d) {
    ModelConfig m;
    m.d_model = d;
    m.n_layers = layers;
    m.n_heads = 2;
    m.seed = 5;
    return m;
}

DroppingConfig routed(double beta, SelectionMode sel = SelectionMode::per_frame) {
    DroppingConfig c;
    c.policy = PlacementPolicy::interleaved;
    c.beta = beta;
    c.selection = sel;
    return c;
}

// chunk boundaries that never split the visual block of a frame
std::vector<std::size_t> random_cuts(const InterleavedSequence& seq, Rng& rng) {
    std::vector<std::size_t> cuts = {0};
    for (std::size_t i = 1; i < seq.size(); ++i) {
        const Element& a = seq.elements[i - 1];
        const Element& b = seq.elements[i];
        const bool inside = a.kind == ElementKind::visual && b.kind == ElementKind::visual &&
                            a.group == b.group;
        if (!inside && rng.uniform() < 0.5) cuts.push_back(i);
    }
    cuts.push_back(seq.size());
    return cuts;
}

InterleavedSequence one_position(std::size_t target, bool stream, bool lm) {
    InterleavedSequence s;
    s.elements = {Element::special(vocab::STREAM_TAG)};
    s.stream = {stream};
    s.lm = {lm};
    s.target = {target};
    return s;
}

}  // namespace

TEST(ForwardIncremental, MatchesFullForward) {
    const ToyLM model(model_config(3, 16), routed(0.5));
    Rng rng(21, 0);
    for (int ep = 0; ep < 100; ++ep) {
        const auto seq = random_sequence(rng, 16, 1 + rng.below(4), 1 + rng.below(10));
        const Tensor full = model.forward(seq);
        DecodeCache cache = model.new_cache();
        const auto cuts = random_cuts(seq, rng);
        for (std::size_t c = 0; c + 1 < cuts.size(); ++c) {
            const std::span<const Element> part(seq.elements.data() + cuts[c], cuts[c + 1] - cuts[c]);
            const Tensor out = model.forward(part, seq.visual, &cache);
            ASSERT_EQ(cache.length, cuts[c + 1]);
            for (std::size_t i = 0; i < part.size(); ++i)
                for (std::size_t v = 0; v < vocab::kSize; ++v)
                    ASSERT_NEAR(out.at(i, v), full.at(cuts[c] + i, v), 1e-9) << "episode " << ep;
        }
    }
}

TEST(ForwardIncremental, EmptyInputIsANoOp) {
    const ToyLM model(model_config(2, 16), routed(0.5));
    Rng rng(22, 0);
    const auto seq = random_sequence(rng, 16, 2);
    DecodeCache cache = model.new_cache();
    model.forward(seq, &cache);
    const DecodeCache before = cache;
    const Tensor out = model.forward(std::span<const Element>{}, seq.visual, &cache);
    EXPECT_EQ(out.rows(), 0u);
    EXPECT_EQ(cache.length, before.length);
    for (std::size_t l = 0; l < cache.layers.size(); ++l) {
        EXPECT_EQ(cache.layers[l].k, before.layers[l].k);
        EXPECT_EQ(cache.layers[l].pos, before.layers[l].pos);
    }
}

TEST(ForwardIncremental, SplitFrameIsACacheError) {
    const ToyLM model(model_config(2, 16), routed(0.5));
    Rng rng(23, 0);
    const auto seq = random_sequence(rng, 16, 1);
    DecodeCache cache = model.new_cache();
    model.forward(std::span<const Element>(seq.elements.data(), 4), seq.visual, &cache);
    EXPECT_EQ(kind_of([&] {
                  model.forward(std::span<const Element>(seq.elements.data() + 4, 2), seq.visual, &cache);
              }),
              ErrorKind::cache);
    DecodeCache other = model.new_cache();
    other.d_model = 8;
    EXPECT_EQ(kind_of([&] { model.forward(seq, &other); }), ErrorKind::cache);
}

TEST(ForwardIncremental, GlobalPercentileNeedsOneCall) {
    const ToyLM model(model_config(2, 16), routed(0.5, SelectionMode::global_percentile));
    Rng rng(24, 0);
    const auto seq = random_sequence(rng, 16, 2);
    DecodeCache cache = model.new_cache();
    model.forward(std::span<const Element>(seq.elements.data(), 11), seq.visual, &cache);
    EXPECT_EQ(kind_of([&] {
                  model.forward(std::span<const Element>(seq.elements.data() + 11, seq.size() - 11),
                                seq.visual, &cache);
              }),
              ErrorKind::routing);
}

TEST(ForwardIncremental, FutureElementsNeverChangePastLogits) {
    const ToyLM model(model_config(3, 16), routed(0.5));
    Rng rng(25, 0);
    for (int ep = 0; ep < 20; ++ep) {
        auto seq = random_sequence(rng, 16, 3);
        const Tensor ref = model.forward(seq);
        const std::size_t cut = seq.size() - 1;
        seq.elements.back() = Element::text(vocab::kFirstText + rng.below(50));
        const Tensor out = model.forward(seq);
        for (std::size_t i = 0; i < cut * vocab::kSize; ++i) ASSERT_EQ(out[i], ref[i]);
    }
}

// ---- loss ----------------------------------------------------------------------------

TEST(StreamingLoss, PerfectPredictionIsZero) {
    InterleavedSequence s;
    s.elements.assign(3, Element::special(vocab::STREAM_TAG));
    s.stream = {1, 0, 0};
    s.lm = {0, 1, 0};
    s.target = {vocab::RESPOND, vocab::kFirstText, 0};
    std::vector<double> logits(3 * vocab::kSize, -1e4);
    logits[vocab::RESPOND] = 0.0;
    logits[vocab::kSize + vocab::kFirstText] = 0.0;
    const auto terms = streaming_lm_loss(Tensor::from({3, vocab::kSize}, logits), s);
    EXPECT_NEAR(terms.total.item(), 0.0, 1e-12);
}

TEST(StreamingLoss, UniformOverEightIsLn8OverN) {
    // one supervised position among four
    InterleavedSequence s = one_position(vocab::SILENCE, true, false);
    for (int k = 0; k < 3; ++k) {
        s.elements.push_back(Element::special(vocab::FRAME_SEP));
        s.stream.push_back(0), s.lm.push_back(0), s.target.push_back(0);
    }
    const auto terms = streaming_lm_loss(Tensor::zeros({4, 8}), s);
    EXPECT_NEAR(terms.total.item(), std::log(8.0) / 4.0, 1e-12);
    const auto single = streaming_lm_loss(Tensor::zeros({1, 8}), one_position(vocab::SILENCE, true, false));
    EXPECT_NEAR(single.total.item(), std::log(8.0), 1e-12);
}

TEST(StreamingLoss, WeightScalesOnlyTheStreamingTerm) {
    Rng rng(31, 0);
    const auto seq = random_sequence(rng, 16, 4);
    const Tensor logits = ovd::test::random_tensor({seq.size(), vocab::kSize}, rng);
    const auto a = streaming_lm_loss(logits, seq, 1.0);
    const auto b = streaming_lm_loss(logits, seq, 2.0);
    EXPECT_NEAR(b.streaming.item(), 2.0 * a.streaming.item(), 1e-12);
    EXPECT_EQ(b.lm.item(), a.lm.item());
    EXPECT_NEAR(b.total.item(), 2.0 * a.streaming.item() + a.lm.item(), 1e-12);
}

TEST(StreamingLoss, FlagMismatchIsASupervisionError) {
    InterleavedSequence s = one_position(vocab::SILENCE, true, false);
    s.lm.push_back(0);
    EXPECT_EQ(kind_of([&] { streaming_lm_loss(Tensor::zeros({1, 8}), s); }), ErrorKind::supervision);
    EXPECT_EQ(kind_of([&] { streaming_lm_loss(Tensor::zeros({2, 8}), one_position(0, true, false)); }),
              ErrorKind::supervision);
    EXPECT_EQ(kind_of([&] { streaming_lm_loss(Tensor::zeros({1, 8}), one_position(0, true, true)); }),
              ErrorKind::supervision);
    EXPECT_EQ(kind_of([&] {
                  streaming_lm_loss(Tensor::zeros({1, 64}), one_position(vocab::kFirstText, true, false));
              }),
              ErrorKind::supervision);
}

TEST(StreamingLoss, DecomposesIntoIndependentTerms) {
    const ToyLM model(model_config(2, 16), routed(0.5));
    Rng rng(32, 0);
    for (int ep = 0; ep < 50; ++ep) {
        const auto seq = random_sequence(rng, 16, 1 + rng.below(4));
        const Tensor logits = model.forward(seq);
        const double w = 0.5 + 2.0 * rng.uniform();
        const auto terms = streaming_lm_loss(logits, seq, w);
        // independent oracle: per-position log-sum-exp
        double stream = 0.0, lm = 0.0;
        for (std::size_t j = 0; j < seq.size(); ++j) {
            if (!seq.stream[j] && !seq.lm[j]) continue;
            double m = -INFINITY, z = 0.0;
            for (std::size_t v = 0; v < vocab::kSize; ++v) m = std::max(m, logits.at(j, v));
            for (std::size_t v = 0; v < vocab::kSize; ++v) z += std::exp(logits.at(j, v) - m);
            const double nll = m + std::log(z) - logits.at(j, seq.target[j]);
            (seq.stream[j] ? stream : lm) += nll;
        }
        const double n = static_cast<double>(seq.size());
        EXPECT_NEAR(terms.streaming.item(), w * stream / n, 1e-12);
        EXPECT_NEAR(terms.lm.item(), lm / n, 1e-12);
        EXPECT_NEAR(terms.total.item(), terms.streaming.item() + terms.lm.item(), 1e-12);
    }
}

TEST(StreamingLoss, UnsupervisedPositionsContributeNothing) {
    Rng rng(33, 0);
    for (int ep = 0; ep < 50; ++ep) {
        const auto seq = random_sequence(rng, 16, 3);
        const Tensor logits = ovd::test::random_tensor({seq.size(), vocab::kSize}, rng);
        const double ref = streaming_lm_loss(logits, seq).total.item();
        Tensor bumped = logits.clone();
        for (std::size_t j = 0; j < seq.size(); ++j)
            if (!seq.stream[j] && !seq.lm[j])
                for (std::size_t v = 0; v < vocab::kSize; ++v)
                    bumped.mutable_data()[j * vocab::kSize + v] += 100.0 * rng.normal();
        ASSERT_EQ(streaming_lm_loss(bumped, seq).total.item(), ref);
    }
}

// ---- decisions and decoding --------------------------------------------------------

TEST(Determine, TieIsSilentAndPairArgmax) {
    std::vector<double> l(vocab::kSize, 0.0);
    EXPECT_EQ(determine(l), Decision::silent);
    l[vocab::RESPOND] = 1e-12;
    EXPECT_EQ(determine(l), Decision::respond);
    l[vocab::TURN_END] = 50.0;  // other logits do not matter
    l[vocab::SILENCE] = 1.0;
    EXPECT_EQ(determine(l), Decision::silent);
}

TEST(Determine, InvariantUnderMonotoneMaps) {
    Rng rng(41, 0);
    const std::function<double(double)> maps[] = {
        [](double x) { return 3.0 * x + 7.0; }, [](double x) { return std::exp(x); },
        [](double x) { return x * x * x; }, [](double x) { return std::tanh(x); }};
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> l(vocab::kSize);
        for (double& x : l) x = rng.normal();
        const Decision d = determine(l);
        for (const auto& f : maps) {
            std::vector<double> m = l;
            m[vocab::SILENCE] = f(l[vocab::SILENCE]);
            m[vocab::RESPOND] = f(l[vocab::RESPOND]);
            ASSERT_EQ(determine(m), d);
        }
    }
}

TEST(GreedyDecode, FollowsTransitionTable) {
    // 9 -> 12 -> 8 -> 30 -> TURN_END
    const std::map<std::size_t, std::size_t> next = {
        {9, 12}, {12, 8}, {8, 30}, {30, vocab::TURN_END}};
    auto logits_for = [](std::size_t tok) {
        std::vector<double> l(vocab::kSize, 0.0);
        l[tok] = 5.0;
        l[vocab::RESPOND] = 9.0;  // non-text ids are never chosen
        return l;
    };
    std::vector<std::size_t> fed;
    const auto turn = greedy_decode(
        logits_for(9),
        [&](std::size_t tok) {
            fed.push_back(tok);
            return tok == vocab::TURN_END ? std::vector<double>(vocab::kSize, 0.0)
                                          : logits_for(next.at(tok));
        },
        32);
    EXPECT_EQ(turn.tokens, (std::vector<std::size_t>{9, 12, 8, 30}));
    EXPECT_FALSE(turn.truncated);
    EXPECT_EQ(fed, (std::vector<std::size_t>{9, 12, 8, 30, vocab::TURN_END}));
}

TEST(GreedyDecode, ImmediateTurnEndAndTruncation) {
    std::vector<double> end(vocab::kSize, 0.0);
    end[vocab::TURN_END] = 1.0;
    std::size_t calls = 0;
    const auto empty = greedy_decode(end, [&](std::size_t) { ++calls; return end; }, 32);
    EXPECT_TRUE(empty.tokens.empty());
    EXPECT_FALSE(empty.truncated);
    EXPECT_EQ(calls, 1u);

    std::vector<double> loop(vocab::kSize, 0.0);
    loop[20] = 1.0;
    std::vector<std::size_t> fed;
    const auto capped = greedy_decode(loop, [&](std::size_t t) { fed.push_back(t); return loop; }, 4);
    EXPECT_EQ(capped.tokens.size(), 4u);
    EXPECT_TRUE(capped.truncated);
    EXPECT_EQ(fed.back(), vocab::TURN_END);
}

TEST(DecodeChoice, TiesPreferTurnEndThenLowerId) {
    std::vector<double> l(vocab::kSize, 0.0);
    EXPECT_EQ(decode_choice(l), vocab::TURN_END);
    l[vocab::TURN_END] = -1.0;
    EXPECT_EQ(decode_choice(l), vocab::kFirstText);
    l[40] = 2.0;
    l[41] = 2.0;
    EXPECT_EQ(decode_choice(l), 40u);
}

TEST(GenerateResponse, AppendsToCache) {
    const ToyLM model(model_config(2, 16), routed(0.5));
    DecodeCache cache = model.new_cache();
    const std::vector<Element> head = {Element::special(vocab::RESPOND)};
    const Tensor first = model.forward(head, Tensor(), &cache);
    const auto turn = generate_response(model, cache, first.data(), 5);
    EXPECT_EQ(cache.length, 1 + turn.tokens.size() + 1);
}

// ---- gradients -----------------------------------------------------------------------

TEST(ModelGradient, FullLossThroughAllRoutedLayers) {
    RunConfig cfg = ovd::test::small_config();
    cfg.dropping.policy = PlacementPolicy::all;
    cfg.dropping.beta = 0.5;
    cfg.dropping.scale_by_r = true;
    Assistant assistant(cfg);
    const auto sample = generate_episode(cfg.data.seed, 0, [] {
        DataConfig d;
        d.duration = 2.0;
        d.event_rate = 1.0;
        return d;
    }());
    const EncodedEpisode ep = assistant.encode(sample);
    ParameterSet params = assistant.parameters();
    std::vector<Tensor> point;
    for (auto& p : params) point.push_back(p.tensor);
    GradCheckOptions opt;
    opt.max_coords_per_tensor = 6;
    opt.seed = 9;
    const auto layout = training_layout(cfg);
    const auto res = grad_check(
        [&](std::span<const Tensor>) {
            const auto build = build_sequence(assistant, ep, layout);
            return streaming_lm_loss(assistant.lm.forward(build.seq), build.seq).total;
        },
        point, opt);
    EXPECT_LE(res.max_rel_error, 1e-4) << "tensor " << params[res.worst_tensor].name;
    EXPECT_GT(res.checked, 100u);
}

// ---- training ------------------------------------------------------------------------

namespace {

std::vector<EncodedEpisode> toy_corpus(const Assistant& a, std::size_t n) {
    DataConfig d;
    d.duration = 4.0;
    d.event_rate = 0.5;
    std::vector<EncodedEpisode> out;
    for (const auto& s : generate_dataset(17, n, d)) out.push_back(a.encode(s));
    return out;
}

}  // namespace

TEST(TrainStep, IdenticalStateGivesIdenticalParameters) {
    RunConfig cfg = ovd::test::small_config();
    Assistant a(cfg), b(cfg);
    Trainer ta(a, toy_corpus(a, 6)), tb(b, toy_corpus(b, 6));
    for (int k = 0; k < 3; ++k) EXPECT_EQ(ta.step().loss, tb.step().loss);
    const auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        ASSERT_TRUE(std::ranges::equal(pa[i].tensor.data(), pb[i].tensor.data())) << pa[i].name;
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
    RunConfig cfg = ovd::test::small_config();
    cfg.train.lr = 0.0;
    Assistant a(cfg);
    const Assistant init(cfg);
    Trainer t(a, toy_corpus(a, 4));
    for (int k = 0; k < 3; ++k) t.step();
    const auto pa = a.parameters(), pi = init.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        ASSERT_TRUE(std::ranges::equal(pa[i].tensor.data(), pi[i].tensor.data())) << pa[i].name;
}

TEST(TrainStep, LossHalvesWithin200Steps) {
    RunConfig cfg = ovd::test::small_config();
    cfg.train.steps = 200;
    Assistant a(cfg);
    Trainer t(a, toy_corpus(a, 24));
    std::vector<double> losses;
    t.run([&](const TrainLogEntry& e) { losses.push_back(e.loss); });
    ASSERT_EQ(losses.size(), 200u);
    double head = 0.0, tail = 0.0;
    for (int k = 0; k < 10; ++k) head += losses[k], tail += losses[190 + k];
    EXPECT_LT(tail, 0.5 * head);
}

TEST(TrainStep, RandomSelectionFreezesRouterVectors) {
    RunConfig cfg = ovd::test::small_config();
    cfg.dropping.selection = SelectionMode::random;
    Assistant a(cfg);
    const Assistant init(cfg);
    Trainer t(a, toy_corpus(a, 4));
    t.step();
    const auto pa = a.parameters(), pi = init.parameters();
    bool moved = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const bool same = std::ranges::equal(pa[i].tensor.data(), pi[i].tensor.data());
        if (is_router_parameter(pa[i].name)) EXPECT_TRUE(same) << pa[i].name;
        else moved |= !same;
    }
    EXPECT_TRUE(moved);
}
