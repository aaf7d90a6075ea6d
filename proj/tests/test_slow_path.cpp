// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>

#include "ovd/assistant.hpp"
#include "ovd/checkpoint.hpp"
#include "ovd/dataset.hpp"
#include "ovd/dialogue.hpp"
#include "ovd/error.hpp"
#include "ovd/slow_path.hpp"
#include "test_util.hpp"

using namespace ovd;

namespace {

constexpr std::size_t W = 5;

// value(r, c) per channel from a function of the patch position
template <class F>
Tensor grid_of(F&& value) {
    std::vector<double> v(kPatchCount * W);
    for (std::size_t r = 0; r < kGridSide; ++r)
        for (std::size_t c = 0; c < kGridSide; ++c)
            for (std::size_t k = 0; k < W; ++k)
                v[(r * kGridSide + c) * W + k] = value(static_cast<int>(r), static_cast<int>(c), k);
    return Tensor::from({kPatchCount, W}, std::move(v));
}

std::vector<double> row(const Tensor& t, std::size_t i) {
    return {t.data().begin() + i * t.cols(), t.data().begin() + (i + 1) * t.cols()};
}

template <class F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::io;
}

}  // namespace

TEST(GridTokens, ConstantGridGivesIdenticalTokens) {
    const Tensor g = grid_of([](int, int, std::size_t k) { return 1.5 + k; });
    for (const Tensor& t : {make_grid_tokens(g), make_fine_grained_tokens(g)}) {
        ASSERT_EQ(t.rows(), kGridTokens);
        for (std::size_t i = 0; i < kGridTokens; ++i) EXPECT_EQ(row(t, i), row(t, 0));
    }
}

TEST(GridTokens, QuadrantConstantSubframes) {
    const double q[4] = {1, -2, 3.5, 7};
    const Tensor g = grid_of([&](int r, int c, std::size_t) { return q[(r >= 12) * 2 + (c >= 12)]; });
    const Tensor t = make_grid_tokens(g);
    for (std::size_t s = 0; s < kGridSubframes; ++s)
        for (std::size_t i = 0; i < 9; ++i)
            for (std::size_t k = 0; k < W; ++k) EXPECT_EQ(t.at(s * 9 + i, k), q[s]);
    // the fine-grained layout holds the same multiset in another order
    const Tensor f = make_fine_grained_tokens(g);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < kGridTokens; ++i) a.push_back(t.at(i, 0)), b.push_back(f.at(i, 0));
    EXPECT_NE(a, b);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(GridTokens, BlockPoolingOracle) {
    Rng rng(3, 0);
    const Tensor g = ovd::test::random_tensor({kPatchCount, W}, rng);
    const Tensor t = make_grid_tokens(g);
    // sub-frame 1 (top-right), token (1, 2): rows 4..7, cols 12 + 8..11
    for (std::size_t k = 0; k < W; ++k) {
        double s = 0.0;
        for (int r = 4; r < 8; ++r)
            for (int c = 20; c < 24; ++c) s += g.at(r * kGridSide + c, k);
        EXPECT_NEAR(t.at(9 + 1 * 3 + 2, k), s / 16.0, 1e-12);
    }
}

TEST(GridTokens, MeanOfTokensIsMeanOfPatches) {
    Rng rng(4, 0);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor g = ovd::test::random_tensor({kPatchCount, W}, rng, 3.0);
        const Tensor pooled = global_pool(g);
        for (const Tensor& t : {make_grid_tokens(g), make_fine_grained_tokens(g)})
            for (std::size_t k = 0; k < W; ++k) {
                double s = 0.0;
                for (std::size_t i = 0; i < kGridTokens; ++i) s += t.at(i, k);
                EXPECT_NEAR(s / kGridTokens, pooled[k], 1e-12);
            }
    }
}

TEST(BoxTokens, Examples) {
    Rng rng(5, 0);
    const Tensor g = ovd::test::random_tensor({kPatchCount, W}, rng);
    const std::vector<Box> one = {{RegionKind::object, 7, 9, 7, 9}};
    const Tensor t1 = make_box_tokens(g, one);
    EXPECT_EQ(row(t1, 2), row(g, 7 * kGridSide + 9));
    EXPECT_EQ(row(t1, 0), row(global_pool(g), 0));
    EXPECT_EQ(row(t1, 1), row(global_pool(g), 0));

    const std::vector<Box> square = {{RegionKind::hand_right, 2, 3, 3, 4}};
    const Tensor t2 = make_box_tokens(g, square);
    for (std::size_t k = 0; k < W; ++k) {
        const double m = (g.at(2 * 24 + 3, k) + g.at(2 * 24 + 4, k) + g.at(3 * 24 + 3, k) +
                          g.at(3 * 24 + 4, k)) / 4.0;
        EXPECT_NEAR(t2.at(1, k), m, 1e-15);
    }

    const Tensor none = make_box_tokens(g, {});
    for (std::size_t i = 0; i < kBoxTokens; ++i) EXPECT_EQ(row(none, i), row(global_pool(g), 0));
}

TEST(BoxTokens, FullFrameBoxEqualsFallback) {
    Rng rng(6, 0);
    const Tensor g = ovd::test::random_tensor({kPatchCount, W}, rng);
    const std::vector<Box> full = {{RegionKind::hand_left, 0, 0, 23, 23}};
    EXPECT_EQ(row(make_box_tokens(g, full), 0), row(global_pool(g), 0));
}

TEST(BoxTokens, Validation) {
    EXPECT_EQ(kind_of([] { validate_boxes(std::vector<Box>{{RegionKind::object, 3, 0, 2, 0}}); }),
              ErrorKind::box);
    EXPECT_EQ(kind_of([] { validate_boxes(std::vector<Box>{{RegionKind::object, 0, 0, 0, 24}}); }),
              ErrorKind::box);
    EXPECT_EQ(kind_of([] {
                  validate_boxes(std::vector<Box>{{RegionKind::object, 0, 0, 1, 1},
                                                  {RegionKind::object, 2, 2, 3, 3}});
              }),
              ErrorKind::box);
    EXPECT_EQ(kind_of([] {
                  validate_boxes(std::vector<Box>(4, Box{RegionKind::object, 0, 0, 0, 0}));
              }),
              ErrorKind::box);
}

TEST(SyntheticDetector, Examples) {
    SyntheticFrame f;
    f.t = 1.25;
    EXPECT_TRUE(detect_boxes_synthetic(f).empty());
    f.scene = {{RegionKind::hand_left, 2, 2, 3, 3}, {RegionKind::hand_right, 2, 15, 3, 3},
               {RegionKind::object, 10, 10, 4, 5}, {RegionKind::object, 16, 8, 2, 2}};
    const auto boxes = detect_boxes_synthetic(f);
    ASSERT_EQ(boxes.size(), 3u);
    EXPECT_EQ(boxes[0], (Box{RegionKind::hand_left, 2, 2, 4, 4}));
    EXPECT_EQ(boxes[2], (Box{RegionKind::object, 10, 8, 17, 14}));
    const JitterSpec jitter{true, 77};
    const auto j1 = detect_boxes_synthetic(f, jitter);
    EXPECT_EQ(j1, detect_boxes_synthetic(f, jitter));
    bool moved = false;
    for (std::uint64_t s = 0; s < 10; ++s) moved |= detect_boxes_synthetic(f, {true, s}) != boxes;
    EXPECT_TRUE(moved);
    for (const Box& b : j1) {
        EXPECT_LE(std::abs(b.r0 - boxes[static_cast<int>(b.kind)].r0), 1);
        EXPECT_LE(std::abs(b.c1 - boxes[static_cast<int>(b.kind)].c1), 1);
    }
    validate_boxes(j1);
}

TEST(ThinkingTemplate, ElementSequence) {
    TemplateInputs in;
    for (std::size_t i = 0; i < 10; ++i) in.frame_rows.push_back(i);
    for (std::size_t i = 0; i < 36; ++i) in.grid_rows.push_back(10 + i);
    in.box_rows = {46, 47, 48};
    const auto els = assemble_thinking_template(in);

    std::vector<std::string> kinds;
    auto push = [&](const char* k, std::size_t n) { for (std::size_t i = 0; i < n; ++i) kinds.push_back(k); };
    push("STREAM", 1);
    push("v", 10);
    for (int s = 0; s < 4; ++s) push("v", 9), push("SEP", 1);
    push("USER", 1), push("FOCUS", 1), push("v", 3), push("RESPOND", 1);
    ASSERT_EQ(els.size(), kinds.size());
    std::size_t visual = 0, row = 0;
    for (std::size_t i = 0; i < els.size(); ++i) {
        const Element& e = els[i];
        const std::string& k = kinds[i];
        if (k == "v") {
            ASSERT_EQ(e.kind, ElementKind::visual) << i;
            EXPECT_EQ(e.row, row++);
            EXPECT_EQ(e.group, -1);
            ++visual;
            continue;
        }
        ASSERT_EQ(e.kind, ElementKind::special) << i;
        const std::size_t want = k == "STREAM" ? vocab::STREAM_TAG : k == "SEP" ? vocab::FRAME_SEP
                                 : k == "USER" ? vocab::USER_TAG : k == "FOCUS" ? vocab::FOCUS_PHRASE
                                                                                : vocab::RESPOND;
        EXPECT_EQ(e.token, want) << i;
    }
    EXPECT_EQ(visual, 49u);

    in.grid = GridMode::fine_grained;
    const auto fine = assemble_thinking_template(in);
    EXPECT_EQ(fine.size(), els.size() - 4);
    EXPECT_EQ(std::count_if(fine.begin(), fine.end(),
                            [](const Element& e) { return e.kind == ElementKind::special &&
                                                          e.token == vocab::FRAME_SEP; }),
              0);
    in.grid = GridMode::none;
    in.use_box = false;
    EXPECT_EQ(assemble_thinking_template(in).size(), 1 + 10 + 2 + 1u);
    in.frame_rows.clear();
    EXPECT_EQ(kind_of([&] { assemble_thinking_template(in); }), ErrorKind::template_assembly);
}

TEST(ThinkingTemplate, TrainingFreeAndOnlyAtRespondFrames) {
    RunConfig cfg = ovd::test::small_config();
    const Assistant a(cfg);
    const auto before = parameter_checksum(a.parameters());
    DataConfig d;
    d.duration = 3.0;
    const auto sample = generate_episode(1, 0, d);
    EngineOptions opt = engine_options(cfg);
    opt.record = true;
    opt.threshold = 0.0;
    const auto run = run_episode(a, sample, opt);
    EXPECT_EQ(parameter_checksum(a.parameters()), before);
    // every respond frame is followed by the template; count STREAM_TAG openings
    std::size_t templates = 0;
    for (const Element& e : run.transcript)
        templates += e.kind == ElementKind::special && e.token == vocab::FOCUS_PHRASE;
    EXPECT_EQ(templates, run.log.turns.size());
    for (const auto& t : run.log.turns) EXPECT_TRUE(t.template_used);

    EngineOptions silent = opt;
    silent.threshold = 1.0;
    const auto quiet = run_episode(a, sample, silent);
    EXPECT_TRUE(quiet.log.turns.empty());
    for (const Element& e : quiet.transcript)
        EXPECT_FALSE(e.kind == ElementKind::special && e.token == vocab::FOCUS_PHRASE);
}
