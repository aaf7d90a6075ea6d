// SPDX-License-Identifier: Apache-2.0
#include "ovd/slow_path.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

const char* to_string(GridMode m) {
    switch (m) {
        case GridMode::grid: return "grid";
        case GridMode::fine_grained: return "fine_grained";
        case GridMode::none: return "none";
    }
    return "?";
}

GridMode grid_mode_from_string(const std::string& s) {
    for (auto m : {GridMode::grid, GridMode::fine_grained, GridMode::none})
        if (s == to_string(m)) return m;
    fail(ErrorKind::config, "unknown slow_path.grid mode '" + s + "'");
}

namespace {

void require_grid(const Tensor& patch_grid) {
    require(patch_grid.defined() && patch_grid.rank() == 2 && patch_grid.rows() == kPatchCount,
            ErrorKind::shape, "patch grid must hold 24x24 tokens");
}

void accumulate_mean(const Tensor& g, int r0, int c0, int r1, int c1, double* out) {
    const std::size_t w = g.cols();
    std::fill(out, out + w, 0.0);
    const double* data = g.data().data();
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            const double* tok = data + (static_cast<std::size_t>(r) * kGridSide + c) * w;
            for (std::size_t j = 0; j < w; ++j) out[j] += tok[j];
        }
    const double count = static_cast<double>((r1 - r0 + 1) * (c1 - c0 + 1));
    for (std::size_t j = 0; j < w; ++j) out[j] /= count;
}

}  // namespace

Tensor region_mean(const Tensor& patch_grid, int r0, int c0, int r1, int c1) {
    require_grid(patch_grid);
    const int side = static_cast<int>(kGridSide);
    require(0 <= r0 && r0 <= r1 && r1 < side && 0 <= c0 && c0 <= c1 && c1 < side, ErrorKind::box,
            "region outside the 24x24 patch grid");
    std::vector<double> out(patch_grid.cols());
    accumulate_mean(patch_grid, r0, c0, r1, c1, out.data());
    return Tensor::from({1, patch_grid.cols()}, std::move(out));
}

Tensor global_pool(const Tensor& patch_grid) {
    const int last = static_cast<int>(kGridSide) - 1;
    return region_mean(patch_grid, 0, 0, last, last);
}

Tensor make_grid_tokens(const Tensor& patch_grid) {
    require_grid(patch_grid);
    const std::size_t w = patch_grid.cols();
    std::vector<double> out(kGridTokens * w);
    std::size_t t = 0;
    for (int qr = 0; qr < 2; ++qr)
        for (int qc = 0; qc < 2; ++qc)
            for (int br = 0; br < 3; ++br)
                for (int bc = 0; bc < 3; ++bc, ++t) {
                    const int r0 = qr * 12 + br * 4, c0 = qc * 12 + bc * 4;
                    accumulate_mean(patch_grid, r0, c0, r0 + 3, c0 + 3, out.data() + t * w);
                }
    return Tensor::from({kGridTokens, w}, std::move(out));
}

Tensor make_fine_grained_tokens(const Tensor& patch_grid) {
    require_grid(patch_grid);
    const std::size_t w = patch_grid.cols();
    std::vector<double> out(kGridTokens * w);
    for (int br = 0; br < 6; ++br)
        for (int bc = 0; bc < 6; ++bc) {
            const std::size_t t = static_cast<std::size_t>(br * 6 + bc);
            accumulate_mean(patch_grid, br * 4, bc * 4, br * 4 + 3, bc * 4 + 3,
                            out.data() + t * w);
        }
    return Tensor::from({kGridTokens, w}, std::move(out));
}

void validate_boxes(std::span<const Box> boxes) {
    require(boxes.size() <= kBoxTokens, ErrorKind::box, "at most three boxes per frame");
    std::array<bool, 3> seen{};
    const int side = static_cast<int>(kGridSide);
    for (const Box& b : boxes) {
        require(0 <= b.r0 && b.r0 <= b.r1 && b.r1 < side && 0 <= b.c0 && b.c0 <= b.c1 &&
                    b.c1 < side,
                ErrorKind::box,
                "malformed box (" + std::to_string(b.r0) + "," + std::to_string(b.c0) + "," +
                    std::to_string(b.r1) + "," + std::to_string(b.c1) + ")");
        const auto k = static_cast<std::size_t>(b.kind);
        require(!seen[k], ErrorKind::box, std::string("duplicate box kind ") + to_string(b.kind));
        seen[k] = true;
    }
}

Tensor make_box_tokens(const Tensor& patch_grid, std::span<const Box> boxes) {
    require_grid(patch_grid);
    validate_boxes(boxes);
    const std::size_t w = patch_grid.cols();
    std::vector<double> out(kBoxTokens * w);
    const int last = static_cast<int>(kGridSide) - 1;
    for (std::size_t k = 0; k < kBoxTokens; ++k) {
        const Box* found = nullptr;
        for (const Box& b : boxes)
            if (static_cast<std::size_t>(b.kind) == k) found = &b;
        if (found)
            accumulate_mean(patch_grid, found->r0, found->c0, found->r1, found->c1,
                            out.data() + k * w);
        else
            accumulate_mean(patch_grid, 0, 0, last, last, out.data() + k * w);
    }
    return Tensor::from({kBoxTokens, w}, std::move(out));
}

std::vector<Box> boxes_from_scene(std::span<const Primitive> scene, double t,
                                  const JitterSpec& jitter) {
    std::array<std::optional<Box>, 3> merged;
    for (const Primitive& p : scene) {
        const auto k = static_cast<std::size_t>(p.kind);
        Box b{p.kind, p.top, p.left, p.top + p.height - 1, p.left + p.width - 1};
        if (merged[k]) {
            Box& m = *merged[k];
            m.r0 = std::min(m.r0, b.r0);
            m.c0 = std::min(m.c0, b.c0);
            m.r1 = std::max(m.r1, b.r1);
            m.c1 = std::max(m.c1, b.c1);
        } else {
            merged[k] = b;
        }
    }
    const int last = static_cast<int>(kGridSide) - 1;
    const auto tick = static_cast<std::uint64_t>(std::llround(t * kCaptureFps));
    std::vector<Box> out;
    for (std::size_t k = 0; k < merged.size(); ++k) {
        if (!merged[k]) continue;
        Box b = *merged[k];
        if (jitter.enabled) {
            Rng rng(hash_combine(jitter.seed, tick), k);
            auto shift = [&](int v) {
                return std::clamp(v + static_cast<int>(rng.below(3)) - 1, 0, last);
            };
            b.r0 = shift(b.r0);
            b.c0 = shift(b.c0);
            b.r1 = shift(b.r1);
            b.c1 = shift(b.c1);
            if (b.r0 > b.r1) std::swap(b.r0, b.r1);
            if (b.c0 > b.c1) std::swap(b.c0, b.c1);
        }
        out.push_back(b);
    }
    return out;
}

std::vector<Box> detect_boxes_synthetic(const SyntheticFrame& frame, const JitterSpec& jitter) {
    return boxes_from_scene(frame.scene, frame.t, jitter);
}

std::vector<Element> assemble_thinking_template(const TemplateInputs& in) {
    require(!in.frame_rows.empty(), ErrorKind::template_assembly, "template needs frame tokens");
    if (in.grid != GridMode::none)
        require(in.grid_rows.size() == kGridTokens, ErrorKind::template_assembly,
                "template needs 36 grid tokens");
    if (in.use_box)
        require(in.box_rows.size() == kBoxTokens, ErrorKind::template_assembly,
                "template needs 3 box tokens");
    std::vector<Element> out;
    out.push_back(Element::special(vocab::STREAM_TAG));
    for (std::size_t r : in.frame_rows) out.push_back(Element::visual(r, -1));
    if (in.grid != GridMode::none) {
        for (std::size_t i = 0; i < kGridTokens; ++i) {
            out.push_back(Element::visual(in.grid_rows[i], -1));
            if (in.grid == GridMode::grid && i % 9 == 8)
                out.push_back(Element::special(vocab::FRAME_SEP));
        }
    }
    out.push_back(Element::special(vocab::USER_TAG));
    out.push_back(Element::special(vocab::FOCUS_PHRASE));
    if (in.use_box)
        for (std::size_t r : in.box_rows) out.push_back(Element::visual(r, -1));
    out.push_back(Element::special(vocab::RESPOND));
    return out;
}

}  // namespace ovd
