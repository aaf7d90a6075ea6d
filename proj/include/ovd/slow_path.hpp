// SPDX-License-Identifier: Apache-2.0
#pragma once

// Keyframe augmentation: grid tokens, box tokens and the thinking template.
// Nothing here is trainable.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ovd/encoders.hpp"
#include "ovd/model.hpp"
#include "ovd/tensor.hpp"

namespace ovd {

enum class GridMode { grid, fine_grained, none };

const char* to_string(GridMode m);
GridMode grid_mode_from_string(const std::string& s);

inline constexpr std::size_t kGridTokens = 36;
inline constexpr std::size_t kGridSubframes = 4;
inline constexpr std::size_t kBoxTokens = 3;

/// Mean patch token over the inclusive rectangle [r0, r1] x [c0, c1], [1 x w].
Tensor region_mean(const Tensor& patch_grid, int r0, int c0, int r1, int c1);
Tensor global_pool(const Tensor& patch_grid);

/// [36 x w]: quadrants in order top-left, top-right, bottom-left,
/// bottom-right, each pooled over 4x4 patch blocks into 3x3 row-major tokens.
Tensor make_grid_tokens(const Tensor& patch_grid);
/// [36 x w]: one 6x6 pooling of the whole grid, row-major.
Tensor make_fine_grained_tokens(const Tensor& patch_grid);
/// [3 x w] in the order hand_left, hand_right, object; absent kinds take the
/// global-pool token.
Tensor make_box_tokens(const Tensor& patch_grid, std::span<const Box> boxes);

void validate_boxes(std::span<const Box> boxes);

struct JitterSpec {
    bool enabled = false;
    std::uint64_t seed = 0;
};

/// Oracle detector: one box per region kind present in the scene (the union
/// when a kind appears more than once); jitter moves each edge by -1, 0 or +1.
std::vector<Box> detect_boxes_synthetic(const SyntheticFrame& frame, const JitterSpec& jitter = {});
std::vector<Box> boxes_from_scene(std::span<const Primitive> scene, double t,
                                  const JitterSpec& jitter = {});

/// Rows of the visual tensor that hold each part of the template.
struct TemplateInputs {
    std::vector<std::size_t> frame_rows;  // the keyframe's tokens
    std::vector<std::size_t> grid_rows;   // 36 rows unless grid is none
    GridMode grid = GridMode::grid;
    std::vector<std::size_t> box_rows;    // 3 rows unless use_box is false
    bool use_box = true;
};

/// STREAM_TAG, frame tokens, grid tokens (a FRAME_SEP after each 9-token
/// sub-frame in grid mode), USER_TAG, FOCUS_PHRASE, box tokens, RESPOND.
/// Template visual tokens carry routing group -1.
std::vector<Element> assemble_thinking_template(const TemplateInputs& inputs);

}  // namespace ovd
