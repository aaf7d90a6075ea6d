// SPDX-License-Identifier: Apache-2.0
#pragma once

// Analytic multiply-accumulate count of a forward pass over one sequence.
//
// Per layer over the m participating rows:
//   projections  4 m d^2        (q, k, v, output)
//   attention    d m (m + 1)    (causal QK^T and PV; row i sees i + 1 keys)
//   ffn          2 m d d_ff
//   router       d per droppable token, routed layers only
// plus the output head N d V. Routed layers charge only retained rows, with
// retained_count(n_g, beta) kept in every routing group g.

#include <cstddef>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ovd/dropping.hpp"
#include "ovd/model.hpp"

namespace ovd {

/// Per-position composition: group id of each droppable visual token, -1 for
/// everything else (text, specials, template visual tokens).
struct SeqProfile {
    std::vector<int> groups;

    std::size_t size() const noexcept { return groups.size(); }
    static SeqProfile from_elements(std::span<const Element> elements);
};

struct LayerFlops {
    std::size_t layer = 0;
    bool routed = false;
    std::uint64_t tokens = 0;
    std::uint64_t projection = 0;
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t router = 0;
    std::uint64_t total() const noexcept { return projection + attention + ffn + router; }
};

struct FlopsReport {
    std::uint64_t total = 0;
    std::uint64_t head = 0;
    std::vector<LayerFlops> per_layer;
    nlohmann::json to_json() const;
};

FlopsReport flops_estimate(const ModelConfig& model, double beta, PlacementPolicy policy,
                           const SeqProfile& profile);

/// Profile of a synthetic episode: n_frames frames of `tokens_per_frame`
/// visual tokens plus a separator, `responses` of them followed by a turn of
/// `response_len` text tokens, TURN_END, and either a bare RESPOND or the
/// keyframe template (49 visual tokens and 8 control elements).
SeqProfile episode_profile(std::size_t n_frames, std::size_t tokens_per_frame,
                           std::size_t responses, std::size_t response_len, bool with_template);

}  // namespace ovd
