// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-layer sparsification of visual tokens: routing weights r = <w, x>,
// retention selection, and placement of routed layers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ovd {

enum class PlacementPolicy { all, interleaved, deep, interleaved_and_deep, none };
enum class SelectionMode { per_frame, global_percentile, random };

const char* to_string(PlacementPolicy p);
PlacementPolicy placement_policy_from_string(const std::string& s);
const char* to_string(SelectionMode m);
SelectionMode selection_mode_from_string(const std::string& s);

struct DroppingConfig {
    PlacementPolicy policy = PlacementPolicy::interleaved;
    double beta = 0.5;
    bool scale_by_r = true;
    SelectionMode selection = SelectionMode::per_frame;
    std::uint64_t seed = 17;  // random selection only
};

void validate_dropping(const DroppingConfig& config);

/// Indices of routed layers, ascending.
std::vector<std::size_t> placement_layers(std::size_t n_layers, PlacementPolicy policy);

/// Number of tokens kept out of n at ratio beta: ceil((1 - beta) * n).
std::size_t retained_count(std::size_t n, double beta);

/// One weight per row of a row-major [n x d] block; rows with is_visual = 0
/// get +infinity so they are never dropped.
std::vector<double> routing_weights(std::span<const double> tokens, std::size_t d,
                                    std::span<const double> w_theta,
                                    std::span<const char> is_visual);

/// Keeps the retained_count(n, beta) largest weights; ties go to the lower index.
std::vector<char> select_retained(std::span<const double> weights, double beta);

/// Linear-interpolation percentile: sorted x, h = beta * (n - 1),
/// P = x[floor h] + (h - floor h) * (x[floor h + 1] - x[floor h]).
double percentile_threshold(std::span<const double> weights, double beta);

/// Seeded uniform choice of retained_count(n, beta) out of n positions.
std::vector<char> select_random(std::size_t n, double beta, std::uint64_t seed,
                                std::size_t layer, std::size_t group_key);

struct LayerRoutingRecord {
    std::size_t layer = 0;
    std::vector<double> weights;   // per element of the call; +inf for non-visual
    std::vector<char> retained;    // per element; non-visual always 1
    std::vector<char> droppable;   // per element: visual with a routing group
    double threshold = 0.0;        // global_percentile only, NaN otherwise
};

}  // namespace ovd
