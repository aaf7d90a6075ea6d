// SPDX-License-Identifier: Apache-2.0
#include "ovd/dropping.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

const char* to_string(PlacementPolicy p) {
    switch (p) {
        case PlacementPolicy::all: return "all";
        case PlacementPolicy::interleaved: return "interleaved";
        case PlacementPolicy::deep: return "deep";
        case PlacementPolicy::interleaved_and_deep: return "interleaved_and_deep";
        case PlacementPolicy::none: return "none";
    }
    return "?";
}

PlacementPolicy placement_policy_from_string(const std::string& s) {
    for (auto p : {PlacementPolicy::all, PlacementPolicy::interleaved, PlacementPolicy::deep,
                   PlacementPolicy::interleaved_and_deep, PlacementPolicy::none})
        if (s == to_string(p)) return p;
    fail(ErrorKind::config, "unknown placement policy '" + s + "'");
}

const char* to_string(SelectionMode m) {
    switch (m) {
        case SelectionMode::per_frame: return "per_frame";
        case SelectionMode::global_percentile: return "global_percentile";
        case SelectionMode::random: return "random";
    }
    return "?";
}

SelectionMode selection_mode_from_string(const std::string& s) {
    for (auto m : {SelectionMode::per_frame, SelectionMode::global_percentile, SelectionMode::random})
        if (s == to_string(m)) return m;
    fail(ErrorKind::config, "unknown selection mode '" + s + "'");
}

void validate_dropping(const DroppingConfig& c) {
    require(c.beta >= 0.0 && c.beta < 1.0, ErrorKind::config,
            "dropping.beta must lie in [0, 1), got " + std::to_string(c.beta));
}

std::vector<std::size_t> placement_layers(std::size_t n_layers, PlacementPolicy policy) {
    std::vector<std::size_t> out;
    const bool deep = policy == PlacementPolicy::deep || policy == PlacementPolicy::interleaved_and_deep;
    if (deep)
        require(n_layers >= 3, ErrorKind::policy,
                "deep placement needs at least 3 layers, got " + std::to_string(n_layers));
    const std::size_t deep_count = (2 * n_layers + 2) / 3;  // ceil(2n/3)
    const std::size_t deep_start = n_layers - deep_count;
    for (std::size_t l = 0; l < n_layers; ++l) {
        const bool odd = l % 2 == 1;
        const bool in_deep = l >= deep_start;
        bool take = false;
        switch (policy) {
            case PlacementPolicy::all: take = true; break;
            case PlacementPolicy::interleaved: take = odd; break;
            case PlacementPolicy::deep: take = in_deep; break;
            case PlacementPolicy::interleaved_and_deep: take = odd && in_deep; break;
            case PlacementPolicy::none: take = false; break;
        }
        if (take) out.push_back(l);
    }
    return out;
}

std::size_t retained_count(std::size_t n, double beta) {
    // the epsilon keeps exact products such as 0.5 * 10 from rounding up
    const double k = std::ceil((1.0 - beta) * static_cast<double>(n) - 1e-9);
    return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

std::vector<double> routing_weights(std::span<const double> tokens, std::size_t d,
                                    std::span<const double> w_theta,
                                    std::span<const char> is_visual) {
    require(w_theta.size() == d, ErrorKind::dimension, "routing weight vector width mismatch");
    require(tokens.size() == is_visual.size() * d, ErrorKind::dimension,
            "routing_weights: token block does not match the visual mask");
    std::vector<double> out(is_visual.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!is_visual[i]) {
            out[i] = std::numeric_limits<double>::infinity();
            continue;
        }
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += w_theta[j] * tokens[i * d + j];
        out[i] = acc;
    }
    return out;
}

std::vector<char> select_retained(std::span<const double> weights, double beta) {
    require(beta >= 0.0 && beta < 1.0, ErrorKind::routing, "beta must lie in [0, 1)");
    const std::size_t n = weights.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
    std::vector<char> mask(n, 0);
    const std::size_t k = retained_count(n, beta);
    for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
    return mask;
}

double percentile_threshold(std::span<const double> weights, double beta) {
    require(!weights.empty(), ErrorKind::threshold, "percentile of an empty weight set");
    require(beta >= 0.0 && beta <= 1.0, ErrorKind::threshold, "percentile rank outside [0, 1]");
    std::vector<double> x(weights.begin(), weights.end());
    std::sort(x.begin(), x.end());
    const double h = beta * static_cast<double>(x.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= x.size()) return x.back();
    return x[lo] + (h - static_cast<double>(lo)) * (x[lo + 1] - x[lo]);
}

std::vector<char> select_random(std::size_t n, double beta, std::uint64_t seed,
                                std::size_t layer, std::size_t group_key) {
    Rng rng(hash_combine(seed, layer), group_key);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t k = retained_count(n, beta);
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
    std::vector<char> mask(n, 0);
    for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = 1;
    return mask;
}

}  // namespace ovd
