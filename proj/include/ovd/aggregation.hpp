// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fusion of the general-view and egocentric token streams of one frame.

#include <cstddef>
#include <string>

#include "ovd/rng.hpp"
#include "ovd/tensor.hpp"

namespace ovd {

enum class AggregationVariant { concat, addition, learnable_weighting, adaptive_routing };
enum class GateActivation { sigmoid, relu };
/// per_frame uses one weight pair for all ten positions (compatibility mode).
enum class GateGranularity { per_position, per_frame };

const char* to_string(AggregationVariant v);
AggregationVariant aggregation_variant_from_string(const std::string& s);
const char* to_string(GateActivation a);
GateActivation gate_activation_from_string(const std::string& s);
const char* to_string(GateGranularity g);
GateGranularity gate_granularity_from_string(const std::string& s);

struct AggregationConfig {
    AggregationVariant variant = AggregationVariant::adaptive_routing;
    int general_mode = 10;
    int ego_mode = 10;
    GateGranularity granularity = GateGranularity::per_position;
    GateActivation activation = GateActivation::sigmoid;
    std::size_t hidden = 0;  // 0 means d_model
};

inline constexpr std::size_t kFrameTokens = 10;

/// Position-wise convex combination w[:,0]*frm_s + w[:,1]*frm_t.
Tensor aggregate_adaptive(const Tensor& frm_s, const Tensor& frm_t, const Tensor& w);
Tensor aggregate_concat(const Tensor& frm_s, const Tensor& frm_t);
Tensor aggregate_addition(const Tensor& frm_s, const Tensor& frm_t);
/// Same rule as adaptive with free per-position logits [10 x 2].
Tensor aggregate_learnable(const Tensor& frm_s, const Tensor& frm_t, const Tensor& logits);

/// Tokens produced per frame by a variant for a mode pair.
std::size_t fused_token_count(AggregationVariant variant, int general_mode, int ego_mode);
void validate_aggregation(const AggregationConfig& config);

class AggregationRouter {
public:
    AggregationRouter() = default;
    AggregationRouter(const AggregationConfig& config, std::size_t d_model, Rng& rng);

    const AggregationConfig& config() const noexcept { return config_; }

    /// Gate weights [10 x 2] from the visual-guidance token (a [1 x d] row):
    /// softmax over the stream axis of W2 act(W1 vg + b1) + b2.
    Tensor route_weights(const Tensor& vg) const;
    /// Fuses projected streams; frm_s row 0 is the visual guidance.
    Tensor aggregate(const Tensor& frm_s, const Tensor& frm_t) const;
    std::size_t output_tokens() const;

    void collect(const std::string& prefix, ParameterSet& out) const;

    Tensor w1, b1, w2, b2;  // gate (adaptive_routing)
    Tensor global_logits;   // learnable_weighting, [10 x 2]

private:
    AggregationConfig config_;
};

}  // namespace ovd
