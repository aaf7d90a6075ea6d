// SPDX-License-Identifier: Apache-2.0
#include "ovd/aggregation.hpp"

#include <vector>

#include "ovd/error.hpp"
#include "ovd/init.hpp"

namespace ovd {

const char* to_string(AggregationVariant v) {
    switch (v) {
        case AggregationVariant::concat: return "concat";
        case AggregationVariant::addition: return "addition";
        case AggregationVariant::learnable_weighting: return "learnable_weighting";
        case AggregationVariant::adaptive_routing: return "adaptive_routing";
    }
    return "?";
}

AggregationVariant aggregation_variant_from_string(const std::string& s) {
    for (auto v : {AggregationVariant::concat, AggregationVariant::addition,
                   AggregationVariant::learnable_weighting, AggregationVariant::adaptive_routing})
        if (s == to_string(v)) return v;
    fail(ErrorKind::config, "unknown aggregation variant '" + s + "'");
}

const char* to_string(GateActivation a) {
    return a == GateActivation::sigmoid ? "sigmoid" : "relu";
}

GateActivation gate_activation_from_string(const std::string& s) {
    if (s == "sigmoid") return GateActivation::sigmoid;
    if (s == "relu") return GateActivation::relu;
    fail(ErrorKind::config, "unknown gate activation '" + s + "'");
}

const char* to_string(GateGranularity g) {
    return g == GateGranularity::per_position ? "per_position" : "per_frame";
}

GateGranularity gate_granularity_from_string(const std::string& s) {
    if (s == "per_position") return GateGranularity::per_position;
    if (s == "per_frame") return GateGranularity::per_frame;
    fail(ErrorKind::config, "unknown gate granularity '" + s + "'");
}

namespace {

void require_ten(const Tensor& frm_s, const Tensor& frm_t, const char* what) {
    require(frm_s.rows() == kFrameTokens && frm_t.rows() == kFrameTokens, ErrorKind::strategy,
            std::string(what) + " needs 10 tokens from both encoders");
    require(frm_s.cols() == frm_t.cols(), ErrorKind::dimension,
            std::string(what) + ": stream widths differ");
}

}  // namespace

Tensor aggregate_adaptive(const Tensor& frm_s, const Tensor& frm_t, const Tensor& w) {
    require_ten(frm_s, frm_t, "adaptive aggregation");
    require(w.rank() == 2 && w.rows() == kFrameTokens && w.cols() == 2, ErrorKind::dimension,
            "adaptive aggregation weights must be 10 x 2");
    return add(scale_rows(frm_s, column(w, 0)), scale_rows(frm_t, column(w, 1)));
}

Tensor aggregate_concat(const Tensor& frm_s, const Tensor& frm_t) {
    require(frm_s.defined() && frm_t.defined() && frm_s.rows() > 0 && frm_t.rows() > 0,
            ErrorKind::strategy, "concat needs tokens from both encoders");
    const Tensor parts[] = {frm_s, frm_t};
    return concat_rows(parts);
}

Tensor aggregate_addition(const Tensor& frm_s, const Tensor& frm_t) {
    const std::size_t ns = frm_s.rows(), nt = frm_t.rows();
    require(frm_s.cols() == frm_t.cols(), ErrorKind::dimension, "addition: stream widths differ");
    if (ns == kFrameTokens && nt == kFrameTokens) return add(frm_s, frm_t);
    if (ns == 1 && nt == 1)
        fail(ErrorKind::strategy, "addition is undefined for the (1, 1) mode pair");
    require((ns == kFrameTokens && nt == 1) || (ns == 1 && nt == kFrameTokens),
            ErrorKind::strategy, "addition supports modes (10,10), (10,1) and (1,10)");
    const Tensor& wide = ns == kFrameTokens ? frm_s : frm_t;
    const std::size_t zero = 0;
    std::vector<std::size_t> rest(kFrameTokens - 1);
    for (std::size_t i = 0; i < rest.size(); ++i) rest[i] = i + 1;
    const Tensor cls = add(gather_rows(frm_s, std::span(&zero, 1)),
                           gather_rows(frm_t, std::span(&zero, 1)));
    const Tensor parts[] = {cls, gather_rows(wide, rest)};
    return concat_rows(parts);
}

Tensor aggregate_learnable(const Tensor& frm_s, const Tensor& frm_t, const Tensor& logits) {
    require_ten(frm_s, frm_t, "learnable weighting");
    return aggregate_adaptive(frm_s, frm_t, softmax(logits, 1));
}

std::size_t fused_token_count(AggregationVariant variant, int general_mode, int ego_mode) {
    const auto gs = static_cast<std::size_t>(general_mode), es = static_cast<std::size_t>(ego_mode);
    switch (variant) {
        case AggregationVariant::concat: return gs + es;
        case AggregationVariant::addition:
        case AggregationVariant::learnable_weighting:
        case AggregationVariant::adaptive_routing: return kFrameTokens;
    }
    return 0;
}

void validate_aggregation(const AggregationConfig& c) {
    for (int m : {c.general_mode, c.ego_mode})
        require(m == 1 || m == 10, ErrorKind::config, "aggregation modes must be 1 or 10");
    switch (c.variant) {
        case AggregationVariant::concat: break;
        case AggregationVariant::addition:
            require(!(c.general_mode == 1 && c.ego_mode == 1), ErrorKind::strategy,
                    "addition is undefined for the (1, 1) mode pair");
            break;
        case AggregationVariant::learnable_weighting:
        case AggregationVariant::adaptive_routing:
            require(c.general_mode == 10 && c.ego_mode == 10, ErrorKind::strategy,
                    std::string(to_string(c.variant)) + " requires modes (10, 10)");
            break;
    }
}

AggregationRouter::AggregationRouter(const AggregationConfig& config, std::size_t d_model,
                                     Rng& rng)
    : config_(config) {
    validate_aggregation(config);
    if (config.variant == AggregationVariant::adaptive_routing) {
        const std::size_t hidden = config.hidden ? config.hidden : d_model;
        const std::size_t outs = config.granularity == GateGranularity::per_position
                                     ? kFrameTokens * 2
                                     : 2;
        w1 = affine_weight(d_model, hidden, rng);
        b1 = zero_parameter({hidden});
        w2 = affine_weight(hidden, outs, rng);
        b2 = zero_parameter({outs});
    } else if (config.variant == AggregationVariant::learnable_weighting) {
        global_logits = zero_parameter({kFrameTokens, 2});
    }
}

Tensor AggregationRouter::route_weights(const Tensor& vg) const {
    require(w1.defined(), ErrorKind::strategy, "route_weights needs the adaptive gate");
    require(vg.rank() == 2 && vg.rows() == 1, ErrorKind::dimension,
            "visual guidance must be a single token row");
    Tensor h = add_bias(matmul(vg, w1), b1);
    h = config_.activation == GateActivation::sigmoid ? sigmoid(h) : relu(h);
    const Tensor logits = add_bias(matmul(h, w2), b2);
    if (config_.granularity == GateGranularity::per_position)
        return softmax(reshape(logits, {kFrameTokens, 2}), 1);
    const std::vector<std::size_t> rows(kFrameTokens, 0);
    return gather_rows(softmax(logits, 1), rows);
}

Tensor AggregationRouter::aggregate(const Tensor& frm_s, const Tensor& frm_t) const {
    switch (config_.variant) {
        case AggregationVariant::concat: return aggregate_concat(frm_s, frm_t);
        case AggregationVariant::addition: return aggregate_addition(frm_s, frm_t);
        case AggregationVariant::learnable_weighting:
            return aggregate_learnable(frm_s, frm_t, global_logits);
        case AggregationVariant::adaptive_routing: {
            const std::size_t zero = 0;
            return aggregate_adaptive(frm_s, frm_t,
                                      route_weights(gather_rows(frm_s, std::span(&zero, 1))));
        }
    }
    fail(ErrorKind::strategy, "unknown aggregation variant");
}

std::size_t AggregationRouter::output_tokens() const {
    return fused_token_count(config_.variant, config_.general_mode, config_.ego_mode);
}

void AggregationRouter::collect(const std::string& prefix, ParameterSet& out) const {
    if (w1.defined()) {
        out.push_back({prefix + ".w1", w1});
        out.push_back({prefix + ".b1", b1});
        out.push_back({prefix + ".w2", w2});
        out.push_back({prefix + ".b2", b2});
    }
    if (global_logits.defined()) out.push_back({prefix + ".global_logits", global_logits});
}

}  // namespace ovd
