// SPDX-License-Identifier: Apache-2.0
#pragma once

// The full model: frozen encoders, trainable projections, the aggregation
// router and the language model, plus teacher-forced sequence layout.

#include <cstddef>
#include <vector>

#include "ovd/aggregation.hpp"
#include "ovd/config.hpp"
#include "ovd/dataset.hpp"
#include "ovd/encoders.hpp"
#include "ovd/model.hpp"
#include "ovd/slow_path.hpp"

namespace ovd {

struct EncodedEpisode {
    std::size_t id = 0;
    std::vector<FrameBundle> bundles;
    std::vector<Query> queries;
    std::vector<Turn> turns;
    double duration = 0.0;  // after trimming
};

class Assistant {
public:
    explicit Assistant(const RunConfig& config);

    const RunConfig& config() const noexcept { return config_; }
    AlignOptions align_options() const;

    /// Fused, projected tokens of one bundle, [tokens_per_frame x d_model].
    Tensor frame_tokens(const FrameBundle& bundle) const;

    struct KeyframeTokens {
        Tensor grid;  // [36 x d_model], undefined when grid mode is none
        Tensor box;   // [3 x d_model], undefined when boxes are off
    };
    /// Grid and box tokens of a keyframe, projected by the general-stream
    /// projection; adds no parameters.
    KeyframeTokens keyframe_tokens(const FrameBundle& bundle) const;

    std::size_t tokens_per_frame() const { return router.output_tokens(); }

    EncodedEpisode encode(const StreamSample& sample) const;

    /// Every trainable tensor in a fixed order.
    ParameterSet parameters() const;
    /// Switches dropping behaviour (policy, beta, selection) in place.
    void set_dropping(const DroppingConfig& dropping);

    SyntheticEncoders encoders;
    Projection general_proj;
    Projection ego_proj;
    AggregationRouter router;
    ToyLM lm;

private:
    RunConfig config_;
};

struct LayoutOptions {
    bool with_template = false;
    bool supervise_in_response = false;
    bool supervise_after_query = true;
};

LayoutOptions training_layout(const RunConfig& config);
LayoutOptions evaluation_layout(const RunConfig& config);

/// Teacher-forced episode sequence and bookkeeping for the metrics.
struct SequenceBuild {
    InterleavedSequence seq;
    std::vector<std::size_t> decision_positions;  // frame-final position per bundle
    std::vector<char> corrupted;                  // per position: LM target of a corrupted turn
};

/// Query tokens precede bundle j where j is the first bundle whose last frame
/// (at 0.5 j + 0.375 s) comes strictly after the query time.
std::size_t query_bundle(double query_time);
/// Bundle at which a turn's response is expected.
std::size_t turn_bundle(double response_time);

SequenceBuild build_sequence(const Assistant& assistant, const EncodedEpisode& episode,
                             const LayoutOptions& options);

}  // namespace ovd
