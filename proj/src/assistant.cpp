// SPDX-License-Identifier: Apache-2.0
#include "ovd/assistant.hpp"

#include <cmath>
#include <map>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

namespace {

EncoderConfig encoder_config(const RunConfig& c) { return c.encoders; }

Rng param_rng(const RunConfig& c, std::uint64_t stream) { return Rng(c.model.seed, stream); }

}  // namespace

Assistant::Assistant(const RunConfig& config)
    : encoders(encoder_config(config)), config_(config) {
    config.validate();
    Rng rg = param_rng(config, 0x9e1);
    Rng re = param_rng(config, 0xe90);
    Rng rr = param_rng(config, 0x707);
    general_proj = Projection(config.encoders.width, config.model.d_model, rg);
    ego_proj = Projection(config.encoders.width, config.model.d_model, re);
    router = AggregationRouter(config.aggregation, config.model.d_model, rr);
    lm = ToyLM(config.model, config.dropping);
}

AlignOptions Assistant::align_options() const {
    return {config_.aggregation.general_mode, config_.aggregation.ego_mode, false};
}

Tensor Assistant::frame_tokens(const FrameBundle& bundle) const {
    return router.aggregate(general_proj.apply(bundle.general_tokens),
                            ego_proj.apply(bundle.ego_tokens));
}

Assistant::KeyframeTokens Assistant::keyframe_tokens(const FrameBundle& bundle) const {
    const Tensor patches =
        bundle.patch_grid.defined() ? bundle.patch_grid : encoders.patch_grid(bundle.keyframe);
    KeyframeTokens out;
    const SlowPathConfig& sp = config_.slow_path;
    if (sp.grid == GridMode::grid) out.grid = general_proj.apply(make_grid_tokens(patches));
    if (sp.grid == GridMode::fine_grained)
        out.grid = general_proj.apply(make_fine_grained_tokens(patches));
    if (sp.box) {
        const std::vector<Box> boxes =
            bundle.keyframe.boxes ? *bundle.keyframe.boxes
                                  : detect_boxes_synthetic(bundle.keyframe,
                                                           JitterSpec{sp.jitter, sp.jitter_seed});
        out.box = general_proj.apply(make_box_tokens(patches, boxes));
    }
    return out;
}

EncodedEpisode Assistant::encode(const StreamSample& sample) const {
    EncodedEpisode e;
    e.id = sample.id;
    std::vector<SyntheticFrame> rendered;
    const std::vector<SyntheticFrame>* frames = &sample.frames;
    if (sample.frames.empty()) {
        StreamSample copy = sample;
        copy.render();
        rendered = std::move(copy.frames);
        frames = &rendered;
    }
    e.bundles = align_streams(encoders, *frames, align_options());
    e.duration = trimmed_duration(frames->size());
    e.queries = sample.queries;
    for (const Turn& t : sample.turns)
        if (t.t < e.duration - 1e-9) e.turns.push_back(t);
    return e;
}

ParameterSet Assistant::parameters() const {
    ParameterSet out;
    general_proj.collect("proj.general", out);
    ego_proj.collect("proj.ego", out);
    router.collect("router", out);
    for (NamedTensor& p : lm.parameters()) out.push_back(std::move(p));
    return out;
}

void Assistant::set_dropping(const DroppingConfig& dropping) {
    lm.set_dropping(dropping);
    config_.dropping = dropping;
}

LayoutOptions training_layout(const RunConfig& c) {
    return {c.slow_path.enabled && c.slow_path.train_with_template, c.stream.supervise_in_response,
            c.stream.supervise_after_query};
}

LayoutOptions evaluation_layout(const RunConfig& c) {
    return {c.slow_path.enabled, c.stream.supervise_in_response, c.stream.supervise_after_query};
}

std::size_t query_bundle(double query_time) {
    // smallest j with 0.5 j + 0.375 > t
    const double last = kBundlePeriod - kFramePeriod;
    if (query_time < last) return 0;
    return static_cast<std::size_t>(std::floor((query_time - last) / kBundlePeriod + 1e-9)) + 1;
}

std::size_t turn_bundle(double response_time) {
    return static_cast<std::size_t>(std::llround(response_time / kBundlePeriod));
}

SequenceBuild build_sequence(const Assistant& assistant, const EncodedEpisode& episode,
                             const LayoutOptions& options) {
    SequenceBuild out;
    InterleavedSequence& seq = out.seq;
    std::vector<Tensor> visual_parts;
    std::size_t n_visual = 0;

    auto push = [&](const Element& e, bool stream, bool lm, std::size_t target, bool corrupted) {
        seq.elements.push_back(e);
        seq.stream.push_back(stream);
        seq.lm.push_back(lm);
        seq.target.push_back(target);
        out.corrupted.push_back(corrupted);
    };
    auto add_visual = [&](const Tensor& rows) {
        const std::size_t first = n_visual;
        visual_parts.push_back(rows);
        n_visual += rows.rows();
        return first;
    };

    std::multimap<std::size_t, const Query*> queries;
    for (const Query& q : episode.queries) queries.emplace(query_bundle(q.t), &q);
    std::map<std::size_t, const Turn*> turns;
    for (const Turn& t : episode.turns) {
        const std::size_t b = turn_bundle(t.t);
        require(b < episode.bundles.size(), ErrorKind::supervision,
                "turn time beyond the trimmed stream");
        require(!turns.count(b), ErrorKind::supervision, "two turns in one bundle");
        turns[b] = &t;
    }

    bool after_query = false;
    for (std::size_t i = 0; i < episode.bundles.size(); ++i) {
        const FrameBundle& bundle = episode.bundles[i];
        auto [qb, qe] = queries.equal_range(i);
        for (auto it = qb; it != qe; ++it) {
            push(Element::special(vocab::USER_TAG), false, false, 0, false);
            for (std::size_t tok : it->second->tokens) push(Element::text(tok), false, false, 0, false);
            after_query = true;
        }

        const Tensor frame = assistant.frame_tokens(bundle);
        const std::size_t first = add_visual(frame);
        const std::size_t n_frame = frame.rows();
        std::vector<std::size_t> frame_rows(n_frame);
        for (std::size_t k = 0; k < n_frame; ++k) frame_rows[k] = first + k;

        const auto turn_it = turns.find(i);
        const bool respond = turn_it != turns.end();
        const bool supervise = respond || !after_query || options.supervise_after_query;
        for (std::size_t k = 0; k < n_frame; ++k) {
            const bool last = k + 1 == n_frame;
            push(Element::visual(first + k, static_cast<int>(i)), last && supervise, false,
                 last ? (respond ? vocab::RESPOND : vocab::SILENCE) : 0, false);
        }
        out.decision_positions.push_back(seq.size() - 1);

        if (!respond) {
            push(Element::special(vocab::FRAME_SEP), false, false, 0, false);
            continue;
        }
        after_query = false;
        const Turn& turn = *turn_it->second;
        std::vector<Element> head;
        if (options.with_template) {
            const auto kf = assistant.keyframe_tokens(bundle);
            TemplateInputs in;
            in.frame_rows = frame_rows;
            in.grid = assistant.config().slow_path.grid;
            in.use_box = assistant.config().slow_path.box;
            if (kf.grid.defined()) {
                const std::size_t g0 = add_visual(kf.grid);
                for (std::size_t k = 0; k < kf.grid.rows(); ++k) in.grid_rows.push_back(g0 + k);
            }
            if (kf.box.defined()) {
                const std::size_t b0 = add_visual(kf.box);
                for (std::size_t k = 0; k < kf.box.rows(); ++k) in.box_rows.push_back(b0 + k);
            }
            head = assemble_thinking_template(in);
        } else {
            head.push_back(Element::special(vocab::RESPOND));
        }
        for (std::size_t k = 0; k + 1 < head.size(); ++k) push(head[k], false, false, 0, false);
        // RESPOND predicts the first response token, each token the next
        std::vector<std::size_t> targets = turn.tokens;
        targets.push_back(vocab::TURN_END);
        push(head.back(), false, true, targets[0], turn.corrupted);
        for (std::size_t k = 0; k < turn.tokens.size(); ++k)
            push(Element::text(turn.tokens[k]), false, true, targets[k + 1], turn.corrupted);
        push(Element::special(vocab::TURN_END), options.supervise_in_response, false,
             vocab::SILENCE, false);
    }
    seq.visual = visual_parts.empty() ? Tensor::zeros({0, assistant.config().model.d_model})
                                      : concat_rows(visual_parts);
    return out;
}

}  // namespace ovd
