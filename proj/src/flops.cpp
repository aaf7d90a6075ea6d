// SPDX-License-Identifier: Apache-2.0
#include "ovd/flops.hpp"

#include <map>

namespace ovd {

SeqProfile SeqProfile::from_elements(std::span<const Element> elements) {
    SeqProfile p;
    p.groups.reserve(elements.size());
    for (const Element& e : elements)
        p.groups.push_back(e.kind == ElementKind::visual && e.group >= 0 ? e.group : -1);
    return p;
}

nlohmann::json FlopsReport::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerFlops& l : per_layer)
        layers.push_back({{"layer", l.layer},
                          {"routed", l.routed},
                          {"tokens", l.tokens},
                          {"projection", l.projection},
                          {"attention", l.attention},
                          {"ffn", l.ffn},
                          {"router", l.router},
                          {"total", l.total()}});
    return {{"total", total}, {"head", head}, {"per_layer", layers}};
}

FlopsReport flops_estimate(const ModelConfig& model, double beta, PlacementPolicy policy,
                           const SeqProfile& profile) {
    validate_dropping(DroppingConfig{policy, beta, true, SelectionMode::per_frame, 0});
    const std::uint64_t d = model.d_model, ff = model.d_model * model.ffn_mult, V = model.vocab;
    const std::uint64_t n = profile.size();

    std::map<int, std::uint64_t> group_sizes;
    std::uint64_t fixed = 0, droppable = 0;
    for (int g : profile.groups) {
        if (g >= 0) {
            ++group_sizes[g];
            ++droppable;
        } else {
            ++fixed;
        }
    }
    std::uint64_t routed_tokens = fixed;
    for (const auto& [g, size] : group_sizes) routed_tokens += retained_count(size, beta);

    std::vector<char> routed(model.n_layers, 0);
    for (std::size_t l : placement_layers(model.n_layers, policy)) routed[l] = 1;

    FlopsReport r;
    for (std::size_t l = 0; l < model.n_layers; ++l) {
        LayerFlops lf;
        lf.layer = l;
        lf.routed = routed[l] != 0;
        const std::uint64_t m = lf.routed ? routed_tokens : n;
        lf.tokens = m;
        lf.projection = 4 * m * d * d;
        lf.attention = d * m * (m + 1);
        lf.ffn = 2 * m * d * ff;
        lf.router = lf.routed ? d * droppable : 0;
        r.total += lf.total();
        r.per_layer.push_back(lf);
    }
    r.head = n * d * V;
    r.total += r.head;
    return r;
}

SeqProfile episode_profile(std::size_t n_frames, std::size_t tokens_per_frame,
                           std::size_t responses, std::size_t response_len, bool with_template) {
    SeqProfile p;
    for (std::size_t f = 0; f < n_frames; ++f) {
        for (std::size_t t = 0; t < tokens_per_frame; ++t) p.groups.push_back(static_cast<int>(f));
        if (f < responses) {
            // STREAM_TAG, 10 frame, (9 grid + SEP) x 4, USER_TAG, FOCUS, 3 box, RESPOND
            const std::size_t tmpl = with_template ? 1 + 10 + 40 + 2 + 3 + 1 : 1;
            p.groups.insert(p.groups.end(), tmpl + response_len + 1, -1);
        } else {
            p.groups.push_back(-1);
        }
    }
    return p;
}

}  // namespace ovd
