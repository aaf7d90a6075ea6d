// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "ovd/config.hpp"
#include "ovd/rng.hpp"
#include "ovd/tensor.hpp"

namespace ovd::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool param = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = scale * rng.normal();
    return param ? Tensor::parameter(std::move(shape), std::move(v))
                 : Tensor::from(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return a.size() == b.size() ? m : INFINITY;
}

/// Small, fast configuration for tests that run the whole model.
inline RunConfig small_config() {
    RunConfig c;
    c.model.d_model = 32;
    c.model.n_layers = 2;
    c.model.n_heads = 2;
    c.encoders.width = 16;
    c.dropping.policy = PlacementPolicy::all;
    return c;
}

}  // namespace ovd::test

#include "ovd/model.hpp"

namespace ovd::test {

/// Random episode-shaped sequence: frames of `tokens` visual elements
/// (routing group = frame index) closed by FRAME_SEP, with occasional
/// responses of 1-3 text tokens and TURN_END. Supervision follows the
/// training layout.
inline InterleavedSequence random_sequence(Rng& rng, std::size_t d, std::size_t n_frames,
                                           std::size_t tokens = 10) {
    InterleavedSequence s;
    std::vector<double> vis;
    auto push = [&](Element e, bool st, bool lm, std::size_t target) {
        s.elements.push_back(e);
        s.stream.push_back(st);
        s.lm.push_back(lm);
        s.target.push_back(target);
    };
    std::size_t rows = 0;
    for (std::size_t f = 0; f < n_frames; ++f) {
        const bool respond = rng.uniform() < 0.25;
        for (std::size_t k = 0; k < tokens; ++k) {
            for (std::size_t j = 0; j < d; ++j) vis.push_back(rng.normal());
            const bool last = k + 1 == tokens;
            push(Element::visual(rows++, static_cast<int>(f)), last, false,
                 respond ? vocab::RESPOND : vocab::SILENCE);
        }
        if (!respond) {
            push(Element::special(vocab::FRAME_SEP), false, false, 0);
            continue;
        }
        const std::size_t len = 1 + rng.below(3);
        std::vector<std::size_t> toks;
        for (std::size_t i = 0; i < len; ++i) toks.push_back(vocab::kFirstText + rng.below(20));
        toks.push_back(vocab::TURN_END);
        push(Element::special(vocab::RESPOND), false, true, toks[0]);
        for (std::size_t i = 0; i < len; ++i) push(Element::text(toks[i]), false, true, toks[i + 1]);
        push(Element::special(vocab::TURN_END), false, false, 0);
    }
    s.visual = Tensor::from({rows, d}, std::move(vis));
    return s;
}

}  // namespace ovd::test
