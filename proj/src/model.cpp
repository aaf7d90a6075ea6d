// SPDX-License-Identifier: Apache-2.0
#include "ovd/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "ovd/error.hpp"
#include "ovd/init.hpp"
#include "ovd/rng.hpp"

namespace ovd {

const char* vocab::special_name(std::size_t id) {
    switch (id) {
        case SILENCE: return "SILENCE";
        case RESPOND: return "RESPOND";
        case STREAM_TAG: return "STREAM_TAG";
        case USER_TAG: return "USER_TAG";
        case FOCUS_PHRASE: return "FOCUS_PHRASE";
        case FRAME_SEP: return "FRAME_SEP";
        case TURN_END: return "TURN_END";
        default: return "TEXT";
    }
}

void validate_model(const ModelConfig& c) {
    require(c.d_model > 0 && c.n_layers > 0 && c.n_heads > 0 && c.ffn_mult > 0, ErrorKind::config,
            "model dimensions must be positive");
    require(c.d_model % c.n_heads == 0 && (c.d_model / c.n_heads) % 2 == 0, ErrorKind::config,
            "model.d_model must split into heads of even width");
    require(c.vocab == vocab::kSize, ErrorKind::config, "vocabulary size is fixed at 64");
}

ToyLM::ToyLM(const ModelConfig& config, const DroppingConfig& dropping) : config_(config) {
    validate_model(config);
    const std::size_t d = config.d_model, ff = d * config.ffn_mult, V = config.vocab;
    Rng rng(config.seed, 0x70e);
    std::vector<double> emb(V * d);
    for (double& v : emb) v = rng.uniform(-1.0, 1.0);
    embedding = Tensor::parameter({V, d}, std::move(emb));
    blocks.resize(config.n_layers);
    for (Block& b : blocks) {
        b.ln1_g = constant_parameter({d}, 1.0);
        b.ln1_b = zero_parameter({d});
        b.wq = affine_weight(d, d, rng);
        b.wk = affine_weight(d, d, rng);
        b.wv = affine_weight(d, d, rng);
        b.wo = affine_weight(d, d, rng);
        b.ln2_g = constant_parameter({d}, 1.0);
        b.ln2_b = zero_parameter({d});
        b.w_ff1 = affine_weight(d, ff, rng);
        b.b_ff1 = zero_parameter({ff});
        b.w_ff2 = affine_weight(ff, d, rng);
        b.b_ff2 = zero_parameter({d});
        b.w_theta = affine_weight(d, 1, rng);
    }
    lnf_g = constant_parameter({d}, 1.0);
    lnf_b = zero_parameter({d});
    w_out = affine_weight(d, V, rng);
    b_out = zero_parameter({V});
    set_dropping(dropping);
}

void ToyLM::set_dropping(const DroppingConfig& dropping) {
    validate_dropping(dropping);
    dropping_ = dropping;
    routed_ = placement_layers(config_.n_layers, dropping.policy);
    is_routed_.assign(config_.n_layers, 0);
    for (std::size_t l : routed_) is_routed_[l] = 1;
}

DecodeCache ToyLM::new_cache() const {
    DecodeCache c;
    c.layers.resize(config_.n_layers);
    c.d_model = config_.d_model;
    return c;
}

ParameterSet ToyLM::parameters() const {
    ParameterSet out;
    out.push_back({"lm.embedding", embedding});
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const Block& b = blocks[l];
        const std::string p = "lm.block" + std::to_string(l) + ".";
        for (const auto& [name, t] :
             {std::pair{"ln1_g", b.ln1_g}, {"ln1_b", b.ln1_b}, {"wq", b.wq}, {"wk", b.wk},
              {"wv", b.wv}, {"wo", b.wo}, {"ln2_g", b.ln2_g}, {"ln2_b", b.ln2_b},
              {"w_ff1", b.w_ff1}, {"b_ff1", b.b_ff1}, {"w_ff2", b.w_ff2}, {"b_ff2", b.b_ff2},
              {"w_theta", b.w_theta}})
            out.push_back({p + name, t});
    }
    out.push_back({"lm.lnf_g", lnf_g});
    out.push_back({"lm.lnf_b", lnf_b});
    out.push_back({"lm.w_out", w_out});
    out.push_back({"lm.b_out", b_out});
    return out;
}

namespace {

bool droppable(const Element& e) { return e.kind == ElementKind::visual && e.group >= 0; }

}  // namespace

std::vector<char> ToyLM::retention(std::size_t layer, std::span<const Element> elements,
                                   std::span<const double> r, std::size_t first_pos,
                                   LayerRoutingRecord* record) const {
    const std::size_t n = elements.size();
    std::vector<char> keep(n, 1);
    // droppable element indices, in order; r[k] belongs to drop_idx[k]
    std::vector<std::size_t> drop_idx;
    for (std::size_t i = 0; i < n; ++i)
        if (droppable(elements[i])) drop_idx.push_back(i);
    double threshold = std::numeric_limits<double>::quiet_NaN();

    if (dropping_.selection == SelectionMode::global_percentile) {
        threshold = percentile_threshold(r, dropping_.beta);
        for (std::size_t k = 0; k < drop_idx.size(); ++k) keep[drop_idx[k]] = r[k] >= threshold;
    } else {
        std::map<int, std::vector<std::size_t>> groups;  // group -> positions in drop_idx
        for (std::size_t k = 0; k < drop_idx.size(); ++k)
            groups[elements[drop_idx[k]].group].push_back(k);
        for (const auto& [g, members] : groups) {
            std::vector<char> mask;
            if (dropping_.selection == SelectionMode::random) {
                mask = select_random(members.size(), dropping_.beta, dropping_.seed, layer,
                                     first_pos + drop_idx[members.front()]);
            } else {
                std::vector<double> w(members.size());
                for (std::size_t m = 0; m < members.size(); ++m) w[m] = r[members[m]];
                mask = select_retained(w, dropping_.beta);
            }
            for (std::size_t m = 0; m < members.size(); ++m) keep[drop_idx[members[m]]] = mask[m];
        }
    }
    if (record != nullptr) {
        record->layer = layer;
        record->threshold = threshold;
        record->weights.assign(n, std::numeric_limits<double>::infinity());
        record->droppable.assign(n, 0);
        for (std::size_t k = 0; k < drop_idx.size(); ++k) {
            record->weights[drop_idx[k]] = r[k];
            record->droppable[drop_idx[k]] = 1;
        }
        record->retained = keep;
    }
    return keep;
}

Tensor ToyLM::forward(std::span<const Element> elements, const Tensor& visual, DecodeCache* cache,
                      const ForwardOptions& options) const {
    const std::size_t d = config_.d_model, V = config_.vocab, H = config_.n_heads;
    const std::size_t n = elements.size();
    if (n == 0) return Tensor::zeros({0, V});
    if (cache != nullptr)
        require(cache->layers.size() == config_.n_layers && cache->d_model == d, ErrorKind::cache,
                "decode cache was created for a different model");
    const std::size_t base = cache ? cache->length : 0;

    const bool routing = !routed_.empty() && dropping_.beta > 0.0;
    if (routing && cache != nullptr && cache->length > 0) {
        require(dropping_.selection != SelectionMode::global_percentile, ErrorKind::routing,
                "global_percentile selection needs the whole sequence in one forward call");
        for (const Element& e : elements)
            require(!(droppable(e) && e.group == cache->last_group), ErrorKind::cache,
                    "frame " + std::to_string(e.group) +
                        " is split across forward calls; routed layers need whole frames");
    }

    // input rows: embeddings for text/special, given rows for visual
    std::vector<std::size_t> token_ids, visual_rows, perm(n);
    for (const Element& e : elements) {
        if (e.kind == ElementKind::visual) {
            visual_rows.push_back(e.row);
        } else {
            require(e.token < V, ErrorKind::index, "token id outside the vocabulary");
            require(e.kind != ElementKind::text || vocab::is_text(e.token), ErrorKind::index,
                    "text element carries a special id");
            token_ids.push_back(e.token);
        }
    }
    {
        std::size_t ti = 0, vi = token_ids.size();
        for (std::size_t i = 0; i < n; ++i)
            perm[i] = elements[i].kind == ElementKind::visual ? vi++ : ti++;
    }
    std::vector<Tensor> parts;
    if (!token_ids.empty()) parts.push_back(gather_rows(embedding, token_ids));
    if (!visual_rows.empty()) {
        require(visual.defined() && visual.rank() == 2 && visual.cols() == d, ErrorKind::dimension,
                "visual rows must be [n x d_model]");
        parts.push_back(gather_rows(visual, visual_rows));
    }
    Tensor x = gather_rows(parts.size() == 1 ? parts[0] : concat_rows(parts), perm);

    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = base + i;

    for (std::size_t l = 0; l < config_.n_layers; ++l) {
        if (options.hidden) options.hidden->push_back(x);
        const Block& B = blocks[l];
        std::vector<char> keep(n, 1);
        Tensor r_drop;
        std::vector<std::size_t> drop_idx;
        if (is_routed_[l]) {
            for (std::size_t i = 0; i < n; ++i)
                if (droppable(elements[i])) drop_idx.push_back(i);
            if (!drop_idx.empty()) {
                r_drop = matmul(gather_rows(x, drop_idx), B.w_theta);
                LayerRoutingRecord rec;
                keep = retention(l, elements, r_drop.data(), base,
                                 options.records ? &rec : nullptr);
                if (options.records) options.records->push_back(std::move(rec));
            }
        }
        std::vector<std::size_t> P;
        for (std::size_t i = 0; i < n; ++i)
            if (keep[i]) P.push_back(i);
        if (P.empty()) continue;  // every row skipped this layer
        const Tensor xt = P.size() == n ? x : gather_rows(x, P);
        std::vector<std::size_t> qpos(P.size());
        for (std::size_t i = 0; i < P.size(); ++i) qpos[i] = pos[P[i]];

        const Tensor h = layer_norm(xt, B.ln1_g, B.ln1_b);
        Tensor q = rotary(matmul(h, B.wq), qpos, H);
        Tensor k = rotary(matmul(h, B.wk), qpos, H);
        Tensor v = matmul(h, B.wv);
        std::vector<std::size_t> kpos = qpos;
        if (cache != nullptr) {
            LayerCache& lc = cache->layers[l];
            if (!lc.pos.empty()) {
                const std::size_t m = lc.pos.size();
                const Tensor kc[] = {Tensor::from({m, d}, lc.k), k};
                const Tensor vc[] = {Tensor::from({m, d}, lc.v), v};
                kpos.insert(kpos.begin(), lc.pos.begin(), lc.pos.end());
                lc.k.insert(lc.k.end(), k.data().begin(), k.data().end());
                lc.v.insert(lc.v.end(), v.data().begin(), v.data().end());
                lc.pos.insert(lc.pos.end(), qpos.begin(), qpos.end());
                k = concat_rows(kc);
                v = concat_rows(vc);
            } else {
                lc.k.assign(k.data().begin(), k.data().end());
                lc.v.assign(v.data().begin(), v.data().end());
                lc.pos = qpos;
            }
        }
        const Tensor a = matmul(causal_attention(q, k, v, H, qpos, kpos), B.wo);
        const Tensor h2 = layer_norm(add(xt, a), B.ln2_g, B.ln2_b);
        const Tensor m = add_bias(matmul(gelu(add_bias(matmul(h2, B.w_ff1), B.b_ff1)), B.w_ff2),
                                  B.b_ff2);
        const Tensor f = add(a, m);

        if (is_routed_[l] && dropping_.scale_by_r && r_drop.defined()) {
            // rows of P that are droppable take r, the rest point at a unit row
            std::vector<std::size_t> map(P.size());
            std::vector<char> scaled(P.size(), 0);
            std::vector<std::size_t> where(n, drop_idx.size());
            for (std::size_t k2 = 0; k2 < drop_idx.size(); ++k2) where[drop_idx[k2]] = k2;
            for (std::size_t i = 0; i < P.size(); ++i) {
                map[i] = where[P[i]];
                scaled[i] = map[i] < drop_idx.size();
            }
            const Tensor r_parts[] = {r_drop, Tensor::full({1, 1}, 1.0)};
            const Tensor r_p = gather_rows(concat_rows(r_parts), map);
            x = residual_update(x, f, P, r_p, scaled);
        } else {
            x = residual_update(x, f, P, Tensor(), {});
        }
    }

    if (options.hidden) options.hidden->push_back(x);
    if (cache != nullptr) {
        cache->length += n;
        for (const Element& e : elements)
            if (droppable(e)) cache->last_group = e.group;
    }
    const Tensor hf = layer_norm(x, lnf_g, lnf_b);
    return add_bias(matmul(hf, w_out), b_out);
}

// ---- objective --------------------------------------------------------------

void validate_supervision(const InterleavedSequence& seq, std::size_t n_logits) {
    const std::size_t n = seq.size();
    require(seq.stream.size() == n && seq.lm.size() == n && seq.target.size() == n,
            ErrorKind::supervision, "supervision flags must have one entry per position");
    require(n_logits == n, ErrorKind::supervision,
            "logit rows (" + std::to_string(n_logits) + ") do not match positions (" +
                std::to_string(n) + ")");
    for (std::size_t j = 0; j < n; ++j) {
        require(!(seq.stream[j] && seq.lm[j]), ErrorKind::supervision,
                "position " + std::to_string(j) + " carries both streaming and LM supervision");
        if (seq.stream[j])
            require(seq.target[j] == vocab::SILENCE || seq.target[j] == vocab::RESPOND,
                    ErrorKind::supervision, "streaming target must be SILENCE or RESPOND");
        if (seq.lm[j])
            require(vocab::is_text(seq.target[j]) || seq.target[j] == vocab::TURN_END,
                    ErrorKind::supervision, "LM target must be a text token or TURN_END");
    }
}

LossTerms streaming_lm_loss(const Tensor& logits, const InterleavedSequence& seq, double w) {
    require(logits.defined() && logits.rank() == 2, ErrorKind::dimension, "logits must be [N x V]");
    validate_supervision(seq, logits.rows());
    const std::size_t n = seq.size();
    require(n > 0, ErrorKind::supervision, "empty sequence");
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<std::size_t> all_rows, all_tg, s_rows, s_tg, l_rows, l_tg;
    std::vector<double> all_w, s_w, l_w;
    for (std::size_t j = 0; j < n; ++j) {
        if (seq.stream[j]) {
            all_rows.push_back(j), all_tg.push_back(seq.target[j]), all_w.push_back(w * inv_n);
            s_rows.push_back(j), s_tg.push_back(seq.target[j]), s_w.push_back(w * inv_n);
        } else if (seq.lm[j]) {
            all_rows.push_back(j), all_tg.push_back(seq.target[j]), all_w.push_back(inv_n);
            l_rows.push_back(j), l_tg.push_back(seq.target[j]), l_w.push_back(inv_n);
        }
    }
    LossTerms out;
    out.total = weighted_nll(logits, all_rows, all_tg, all_w);
    out.streaming = weighted_nll(logits, s_rows, s_tg, s_w);
    out.lm = weighted_nll(logits, l_rows, l_tg, l_w);
    out.n_positions = n;
    out.n_stream = s_rows.size();
    out.n_lm = l_rows.size();
    return out;
}

// ---- decisions and decoding ---------------------------------------------------

Decision determine(std::span<const double> logits, double threshold) {
    require(logits.size() > vocab::RESPOND, ErrorKind::dimension, "determine needs vocabulary logits");
    const double gap = logit_gap(logits);
    if (threshold == 0.5) return gap > 0.0 ? Decision::respond : Decision::silent;
    const double p = 1.0 / (1.0 + std::exp(-gap));
    return p > threshold ? Decision::respond : Decision::silent;
}

std::size_t argmax(std::span<const double> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::size_t decode_choice(std::span<const double> logits) {
    std::size_t best = vocab::TURN_END;
    for (std::size_t id = vocab::kFirstText; id < logits.size(); ++id)
        if (logits[id] > logits[best]) best = id;
    return best;
}

GeneratedTurn greedy_decode(std::span<const double> first_logits, const StepFn& step,
                            std::size_t max_len) {
    GeneratedTurn turn;
    std::vector<double> logits(first_logits.begin(), first_logits.end());
    while (true) {
        const std::size_t next = decode_choice(logits);
        if (next == vocab::TURN_END) break;
        if (turn.tokens.size() == max_len) {
            turn.truncated = true;
            break;
        }
        turn.tokens.push_back(next);
        logits = step(next);
    }
    step(vocab::TURN_END);
    return turn;
}

GeneratedTurn generate_response(const ToyLM& model, DecodeCache& cache,
                                std::span<const double> first_logits, std::size_t max_len) {
    const Tensor none;
    auto step = [&](std::size_t token) {
        const Element e = token == vocab::TURN_END ? Element::special(token) : Element::text(token);
        const Tensor logits = model.forward(std::span(&e, 1), none, &cache);
        return std::vector<double>(logits.data().begin(), logits.data().end());
    };
    return greedy_decode(first_logits, step, max_len);
}

}  // namespace ovd
