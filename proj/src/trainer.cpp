// SPDX-License-Identifier: Apache-2.0
#include "ovd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ovd/checkpoint.hpp"
#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

nlohmann::json TrainLogEntry::to_json() const {
    return {{"step", step},
            {"loss", loss},
            {"streaming_term", streaming_term},
            {"lm_term", lm_term},
            {"grad_norm", grad_norm},
            {"lr", lr}};
}

BatchGradients batch_gradients(const Assistant& assistant,
                               std::span<const EncodedEpisode* const> batch,
                               const LayoutOptions& layout) {
    require(!batch.empty(), ErrorKind::config, "empty training batch");
    const ParameterSet params = assistant.parameters();
    const double w = assistant.config().stream.w;
    const double inv = 1.0 / static_cast<double>(batch.size());

    BatchGradients out;
    Tape tape;
    {
        TapeScope scope(tape);
        std::vector<Tensor> totals;
        for (const EncodedEpisode* e : batch) {
            const SequenceBuild build = build_sequence(assistant, *e, layout);
            const Tensor logits = assistant.lm.forward(build.seq);
            const LossTerms terms = streaming_lm_loss(logits, build.seq, w);
            out.loss += terms.total.item() * inv;
            out.streaming_term += terms.streaming.item() * inv;
            out.lm_term += terms.lm.item() * inv;
            totals.push_back(reshape(terms.total, {1, 1}));
        }
        const Tensor loss = scale(sum(concat_rows(totals)), inv);
        if (!std::isfinite(loss.item()))
            fail(ErrorKind::numeric, "non-finite loss " + format_double(loss.item()));
        tape.backward(loss);
    }
    out.grads.reserve(params.size());
    for (const NamedTensor& p : params) {
        const std::span<const double> g = tape.grad(p.tensor);
        if (g.empty())
            out.grads.emplace_back(p.tensor.numel(), 0.0);
        else
            out.grads.emplace_back(g.begin(), g.end());
    }
    return out;
}

bool is_router_parameter(const std::string& name) {
    return name.size() >= 8 && name.compare(name.size() - 8, 8, ".w_theta") == 0;
}

Trainer::Trainer(Assistant& assistant, std::vector<EncodedEpisode> episodes)
    : assistant_(assistant),
      episodes_(std::move(episodes)),
      layout_(training_layout(assistant.config())) {
    require(!episodes_.empty(), ErrorKind::config, "no training episodes");
    // a random-selection router is non-trainable: its scorers stay at init
    const bool frozen_router = assistant.config().dropping.selection == SelectionMode::random;
    const ParameterSet all = assistant.parameters();
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (frozen_router && is_router_parameter(all[i].name)) continue;
        params_.push_back(all[i]);
        trainable_.push_back(i);
    }
    AdamWConfig oc;
    oc.weight_decay = assistant.config().train.weight_decay;
    optimizer_ = AdamW(params_, oc);
}

std::vector<std::size_t> Trainer::batch_indices(std::size_t step) const {
    // a fresh permutation per epoch, consumed batch by batch
    const std::size_t n = episodes_.size();
    const std::size_t batch = assistant_.config().train.batch;
    std::vector<std::size_t> out;
    std::size_t cached_epoch = static_cast<std::size_t>(-1);
    std::vector<std::size_t> perm(n);
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t p = step * batch + b;
        const std::size_t epoch = p / n;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            Rng rng(assistant_.config().train.seed, epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[p % n]);
    }
    return out;
}

TrainLogEntry Trainer::step() {
    const TrainConfig& tc = assistant_.config().train;
    std::vector<const EncodedEpisode*> batch;
    for (std::size_t i : batch_indices(step_)) batch.push_back(&episodes_[i]);

    BatchGradients bg;
    try {
        bg = batch_gradients(assistant_, batch, layout_);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        std::string ids;
        for (const EncodedEpisode* ep : batch) ids += " " + std::to_string(ep->id);
        fail(ErrorKind::numeric, e.message() + " at step " + std::to_string(step_) +
                                     "; batch episodes:" + ids);
    }
    TrainLogEntry entry;
    entry.step = step_;
    entry.loss = bg.loss;
    entry.streaming_term = bg.streaming_term;
    entry.lm_term = bg.lm_term;
    std::vector<std::vector<double>> grads;
    grads.reserve(trainable_.size());
    for (std::size_t i : trainable_) grads.push_back(std::move(bg.grads[i]));
    entry.grad_norm = clip_gradients(grads, tc.clip);
    require(std::isfinite(entry.grad_norm), ErrorKind::numeric,
            "non-finite gradient norm at step " + std::to_string(step_));
    entry.lr = cosine_lr(step_, tc.steps, tc.lr, tc.warmup_frac);
    optimizer_.step(grads, entry.lr);
    ++step_;
    return entry;
}

void Trainer::run(const std::function<void(const TrainLogEntry&)>& on_log) {
    const std::size_t total = assistant_.config().train.steps;
    while (step_ < total) {
        const TrainLogEntry e = step();
        if (on_log) on_log(e);
    }
}

void Trainer::save(const std::filesystem::path& manifest) const {
    ParameterSet all = assistant_.parameters();
    const std::size_t n_params = all.size();
    for (NamedTensor& s : optimizer_.state()) all.push_back(std::move(s));
    const nlohmann::json meta = {{"config_hash", assistant_.config().hash_hex()},
                                 {"step", step_},
                                 {"adam_steps", optimizer_.steps()},
                                 {"n_parameters", n_params}};
    save_checkpoint(manifest, all, meta);
}

void Trainer::resume(const std::filesystem::path& manifest) {
    const Checkpoint ck = load_checkpoint(manifest);
    ParameterSet all = assistant_.parameters();
    assign_parameters(all, ck.tensors);
    ParameterSet state;
    for (const NamedTensor& t : ck.tensors)
        if (t.name.rfind("adam.", 0) == 0) state.push_back(t);
    std::size_t adam_steps = 0;
    try {
        step_ = ck.meta.at("step").get<std::size_t>();
        adam_steps = ck.meta.at("adam_steps").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
        fail(ErrorKind::parse, "checkpoint meta lacks step counters: " + manifest.string());
    }
    optimizer_.load_state(state, adam_steps);
}

bool load_parameters(Assistant& assistant, const std::filesystem::path& manifest) {
    const Checkpoint ck = load_checkpoint(manifest);
    ParameterSet params = assistant.parameters();
    assign_parameters(params, ck.tensors);
    return ck.meta.value("config_hash", std::string()) == assistant.config().hash_hex();
}

}  // namespace ovd
