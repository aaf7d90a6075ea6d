// SPDX-License-Identifier: Apache-2.0
#include "ovd/dialogue.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

using nlohmann::json;

EngineOptions engine_options(const RunConfig& c) {
    EngineOptions o;
    o.slow_path = c.slow_path.enabled;
    o.max_len = c.generate.max_len;
    o.threshold = c.stream.respond_threshold;
    return o;
}

// ---- log serialisation --------------------------------------------------------------

namespace {

const char* decision_name(Decision d) { return d == Decision::respond ? "respond" : "silent"; }

json query_line(const Query& q) { return {{"type", "query"}, {"t", q.t}, {"tokens", q.tokens}}; }

json decision_line(const DecisionRecord& d) {
    return {{"type", "decision"},
            {"index", d.index},
            {"t", d.t},
            {"decision", decision_name(d.decision)},
            {"logit_gap", d.logit_gap}};
}

json turn_line(const TurnRecord& t) {
    std::string text;
    for (std::size_t tok : t.tokens) text += (text.empty() ? "" : " ") + token_name(tok);
    return {{"type", "turn"},   {"t", t.t},
            {"tokens", t.tokens}, {"text", text},
            {"truncated", t.truncated}, {"template", t.template_used}};
}

json timing_line(const StageTimings& s) {
    return {{"type", "timing"},          {"index", s.index},
            {"encode_ms", s.encode_ms},  {"aggregate_ms", s.aggregate_ms},
            {"decide_ms", s.decide_ms},  {"slow_path_ms", s.slow_path_ms},
            {"generate_ms", s.generate_ms}};
}

std::string body(const EpisodeLog& log) {
    std::string out;
    for (const Query& q : log.queries) out += query_line(q).dump() + "\n";
    for (const DecisionRecord& d : log.decisions) out += decision_line(d).dump() + "\n";
    for (const TurnRecord& t : log.turns) out += turn_line(t).dump() + "\n";
    return out;
}

template <class T>
T field(const json& j, const char* name, std::size_t line) {
    if (!j.contains(name))
        fail(ErrorKind::parse, "line " + std::to_string(line) + ": missing field '" + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        fail(ErrorKind::parse, "line " + std::to_string(line) + ": bad value for '" + name + "'");
    }
}

}  // namespace

std::uint64_t EpisodeLog::hash() const { return fnv1a(body(*this)); }

std::string episode_log_to_jsonl(const EpisodeLog& log) {
    json header = log.header;
    header["type"] = "header";
    std::string out = header.dump() + "\n" + body(log);
    for (const StageTimings& s : log.timings) out += timing_line(s).dump() + "\n";
    const json footer = {{"type", "footer"},
                         {"decisions", log.decisions.size()},
                         {"turns", log.turns.size()},
                         {"hash", hex64(log.hash())}};
    return out + footer.dump() + "\n";
}

EpisodeLog episode_log_from_jsonl(const std::string& text, const std::string& origin) {
    EpisodeLog log;
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    bool have_header = false;
    std::optional<json> footer;
    while (std::getline(in, raw)) {
        ++line;
        if (raw.empty()) continue;
        json j;
        try {
            j = json::parse(raw);
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, origin + ":" + std::to_string(line) + ": " + e.what());
        }
        require(!footer, ErrorKind::parse,
                origin + ":" + std::to_string(line) + ": content after footer");
        const std::string type = field<std::string>(j, "type", line);
        if (type == "header") {
            require(!have_header && line == 1, ErrorKind::parse,
                    origin + ":" + std::to_string(line) + ": header must be the first line");
            have_header = true;
            log.header = j;
            log.header.erase("type");
        } else if (type == "query") {
            log.queries.push_back({field<double>(j, "t", line),
                                   field<std::vector<std::size_t>>(j, "tokens", line)});
        } else if (type == "decision") {
            DecisionRecord d;
            d.index = field<std::size_t>(j, "index", line);
            d.t = field<double>(j, "t", line);
            const std::string name = field<std::string>(j, "decision", line);
            require(name == "silent" || name == "respond", ErrorKind::parse,
                    origin + ":" + std::to_string(line) + ": bad decision '" + name + "'");
            d.decision = name == "respond" ? Decision::respond : Decision::silent;
            d.logit_gap = field<double>(j, "logit_gap", line);
            log.decisions.push_back(d);
        } else if (type == "turn") {
            TurnRecord t;
            t.t = field<double>(j, "t", line);
            t.tokens = field<std::vector<std::size_t>>(j, "tokens", line);
            t.truncated = field<bool>(j, "truncated", line);
            t.template_used = field<bool>(j, "template", line);
            log.turns.push_back(std::move(t));
        } else if (type == "timing") {
            StageTimings s;
            s.index = field<std::size_t>(j, "index", line);
            s.encode_ms = field<double>(j, "encode_ms", line);
            s.aggregate_ms = field<double>(j, "aggregate_ms", line);
            s.decide_ms = field<double>(j, "decide_ms", line);
            s.slow_path_ms = field<double>(j, "slow_path_ms", line);
            s.generate_ms = field<double>(j, "generate_ms", line);
            log.timings.push_back(s);
        } else if (type == "footer") {
            footer = j;
            field<std::string>(j, "hash", line);
        } else {
            fail(ErrorKind::parse,
                 origin + ":" + std::to_string(line) + ": unknown line type '" + type + "'");
        }
    }
    require(have_header, ErrorKind::parse, origin + ": missing header line");
    require(footer.has_value(), ErrorKind::parse, origin + ": missing footer line");
    require((*footer)["hash"].get<std::string>() == hex64(log.hash()), ErrorKind::parse,
            origin + ": footer hash does not match the logged turns");
    return log;
}

void save_episode(const std::filesystem::path& path, const EpisodeLog& log) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << episode_log_to_jsonl(log);
    require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path.string());
}

EpisodeLog load_episode(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return episode_log_from_jsonl(ss.str(), path.string());
}

// ---- online state ------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

EpisodeState::EpisodeState(const Assistant& assistant, const EngineOptions& options)
    : assistant_(assistant), options_(options), cache_(assistant.lm.new_cache()) {}

void EpisodeState::inject_user_query(std::vector<std::size_t> tokens, double t) {
    require(t >= current_time_ - 1e-9, ErrorKind::stream,
            "query at t=" + format_double(t) + " is before the current time " +
                format_double(current_time_));
    for (std::size_t tok : tokens)
        require(vocab::is_text(tok), ErrorKind::stream, "query tokens must be text ids");
    pending_queries_.push_back({t, tokens});
    log_.queries.push_back({t, std::move(tokens)});
}

std::optional<StepResult> EpisodeState::ingest_frame(const SyntheticFrame& frame) {
    const double expected = static_cast<double>(n_frames_) * kFramePeriod;
    require(std::abs(frame.t - expected) < 1e-6, ErrorKind::stream,
            "frame at t=" + format_double(frame.t) + " out of order; expected t=" +
                format_double(expected));
    ++n_frames_;
    current_time_ = frame.t;
    buffer_.push_back(frame);
    if (buffer_.size() < kGroupSize) return std::nullopt;

    const auto t0 = Clock::now();
    const FrameBundle bundle =
        make_bundle(assistant_.encoders, buffer_, n_bundles_, assistant_.align_options());
    const double encode_ms = options_.timings ? ms_since(t0) : 0.0;
    buffer_.clear();
    StepResult r = step(bundle);
    if (options_.timings) log_.timings.back().encode_ms = encode_ms;
    return r;
}

Tensor EpisodeState::feed(std::vector<Element> elements, const std::vector<Tensor>& visual_parts) {
    // rows of this call's visual tensor are numbered from 0; the transcript
    // numbers them globally
    Tensor visual;
    std::size_t local = 0;
    for (const Tensor& p : visual_parts) local += p.rows();
    if (!visual_parts.empty()) visual = concat_rows(visual_parts);
    const Tensor logits = assistant_.lm.forward(elements, visual, &cache_);
    if (options_.record) {
        for (Element e : elements) {
            if (e.kind == ElementKind::visual) e.row += n_visual_;
            elements_.push_back(e);
        }
        for (const Tensor& p : visual_parts) visual_parts_.push_back(p);
        logit_parts_.push_back(logits);
    }
    n_visual_ += local;
    return logits;
}

StepResult EpisodeState::step(const FrameBundle& bundle) {
    require(bundle.index == n_bundles_, ErrorKind::stream,
            "bundle " + std::to_string(bundle.index) + " out of order; expected " +
                std::to_string(n_bundles_));
    StageTimings timing;
    timing.index = bundle.index;
    auto clock = Clock::now();

    std::vector<Element> elements = std::move(pending_);
    pending_.clear();
    const double last_frame = bundle.timestamp + kBundlePeriod - kFramePeriod;
    while (!pending_queries_.empty() && pending_queries_.front().t < last_frame - 1e-9) {
        elements.push_back(Element::special(vocab::USER_TAG));
        for (std::size_t tok : pending_queries_.front().tokens) elements.push_back(Element::text(tok));
        pending_queries_.pop_front();
    }
    const Tensor frame = assistant_.frame_tokens(bundle);
    if (options_.timings) timing.aggregate_ms = ms_since(clock);
    clock = Clock::now();

    const std::size_t n_frame = frame.rows();
    for (std::size_t k = 0; k < n_frame; ++k)
        elements.push_back(Element::visual(k, static_cast<int>(bundle.index)));
    const Tensor logits = feed(std::move(elements), {frame});
    const std::span<const double> all = logits.data();
    const std::size_t V = logits.cols();
    const std::span<const double> last = all.subspan((logits.rows() - 1) * V, V);

    StepResult result;
    result.decision = determine(last, options_.threshold);
    result.logit_gap = logit_gap(last);
    log_.decisions.push_back({bundle.index, bundle.timestamp, result.decision, result.logit_gap});
    if (options_.timings) timing.decide_ms = ms_since(clock);
    ++n_bundles_;

    if (result.decision == Decision::silent) {
        pending_.push_back(Element::special(vocab::FRAME_SEP));
        if (options_.timings) log_.timings.push_back(timing);
        return result;
    }

    clock = Clock::now();
    TurnRecord turn;
    turn.t = bundle.timestamp;
    Tensor head_logits;
    if (options_.slow_path) {
        const auto kf = assistant_.keyframe_tokens(bundle);
        TemplateInputs in;
        in.grid = assistant_.config().slow_path.grid;
        in.use_box = assistant_.config().slow_path.box;
        // the template reuses this frame's rows, already in the transcript
        std::vector<Tensor> parts;
        std::size_t local = 0;
        for (std::size_t k = 0; k < n_frame; ++k) in.frame_rows.push_back(k);
        parts.push_back(frame);
        local = n_frame;
        if (kf.grid.defined()) {
            for (std::size_t k = 0; k < kf.grid.rows(); ++k) in.grid_rows.push_back(local + k);
            local += kf.grid.rows();
            parts.push_back(kf.grid);
        }
        if (kf.box.defined()) {
            for (std::size_t k = 0; k < kf.box.rows(); ++k) in.box_rows.push_back(local + k);
            parts.push_back(kf.box);
        }
        const std::vector<Element> head = assemble_thinking_template(in);
        head_logits = feed(head, parts);
        turn.template_used = true;
    } else {
        head_logits = feed({Element::special(vocab::RESPOND)}, {});
    }
    if (options_.timings) timing.slow_path_ms = ms_since(clock);
    clock = Clock::now();

    const std::size_t rows = head_logits.rows();
    std::vector<double> first(head_logits.data().begin() + (rows - 1) * V,
                              head_logits.data().end());
    auto step_fn = [&](std::size_t token) {
        const Element e =
            token == vocab::TURN_END ? Element::special(token) : Element::text(token);
        const Tensor l = feed({e}, {});
        return std::vector<double>(l.data().begin(), l.data().end());
    };
    const GeneratedTurn generated = greedy_decode(first, step_fn, options_.max_len);
    turn.tokens = generated.tokens;
    turn.truncated = generated.truncated;
    if (options_.timings) {
        timing.generate_ms = ms_since(clock);
        log_.timings.push_back(timing);
    }
    log_.turns.push_back(turn);
    result.turn = std::move(turn);
    return result;
}

Tensor EpisodeState::transcript_visual() const {
    if (visual_parts_.empty()) return Tensor::zeros({0, assistant_.config().model.d_model});
    return concat_rows(visual_parts_);
}

Tensor EpisodeState::recorded_logits() const {
    if (logit_parts_.empty()) return Tensor::zeros({0, assistant_.config().model.vocab});
    return concat_rows(logit_parts_);
}

EpisodeRun run_episode(const Assistant& assistant, const std::vector<SyntheticFrame>& frames,
                       const std::vector<Query>& queries, const EngineOptions& options,
                       std::size_t episode_id) {
    EpisodeState state(assistant, options);
    std::size_t next_query = 0;
    for (const SyntheticFrame& f : frames) {
        while (next_query < queries.size() && queries[next_query].t <= f.t + 1e-9) {
            state.inject_user_query(queries[next_query].tokens, queries[next_query].t);
            ++next_query;
        }
        state.ingest_frame(f);
    }
    for (; next_query < queries.size(); ++next_query)
        state.inject_user_query(queries[next_query].tokens, queries[next_query].t);

    EpisodeRun run;
    run.log = std::move(state.log());
    run.log.header = {{"format", "ovd-episode/1"},
                      {"episode", episode_id},
                      {"config_hash", assistant.config().hash_hex()},
                      {"frames", frames.size()},
                      {"slow_path", options.slow_path},
                      {"threshold", options.threshold},
                      {"max_len", options.max_len}};
    if (options.record) {
        run.transcript = state.transcript();
        run.visual = state.transcript_visual();
        run.logits = state.recorded_logits();
    }
    return run;
}

EpisodeRun run_episode(const Assistant& assistant, const StreamSample& sample,
                       const EngineOptions& options) {
    if (sample.frames.empty()) {
        StreamSample copy = sample;
        copy.render();
        return run_episode(assistant, copy.frames, copy.queries, options, sample.id);
    }
    return run_episode(assistant, sample.frames, sample.queries, options, sample.id);
}

}  // namespace ovd
