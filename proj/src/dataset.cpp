// SPDX-License-Identifier: Apache-2.0
#include "ovd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ovd/error.hpp"
#include "ovd/model.hpp"
#include "ovd/rng.hpp"

namespace ovd {

using nlohmann::json;

const std::vector<std::string>& text_words() {
    static const std::vector<std::string> words = {
        "you",  "reach", "left",  "right",  "object", "appears", "here", "pick", "up",
        "it",   "describe", "what", "happens", "now", "the",   "hand", "a",    "is",
        "moving", "table", "cup",  "take",   "put",    "down",  "look",
    };
    return words;
}

std::string token_name(std::size_t id) {
    if (vocab::is_special(id)) return vocab::special_name(id);
    const std::size_t i = id - vocab::kFirstText;
    if (i < text_words().size()) return text_words()[i];
    return "w" + std::to_string(id);
}

std::size_t token_id(const std::string& word) {
    const auto& w = text_words();
    const auto it = std::find(w.begin(), w.end(), word);
    require(it != w.end(), ErrorKind::parse, "unknown word '" + word + "'");
    return vocab::kFirstText + static_cast<std::size_t>(it - w.begin());
}

std::vector<std::size_t> narration(EventKind kind) {
    switch (kind) {
        case EventKind::left_hand_reach: return {token_id("you"), token_id("reach"), token_id("left")};
        case EventKind::right_hand_reach:
            return {token_id("you"), token_id("reach"), token_id("right")};
        case EventKind::object_enters:
            return {token_id("object"), token_id("appears"), token_id("here")};
        case EventKind::pick_up: return {token_id("you"), token_id("pick"), token_id("up")};
    }
    return {};
}

std::vector<std::size_t> opening_query() {
    return {token_id("describe"), token_id("what"), token_id("happens")};
}

// ---- rendering and edits ---------------------------------------------------------

namespace {

void retime(std::vector<SyntheticFrame>& frames) {
    for (std::size_t k = 0; k < frames.size(); ++k)
        frames[k].t = static_cast<double>(k) * kFramePeriod;
}

void apply_to_frames(std::vector<SyntheticFrame>& frames, const FrameEdit& e) {
    if (e.op == "insert") {
        require(e.at <= frames.size(), ErrorKind::generation, "insert position past the stream");
        const SyntheticFrame src = frames[e.at == 0 ? 0 : e.at - 1];
        frames.insert(frames.begin() + static_cast<std::ptrdiff_t>(e.at), e.count, src);
    } else if (e.op == "remove") {
        require(e.at + e.count <= frames.size(), ErrorKind::generation, "remove range past the stream");
        frames.erase(frames.begin() + static_cast<std::ptrdiff_t>(e.at),
                     frames.begin() + static_cast<std::ptrdiff_t>(e.at + e.count));
    } else if (e.op == "freeze") {
        require(e.at >= 1 && e.at + e.count <= frames.size(), ErrorKind::generation,
                "freeze range outside the stream");
        for (std::size_t k = e.at; k < e.at + e.count; ++k) frames[k] = frames[e.at - 1];
    } else {
        fail(ErrorKind::config, "unknown frame edit '" + e.op + "'");
    }
    retime(frames);
}

// moves annotation times with the frames; returns false if the annotation is lost
bool remap_time(double& t, const FrameEdit& e) {
    const double start = static_cast<double>(e.at) * kFramePeriod;
    const double span = static_cast<double>(e.count) * kFramePeriod;
    if (e.op == "insert") {
        if (t >= start - 1e-9) t += span;
        return true;
    }
    const bool inside = t >= start - 1e-9 && t < start + span - 1e-9;
    if (inside) return false;
    if (e.op == "remove" && t >= start + span - 1e-9) t -= span;
    return true;
}

std::size_t frame_count_after(const StreamSample& s, const FrameEdit& e, std::size_t before) {
    (void)s;
    if (e.op == "insert") return before + e.count;
    if (e.op == "remove") return before - e.count;
    return before;
}

std::size_t rendered_frames(double duration) {
    return static_cast<std::size_t>(std::llround(duration * kCaptureFps));
}

void drop_beyond(StreamSample& s, double limit) {
    std::erase_if(s.turns, [&](const Turn& t) { return t.t >= limit - 1e-9; });
    std::erase_if(s.queries, [&](const Query& q) { return q.t >= limit - 1e-9; });
}

}  // namespace

void StreamSample::render() {
    frames = synth_video(video_seed, duration, events, spec);
    for (const FrameEdit& e : edits) apply_to_frames(frames, e);
}

double StreamSample::trimmed_duration() const {
    std::size_t n = rendered_frames(duration);
    for (const FrameEdit& e : edits) n = frame_count_after(*this, e, n);
    return ovd::trimmed_duration(n);
}

StreamSample edit_frames(const StreamSample& sample, const FrameEdit& edit) {
    StreamSample out = sample;
    out.edits.push_back(edit);
    if (!out.frames.empty()) apply_to_frames(out.frames, edit);
    std::vector<Turn> turns;
    for (Turn t : out.turns)
        if (remap_time(t.t, edit)) turns.push_back(t);
    out.turns = std::move(turns);
    std::vector<Query> queries;
    for (Query q : out.queries)
        if (remap_time(q.t, edit)) queries.push_back(q);
    out.queries = std::move(queries);
    drop_beyond(out, out.trimmed_duration());
    return out;
}

// ---- generation -----------------------------------------------------------------

std::vector<double> place_onsets(std::size_t n, double duration, Rng& rng) {
    const auto slots = static_cast<std::size_t>(std::floor(duration / kBundlePeriod + 1e-9));
    if (n == 0) return {};
    // n onsets two slots apart: choose n of slots - (n - 1) compressed slots,
    // then spread the i-th chosen slot by i.
    require(slots + 1 >= 2 * n, ErrorKind::generation,
            std::to_string(n) + " events do not fit in " + std::to_string(duration) +
                " s with onsets at least 1 s apart");
    const std::size_t compressed = slots - (n - 1);
    std::vector<std::size_t> idx(compressed);
    for (std::size_t i = 0; i < compressed; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(compressed - i)]);
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(chosen.begin(), chosen.end());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = kBundlePeriod * static_cast<double>(chosen[i] + i);
    return out;
}

StreamSample generate_episode(std::uint64_t seed, std::size_t id, const DataConfig& cfg) {
    require(cfg.duration >= 1.0, ErrorKind::generation, "episodes must last at least 1 s");
    require(cfg.event_rate >= 0.0, ErrorKind::config, "event rate must be non-negative");
    Rng rng(seed, id);
    StreamSample s;
    s.id = id;
    s.video_seed = hash_combine(seed, id);
    s.duration = cfg.duration;
    s.spec.background = cfg.background;
    s.spec.noise = cfg.noise;
    const double usable = ovd::trimmed_duration(rendered_frames(cfg.duration));
    const auto n_events = static_cast<std::size_t>(std::llround(cfg.event_rate * usable));
    for (double onset : place_onsets(n_events, usable, rng)) {
        const auto kind = static_cast<EventKind>(rng.below(kEventKinds));
        s.events.push_back({onset, kind, kBundlePeriod});
        s.turns.push_back({onset, narration(kind), false});
    }
    if (cfg.query_at_start) s.queries.push_back({0.0, opening_query()});
    s.render();
    return s;
}

std::vector<StreamSample> generate_dataset(std::uint64_t seed, std::size_t n_episodes,
                                           const DataConfig& cfg) {
    std::vector<std::string> strategies;
    {
        std::stringstream ss(cfg.augment);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
            if (!item.empty() && item != "none") strategies.push_back(item);
        }
    }
    std::vector<StreamSample> out;
    out.reserve(n_episodes);
    for (std::size_t i = 0; i < n_episodes; ++i) {
        StreamSample s = generate_episode(seed, i, cfg);
        if (!strategies.empty()) {
            Rng rng(seed ^ 0xa06e, i);
            if (rng.uniform() < cfg.augment_fraction) {
                const std::string& strat = strategies[rng.below(strategies.size())];
                s = augment_dialogue(s, strat, hash_combine(seed, i));
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

StreamSample augment_dialogue(const StreamSample& sample, const std::string& strategy,
                              std::uint64_t seed) {
    Rng rng(seed, 0xa9);
    if (strategy == "corrupt_message") {
        StreamSample out = sample;
        if (out.turns.empty()) return out;
        Turn& t = out.turns[rng.below(out.turns.size())];
        // narration of a different kind than the one expected
        std::vector<std::vector<std::size_t>> wrong;
        for (std::size_t k = 0; k < kEventKinds; ++k) {
            auto n = narration(static_cast<EventKind>(k));
            if (n != t.tokens) wrong.push_back(n);
        }
        t.tokens = wrong[rng.below(wrong.size())];
        t.corrupted = true;
        return out;
    }
    if (strategy == "drop_message") {
        StreamSample out = sample;
        if (!out.turns.empty())
            out.turns.erase(out.turns.begin() + static_cast<std::ptrdiff_t>(rng.below(out.turns.size())));
        return out;
    }
    if (strategy == "temporal_jitter") {
        std::size_t n = rendered_frames(sample.duration);
        for (const FrameEdit& e : sample.edits) n = frame_count_after(sample, e, n);
        const std::size_t groups = n / kGroupSize;
        static const char* ops[] = {"insert", "remove", "freeze"};
        std::string op = ops[rng.below(3)];
        // a frozen or removed group needs a predecessor and a successor
        if (groups < 3) op = "insert";
        const std::size_t g = op == "insert" ? 1 + rng.below(std::max<std::size_t>(groups, 2) - 1)
                                             : 1 + rng.below(groups - 2);
        return edit_frames(sample, FrameEdit{op, g * kGroupSize, kGroupSize});
    }
    fail(ErrorKind::config, "unknown augmentation strategy '" + strategy + "'");
}

// ---- JSON -----------------------------------------------------------------------

json sample_to_json(const StreamSample& s) {
    json events = json::array();
    for (const VideoEvent& e : s.events)
        events.push_back({{"onset", e.onset},
                          {"kind", to_string(e.kind)},
                          {"duration", e.duration},
                          {"narration", narration(e.kind)}});
    json edits = json::array();
    for (const FrameEdit& e : s.edits)
        edits.push_back({{"op", e.op}, {"at", e.at}, {"count", e.count}});
    json queries = json::array();
    for (const Query& q : s.queries) queries.push_back({{"t", q.t}, {"tokens", q.tokens}});
    json turns = json::array();
    for (const Turn& t : s.turns)
        turns.push_back({{"t", t.t}, {"tokens", t.tokens}, {"corrupted", t.corrupted}});
    return {{"id", s.id},
            {"video", {{"seed", s.video_seed},
                       {"duration", s.duration},
                       {"background", s.spec.background},
                       {"noise", s.spec.noise},
                       {"min_gap", s.spec.min_gap}}},
            {"events", events},
            {"edits", edits},
            {"queries", queries},
            {"turns", turns}};
}

namespace {

const json& field(const json& j, const char* name, const std::string& where) {
    require(j.is_object() && j.contains(name), ErrorKind::parse,
            where + ": missing field '" + name + "'");
    return j.at(name);
}

template <class T>
T get_as(const json& j, const char* name, const std::string& where) {
    try {
        return field(j, name, where).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorKind::parse, where + ": field '" + name + "' has the wrong type");
    }
}

}  // namespace

StreamSample sample_from_json(const json& j) {
    const std::string where = "episode";
    StreamSample s;
    s.id = get_as<std::size_t>(j, "id", where);
    const json& v = field(j, "video", where);
    s.video_seed = get_as<std::uint64_t>(v, "seed", "video");
    s.duration = get_as<double>(v, "duration", "video");
    s.spec.background = get_as<double>(v, "background", "video");
    s.spec.noise = get_as<double>(v, "noise", "video");
    if (v.contains("min_gap")) s.spec.min_gap = get_as<double>(v, "min_gap", "video");
    for (const json& e : field(j, "events", where))
        s.events.push_back({get_as<double>(e, "onset", "event"),
                            event_kind_from_string(get_as<std::string>(e, "kind", "event")),
                            e.contains("duration") ? get_as<double>(e, "duration", "event")
                                                   : kBundlePeriod});
    if (j.contains("edits"))
        for (const json& e : j.at("edits"))
            s.edits.push_back({get_as<std::string>(e, "op", "edit"),
                               get_as<std::size_t>(e, "at", "edit"),
                               get_as<std::size_t>(e, "count", "edit")});
    for (const json& q : field(j, "queries", where))
        s.queries.push_back(
            {get_as<double>(q, "t", "query"), get_as<std::vector<std::size_t>>(q, "tokens", "query")});
    for (const json& t : field(j, "turns", where))
        s.turns.push_back({get_as<double>(t, "t", "turn"),
                           get_as<std::vector<std::size_t>>(t, "tokens", "turn"),
                           t.contains("corrupted") ? get_as<bool>(t, "corrupted", "turn") : false});
    for (const Turn& t : s.turns)
        for (std::size_t id : t.tokens)
            require(vocab::is_text(id), ErrorKind::parse, "turn token outside the text vocabulary");
    s.render();
    return s;
}

std::string dataset_to_jsonl(const std::vector<StreamSample>& samples) {
    std::string out;
    for (const StreamSample& s : samples) out += sample_to_json(s).dump() + "\n";
    return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<StreamSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << dataset_to_jsonl(samples);
    require(static_cast<bool>(out), ErrorKind::io, "write failed for " + path.string());
}

std::vector<StreamSample> load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open dataset " + path.string());
    std::vector<StreamSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(sample_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::parse) throw;
            fail(ErrorKind::parse, path.string() + ":" + std::to_string(lineno) + ": " + e.message());
        }
    }
    return out;
}

// ---- stream files ----------------------------------------------------------------

std::vector<SyntheticFrame> load_stream_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open stream file " + path.string());
    std::vector<SyntheticFrame> frames;
    std::string line;
    std::size_t lineno = 0;
    auto where = [&] { return path.string() + ":" + std::to_string(lineno); };
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            fail(ErrorKind::parse, where() + ": " + e.what());
        }
        if (j.contains("generator")) {
            const json& g = j.at("generator");
            std::vector<VideoEvent> events;
            if (g.contains("events"))
                for (const json& e : g.at("events"))
                    events.push_back({get_as<double>(e, "onset", where()),
                                      event_kind_from_string(get_as<std::string>(e, "kind", where())),
                                      e.contains("duration") ? e.at("duration").get<double>()
                                                             : kBundlePeriod});
            VideoSpec spec;
            if (g.contains("background")) spec.background = g.at("background").get<double>();
            if (g.contains("noise")) spec.noise = g.at("noise").get<double>();
            auto gen = synth_video(get_as<std::uint64_t>(g, "seed", where()),
                                   get_as<double>(g, "duration", where()), events, spec);
            const double offset = frames.empty() ? 0.0 : frames.back().t + kFramePeriod;
            for (SyntheticFrame& f : gen) {
                f.t += offset;
                frames.push_back(std::move(f));
            }
            continue;
        }
        SyntheticFrame f;
        f.t = get_as<double>(j, "t", where());
        f.field = get_as<std::vector<double>>(j, "field", where());
        require(f.field.size() == kPatchCount, ErrorKind::shape,
                where() + ": field must have 576 values");
        if (j.contains("scene_spec"))
            for (const json& p : j.at("scene_spec"))
                f.scene.push_back({region_kind_from_string(get_as<std::string>(p, "kind", where())),
                                   get_as<int>(p, "top", where()), get_as<int>(p, "left", where()),
                                   get_as<int>(p, "height", where()),
                                   get_as<int>(p, "width", where()),
                                   get_as<double>(p, "intensity", where())});
        if (j.contains("boxes")) {
            std::vector<Box> boxes;
            for (const json& b : j.at("boxes"))
                boxes.push_back({region_kind_from_string(get_as<std::string>(b, "kind", where())),
                                 get_as<int>(b, "r0", where()), get_as<int>(b, "c0", where()),
                                 get_as<int>(b, "r1", where()), get_as<int>(b, "c1", where())});
            f.boxes = std::move(boxes);
        }
        if (!frames.empty())
            require(f.t > frames.back().t, ErrorKind::stream,
                    where() + ": timestamps must increase");
        frames.push_back(std::move(f));
    }
    return frames;
}

void save_stream_file(const std::filesystem::path& path, const std::vector<SyntheticFrame>& frames) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    for (const SyntheticFrame& f : frames) {
        json scene = json::array();
        for (const Primitive& p : f.scene)
            scene.push_back({{"kind", to_string(p.kind)},
                             {"top", p.top},
                             {"left", p.left},
                             {"height", p.height},
                             {"width", p.width},
                             {"intensity", p.intensity}});
        json j = {{"t", f.t}, {"field", f.field}, {"scene_spec", scene}};
        if (f.boxes) {
            json boxes = json::array();
            for (const Box& b : *f.boxes)
                boxes.push_back({{"kind", to_string(b.kind)},
                                 {"r0", b.r0},
                                 {"c0", b.c0},
                                 {"r1", b.r1},
                                 {"c1", b.c1}});
            j["boxes"] = boxes;
        }
        out << j.dump() << "\n";
    }
}

}  // namespace ovd
