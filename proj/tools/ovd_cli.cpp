// SPDX-License-Identifier: Apache-2.0
// ovd: dataset generation, training, evaluation, online simulation and FLOPs
// accounting.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ovd/assistant.hpp"
#include "ovd/checkpoint.hpp"
#include "ovd/config.hpp"
#include "ovd/dataset.hpp"
#include "ovd/dialogue.hpp"
#include "ovd/error.hpp"
#include "ovd/flops.hpp"
#include "ovd/metrics.hpp"
#include "ovd/rng.hpp"
#include "ovd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ovd;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;

    RunConfig load() const {
        RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
        apply_overrides(c, overrides);
        c.validate();
        return c;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << text;
    require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// data settings only, so training-side overrides do not flag the corpus
std::string data_section(const RunConfig& config) {
    std::string out;
    std::stringstream ss(config.dump());
    std::string line;
    while (std::getline(ss, line))
        if (line.rfind("data.", 0) == 0) out += line + "\n";
    return out;
}

void warn(const std::string& msg) { std::cerr << "warning: " << msg << "\n"; }

void check_manifest_hash(const fs::path& data_dir, const RunConfig& config) {
    const fs::path manifest = data_dir / "manifest.json";
    if (!fs::exists(manifest)) return;
    const json m = json::parse(read_text(manifest));
    if (m.value("data_hash", std::string()) != hex64(fnv1a(data_section(config))))
        warn("dataset was generated with different data.* settings");
}

int cmd_gen_data(const Common& common, const std::string& out_dir) {
    const RunConfig config = common.load();
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    const auto train = generate_dataset(config.data.seed, config.data.episodes, config.data);
    DataConfig held = config.data;
    held.augment = "none";
    const auto heldout = generate_dataset(config.data.heldout_seed, config.data.heldout_episodes, held);
    const std::string train_text = dataset_to_jsonl(train);
    const std::string held_text = dataset_to_jsonl(heldout);
    write_text(dir / "train.jsonl", train_text);
    write_text(dir / "heldout.jsonl", held_text);
    std::size_t train_turns = 0, held_turns = 0;
    for (const auto& s : train) train_turns += s.turns.size();
    for (const auto& s : heldout) held_turns += s.turns.size();
    const json manifest = {
        {"format", "ovd-dataset/1"},
        {"config_hash", config.hash_hex()},
        {"data_hash", hex64(fnv1a(data_section(config)))},
        {"train",
         {{"file", "train.jsonl"},
          {"seed", config.data.seed},
          {"episodes", train.size()},
          {"turns", train_turns},
          {"checksum", hex64(fnv1a(train_text))}}},
        {"heldout",
         {{"file", "heldout.jsonl"},
          {"seed", config.data.heldout_seed},
          {"episodes", heldout.size()},
          {"turns", held_turns},
          {"checksum", hex64(fnv1a(held_text))}}}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    std::cout << "wrote " << train.size() << " training and " << heldout.size()
              << " held-out episodes to " << dir.string() << "\n";
    return 0;
}

int cmd_train(const Common& common, const std::string& data_dir, const std::string& out_dir,
              const std::string& resume) {
    const RunConfig config = common.load();
    check_manifest_hash(data_dir, config);
    const auto samples = load_dataset(fs::path(data_dir) / "train.jsonl");
    Assistant assistant(config);
    std::vector<EncodedEpisode> episodes;
    episodes.reserve(samples.size());
    for (const auto& s : samples) episodes.push_back(assistant.encode(s));

    Trainer trainer(assistant, std::move(episodes));
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    const fs::path log_path = dir / "train_log.jsonl";
    if (!resume.empty()) {
        trainer.resume(resume);
        std::cout << "resumed at step " << trainer.current_step() << "\n";
    }
    std::ofstream log(log_path, resume.empty() ? std::ios::binary | std::ios::trunc
                                               : std::ios::binary | std::ios::app);
    require(static_cast<bool>(log), ErrorKind::io, "cannot write " + log_path.string());
    const std::size_t every = std::max<std::size_t>(1, config.train.log_every);
    trainer.run([&](const TrainLogEntry& e) {
        log << e.to_json().dump() << "\n";
        if (e.step % every == 0 || e.step + 1 == config.train.steps)
            std::cout << "step " << e.step << " loss " << format_double(e.loss) << "\n";
    });
    log.flush();
    trainer.save(dir / "checkpoint.json");
    std::cout << "checkpoint: " << (dir / "checkpoint.json").string() << "\n";
    return 0;
}

RunConfig with_override(RunConfig c, const std::string& key, const std::string& value) {
    c.set(key, value);
    c.validate();
    return c;
}

int cmd_eval(const Common& common, const std::string& data_dir, const std::string& checkpoint,
             const std::string& split, const std::string& out, const std::string& csv,
             const std::string& sweep, bool offline_only, std::size_t threads) {
    const RunConfig config = common.load();
    const auto samples = load_dataset(fs::path(data_dir) / (split + ".jsonl"));
    std::vector<std::pair<std::string, RunConfig>> runs;
    if (sweep.empty()) {
        runs.emplace_back("base", config);
    } else {
        const auto eq = sweep.find('=');
        require(eq != std::string::npos, ErrorKind::config, "--sweep expects key=v1,v2,...");
        const std::string key = sweep.substr(0, eq);
        std::stringstream values(sweep.substr(eq + 1));
        std::string v;
        while (std::getline(values, v, ','))
            runs.emplace_back(key + "=" + v, with_override(config, key, v));
        require(!runs.empty(), ErrorKind::config, "--sweep has no values");
    }
    EvalOptions options;
    options.online = !offline_only;
    options.threads = threads;
    std::vector<EvalReport> reports;
    for (const auto& [label, cfg] : runs) {
        Assistant assistant(cfg);
        if (!checkpoint.empty() && !load_parameters(assistant, checkpoint))
            warn("checkpoint config hash differs from the evaluation config (" + label + ")");
        EvalReport r = build_report(assistant, samples, options);
        r.label = label;
        reports.push_back(r);
    }
    json doc;
    if (sweep.empty()) {
        doc = reports.front().to_json();
    } else {
        doc = {{"sweep", sweep}, {"rows", json::array()}};
        for (const auto& r : reports) doc["rows"].push_back(r.to_json());
    }
    const std::string text = doc.dump(2) + "\n";
    if (out.empty())
        std::cout << text;
    else
        write_text(out, text);
    if (!csv.empty()) write_text(csv, reports_to_csv(reports));
    return 0;
}

std::vector<Query> parse_queries(const std::vector<std::string>& specs) {
    std::vector<Query> out;
    for (const std::string& s : specs) {
        const auto colon = s.find(':');
        require(colon != std::string::npos, ErrorKind::config, "--query expects t:word word ...");
        Query q;
        try {
            q.t = std::stod(s.substr(0, colon));
        } catch (const std::exception&) {
            fail(ErrorKind::config, "bad query time in '" + s + "'");
        }
        std::stringstream words(s.substr(colon + 1));
        std::string w;
        while (words >> w) q.tokens.push_back(token_id(w));
        out.push_back(std::move(q));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Query& a, const Query& b) { return a.t < b.t; });
    return out;
}

int cmd_simulate(const Common& common, const std::string& checkpoint, const std::string& stream,
                 std::size_t episode, const std::string& out, bool no_slow_path, bool timings,
                 const std::vector<std::string>& query_specs) {
    RunConfig config = common.load();
    if (no_slow_path) config.slow_path.enabled = false;
    Assistant assistant(config);
    if (!checkpoint.empty() && !load_parameters(assistant, checkpoint))
        warn("checkpoint config hash differs from the simulation config");
    EngineOptions options = engine_options(config);
    options.timings = timings;

    std::vector<SyntheticFrame> frames;
    std::vector<Query> queries = parse_queries(query_specs);
    if (!stream.empty()) {
        frames = load_stream_file(stream);
        if (query_specs.empty() && config.data.query_at_start) queries.push_back({0.0, opening_query()});
    } else {
        StreamSample s = generate_episode(config.data.heldout_seed, episode, config.data);
        frames = s.frames;
        if (query_specs.empty()) queries = s.queries;
    }
    const EpisodeRun run = run_episode(assistant, frames, queries, options, episode);
    const std::string text = episode_log_to_jsonl(run.log);
    if (out.empty())
        std::cout << text;
    else
        write_text(out, text);
    std::cerr << run.log.decisions.size() << " decisions, " << run.log.turns.size()
              << " responses\n";
    return 0;
}

int cmd_bench_flops(const Common& common, const std::string& out, std::size_t frames,
                    std::size_t responses, std::size_t response_len) {
    const RunConfig config = common.load();
    const std::size_t tpf = fused_token_count(config.aggregation.variant, config.aggregation.general_mode,
                                              config.aggregation.ego_mode);
    const SeqProfile plain = episode_profile(frames, tpf, responses, response_len, false);
    const SeqProfile with_kf = episode_profile(frames, tpf, responses, response_len, true);
    const FlopsReport unrouted = flops_estimate(config.model, 0.0, PlacementPolicy::none, plain);
    json rows = json::array();
    auto row = [&](const std::string& label, PlacementPolicy policy, double beta) {
        const FlopsReport a = flops_estimate(config.model, beta, policy, plain);
        const FlopsReport b = flops_estimate(config.model, beta, policy, with_kf);
        rows.push_back({{"label", label},
                        {"policy", to_string(policy)},
                        {"beta", beta},
                        {"total", a.total},
                        {"keyframe_augmentation", b.total - a.total},
                        {"total_with_keyframes", b.total},
                        {"ratio_to_unrouted",
                         static_cast<double>(a.total) / static_cast<double>(unrouted.total)}});
    };
    row("no_dropping", PlacementPolicy::none, 0.0);
    for (PlacementPolicy p : {PlacementPolicy::all, PlacementPolicy::interleaved,
                              PlacementPolicy::deep, PlacementPolicy::interleaved_and_deep})
        for (double beta : {0.2, 0.5, 0.8})
            row(std::string(to_string(p)) + "@" + format_double(beta), p, beta);
    row("configured", config.dropping.policy, config.dropping.beta);
    const json doc = {{"config_hash", config.hash_hex()},
                      {"profile",
                       {{"frames", frames},
                        {"tokens_per_frame", tpf},
                        {"responses", responses},
                        {"response_len", response_len},
                        {"positions", plain.size()},
                        {"positions_with_keyframes", with_kf.size()}}},
                      {"unit", "multiply-accumulates"},
                      {"rows", rows},
                      {"configured_detail",
                       flops_estimate(config.model, config.dropping.beta, config.dropping.policy,
                                      plain)
                           .to_json()}};
    const std::string text = doc.dump(2) + "\n";
    if (out.empty())
        std::cout << text;
    else
        write_text(out, text);
    return 0;
}

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::policy:
        case ErrorKind::strategy:
        case ErrorKind::threshold:
            return 2;
        case ErrorKind::numeric:
            return 4;
        default:
            return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ovd: online video dialogue toolkit"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    app.add_option("-c,--config", common.config_path, "key = value config file");
    app.add_option("-s,--set", common.overrides, "override key=value (repeatable)");

    std::string out, data = "data", checkpoint, split = "heldout", csv, sweep, resume, stream;
    std::size_t threads = 1, episode = 0, frames = 20, responses = 3, response_len = 3;
    bool offline_only = false, no_slow_path = false, timings = false;
    std::vector<std::string> queries;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus");
    gen->add_option("-o,--out", out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train on <data>/train.jsonl");
    train->add_option("-d,--data", data, "dataset directory");
    train->add_option("-o,--out", out, "run directory")->required();
    train->add_option("--resume", resume, "checkpoint manifest to continue from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("-d,--data", data, "dataset directory");
    eval->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)");
    eval->add_option("--split", split, "train or heldout")->check(CLI::IsMember({"train", "heldout"}));
    eval->add_option("-o,--out", out, "report.json path (stdout when absent)");
    eval->add_option("--csv", csv, "CSV export path");
    eval->add_option("--sweep", sweep, "key=v1,v2,... one report row per value");
    eval->add_flag("--offline", offline_only, "skip the online loop (no TimeDiff)");
    eval->add_option("--threads", threads, "episode-level worker threads");

    auto* sim = app.add_subcommand("simulate", "run the online dialogue loop");
    sim->add_option("--checkpoint", checkpoint, "checkpoint manifest (.json)");
    sim->add_option("--stream", stream, "stream JSONL file");
    sim->add_option("--episode", episode, "held-out generator episode when no stream is given");
    sim->add_option("--query", queries, "t:word word ... (repeatable)");
    sim->add_option("-o,--out", out, "episode log path (stdout when absent)");
    sim->add_flag("--no-slow-path", no_slow_path, "bare RESPOND instead of the keyframe template");
    sim->add_flag("--timings", timings, "log per-stage latency");

    auto* bench = app.add_subcommand("bench-flops", "analytic FLOPs per configuration");
    bench->add_option("-o,--out", out, "flops.json path (stdout when absent)");
    bench->add_option("--frames", frames, "frames in the profile");
    bench->add_option("--responses", responses, "responding frames in the profile");
    bench->add_option("--response-len", response_len, "tokens per response");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        if (gen->parsed()) return cmd_gen_data(common, out);
        if (train->parsed()) return cmd_train(common, data, out, resume);
        if (eval->parsed())
            return cmd_eval(common, data, checkpoint, split, out, csv, sweep, offline_only, threads);
        if (sim->parsed())
            return cmd_simulate(common, checkpoint, stream, episode, out, no_slow_path, timings,
                                queries);
        if (bench->parsed()) return cmd_bench_flops(common, out, frames, responses, response_len);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
