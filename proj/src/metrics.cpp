// SPDX-License-Identifier: Apache-2.0
#include "ovd/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <thread>

#include "ovd/error.hpp"
#include "ovd/flops.hpp"

namespace ovd {

TokenCounts& TokenCounts::operator+=(const TokenCounts& o) {
    nll_sum += o.nll_sum;
    n_ppl += o.n_ppl;
    det_correct += o.det_correct;
    n_det += o.n_det;
    lm_correct += o.lm_correct;
    n_lm += o.n_lm;
    return *this;
}

ScoreOptions score_options(const MetricsConfig& metrics, const StreamConfig& stream) {
    ScoreOptions o;
    o.include_corrupted = metrics.include_corrupted;
    o.ppl_lm_only = metrics.ppl_positions == "lm_only";
    o.threshold = stream.respond_threshold;
    return o;
}

namespace {

double row_nll(std::span<const double> row, std::size_t target) {
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    return std::log(z) + mx - row[target];
}

}  // namespace

TokenCounts score_logits(const Tensor& logits, const InterleavedSequence& seq,
                         std::span<const char> corrupted, const ScoreOptions& options) {
    validate_supervision(seq, logits.rows());
    require(corrupted.empty() || corrupted.size() == seq.size(), ErrorKind::supervision,
            "corruption mask length differs from the sequence");
    TokenCounts c;
    const std::size_t V = logits.cols();
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (!seq.stream[i] && !seq.lm[i]) continue;
        const std::span<const double> row = logits.data().subspan(i * V, V);
        const std::size_t target = seq.target[i];
        if (seq.stream[i]) {
            const Decision d = determine(row, options.threshold);
            const std::size_t chosen = d == Decision::respond ? vocab::RESPOND : vocab::SILENCE;
            ++c.n_det;
            if (chosen == target) ++c.det_correct;
            if (!options.ppl_lm_only) {
                c.nll_sum += row_nll(row, target);
                ++c.n_ppl;
            }
        } else {
            if (!options.include_corrupted && !corrupted.empty() && corrupted[i]) continue;
            ++c.n_lm;
            if (decode_choice(row) == target) ++c.lm_correct;
            c.nll_sum += row_nll(row, target);
            ++c.n_ppl;
        }
    }
    return c;
}

double lm_ppl(const TokenCounts& c) {
    require(c.n_ppl > 0, ErrorKind::metric, "lm_ppl: no supervised positions");
    return std::exp(c.nll_sum / static_cast<double>(c.n_ppl));
}

double lm_correctness(const TokenCounts& c) {
    require(c.n_lm > 0, ErrorKind::metric, "lm_correctness: no response positions");
    return static_cast<double>(c.lm_correct) / static_cast<double>(c.n_lm);
}

double determination_accuracy(const TokenCounts& c) {
    require(c.n_det > 0, ErrorKind::metric, "determination accuracy: no streaming positions");
    return static_cast<double>(c.det_correct) / static_cast<double>(c.n_det);
}

double fluency(const TokenCounts& c) {
    const std::size_t n = c.n_det + c.n_lm;
    require(n > 0, ErrorKind::metric, "fluency: no supervised positions");
    return static_cast<double>(c.det_correct + c.lm_correct) / static_cast<double>(n);
}

TimeDiffResult& TimeDiffResult::operator+=(const TimeDiffResult& o) {
    sum += o.sum;
    n += o.n;
    unmatched += o.unmatched;
    empty = empty && o.empty;
    return *this;
}

TimeDiffResult time_diff(std::span<const double> expected, std::span<const double> actual,
                         double stream_end, double penalty) {
    TimeDiffResult r;
    std::vector<double> exp_sorted(expected.begin(), expected.end());
    std::sort(exp_sorted.begin(), exp_sorted.end());
    std::vector<double> act(actual.begin(), actual.end());
    std::sort(act.begin(), act.end());
    std::vector<char> used(act.size(), 0);
    for (double e : exp_sorted) {
        std::size_t best = act.size();
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < act.size(); ++k) {
            if (used[k]) continue;
            const double d = std::abs(act[k] - e);
            if (d < best_d) {
                best_d = d;
                best = k;
            }
        }
        if (best < act.size()) {
            used[best] = 1;
            r.sum += best_d;
        } else {
            r.sum += penalty < 0.0 ? std::max(0.0, stream_end - e) : penalty;
            ++r.unmatched;
        }
        ++r.n;
    }
    r.empty = r.n == 0;
    return r;
}

double unmatched_penalty_seconds(const MetricsConfig& metrics) {
    if (metrics.unmatched_penalty == "stream_end") return -1.0;
    return std::stod(metrics.unmatched_penalty);
}

TimeDiffResult time_diff(const EpisodeLog& log, const EncodedEpisode& episode,
                         const MetricsConfig& metrics) {
    std::vector<double> expected, actual;
    for (const Turn& t : episode.turns) expected.push_back(t.t);
    for (const TurnRecord& t : log.turns) actual.push_back(t.t);
    return time_diff(expected, actual, episode.duration, unmatched_penalty_seconds(metrics));
}

// ---- report ------------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    return {{"lm_ppl", lm_ppl},
            {"lm_correctness", lm_correctness},
            {"time_diff", time_diff},
            {"fluency", fluency},
            {"determination_accuracy", determination_accuracy},
            {"flops", flops},
            {"n_turns", n_turns},
            {"n_frames", n_frames},
            {"n_episodes", n_episodes},
            {"n_responses", n_responses},
            {"time_diff_empty", time_diff_empty},
            {"config_hash", config_hash},
            {"seed", seed},
            {"label", label}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.lm_ppl = j.at("lm_ppl").get<double>();
        r.lm_correctness = j.at("lm_correctness").get<double>();
        r.time_diff = j.at("time_diff").get<double>();
        r.fluency = j.at("fluency").get<double>();
        r.determination_accuracy = j.at("determination_accuracy").get<double>();
        r.flops = j.at("flops").get<std::uint64_t>();
        r.n_turns = j.at("n_turns").get<std::size_t>();
        r.n_frames = j.at("n_frames").get<std::size_t>();
        r.n_episodes = j.at("n_episodes").get<std::size_t>();
        r.n_responses = j.at("n_responses").get<std::size_t>();
        r.time_diff_empty = j.at("time_diff_empty").get<bool>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.label = j.at("label").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, std::string("report: ") + e.what());
    }
    return r;
}

namespace {

struct EpisodeEval {
    TokenCounts counts;
    TimeDiffResult td;
    std::uint64_t flops = 0;
    std::size_t n_turns = 0;
    std::size_t n_frames = 0;
    std::size_t n_responses = 0;
};

EpisodeEval evaluate_episode(const Assistant& assistant, const StreamSample& sample,
                             const EvalOptions& options) {
    const RunConfig& cfg = assistant.config();
    StreamSample s = sample;
    if (s.frames.empty()) s.render();
    const EncodedEpisode episode = assistant.encode(s);
    const SequenceBuild build = build_sequence(assistant, episode, evaluation_layout(cfg));
    const Tensor logits = assistant.lm.forward(build.seq);

    EpisodeEval out;
    out.counts = score_logits(logits, build.seq, build.corrupted,
                              score_options(cfg.metrics, cfg.stream));
    out.flops = flops_estimate(cfg.model, cfg.dropping.beta, cfg.dropping.policy,
                               SeqProfile::from_elements(build.seq.elements))
                    .total;
    out.n_turns = episode.turns.size();
    out.n_frames = episode.bundles.size();
    if (options.online) {
        const EpisodeRun run = run_episode(assistant, s, engine_options(cfg));
        out.td = time_diff(run.log, episode, cfg.metrics);
        out.n_responses = run.log.turns.size();
    }
    return out;
}

}  // namespace

EvalReport build_report(const Assistant& assistant, const std::vector<StreamSample>& samples,
                        const EvalOptions& options) {
    std::vector<EpisodeEval> results(samples.size());
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.threads, samples.size()));
    if (n_threads == 1) {
        for (std::size_t i = 0; i < samples.size(); ++i)
            results[i] = evaluate_episode(assistant, samples[i], options);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::exception_ptr> errors(n_threads);
        std::vector<std::thread> workers;
        for (std::size_t w = 0; w < n_threads; ++w)
            workers.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < samples.size(); i = next++)
                        results[i] = evaluate_episode(assistant, samples[i], options);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& t : workers) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    // reduction in episode order
    TokenCounts counts;
    TimeDiffResult td;
    EvalReport r;
    long double flops = 0.0L;
    for (const EpisodeEval& e : results) {
        counts += e.counts;
        td += e.td;
        flops += static_cast<long double>(e.flops);
        r.n_turns += e.n_turns;
        r.n_frames += e.n_frames;
        r.n_responses += e.n_responses;
    }
    r.lm_ppl = lm_ppl(counts);
    r.lm_correctness = counts.n_lm > 0 ? lm_correctness(counts) : 0.0;
    r.fluency = fluency(counts);
    r.determination_accuracy = counts.n_det > 0 ? determination_accuracy(counts) : 0.0;
    r.time_diff = td.mean();
    r.time_diff_empty = td.empty;
    r.flops = samples.empty()
                  ? 0
                  : static_cast<std::uint64_t>(std::llround(flops / static_cast<long double>(samples.size())));
    r.n_episodes = samples.size();
    r.config_hash = assistant.config().hash_hex();
    r.seed = assistant.config().data.heldout_seed;
    return r;
}

std::string reports_to_csv(const std::vector<EvalReport>& reports) {
    std::string out =
        "label,lm_ppl,lm_correctness,time_diff,fluency,determination_accuracy,flops,n_turns,"
        "n_frames,n_responses,config_hash\n";
    for (const EvalReport& r : reports) {
        std::string label = r.label;
        if (label.find_first_of(",\"") != std::string::npos) {
            std::string q = "\"";
            for (char ch : label) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
            label = q + "\"";
        }
        out += label + "," + format_double(r.lm_ppl) + "," + format_double(r.lm_correctness) + "," +
               format_double(r.time_diff) + "," + format_double(r.fluency) + "," +
               format_double(r.determination_accuracy) + "," + std::to_string(r.flops) + "," +
               std::to_string(r.n_turns) + "," + std::to_string(r.n_frames) + "," +
               std::to_string(r.n_responses) + "," + r.config_hash + "\n";
    }
    return out;
}

}  // namespace ovd
