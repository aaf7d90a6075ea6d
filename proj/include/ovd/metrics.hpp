// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dialogue metrics: teacher-forced perplexity, token correctness and fluency,
// plus response timing against the expected turn times.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovd/assistant.hpp"
#include "ovd/dialogue.hpp"

namespace ovd {

/// Sufficient statistics of one or more teacher-forced episodes.
struct TokenCounts {
    double nll_sum = 0.0;
    std::size_t n_ppl = 0;
    std::size_t det_correct = 0;
    std::size_t n_det = 0;
    std::size_t lm_correct = 0;
    std::size_t n_lm = 0;

    TokenCounts& operator+=(const TokenCounts& o);
};

struct ScoreOptions {
    bool include_corrupted = false;
    bool ppl_lm_only = false;
    double threshold = 0.5;
};

ScoreOptions score_options(const MetricsConfig& metrics, const StreamConfig& stream);

/// Scores logits [N x V] against a sequence's supervision. `corrupted` marks
/// LM positions of corrupted turns (may be empty).
TokenCounts score_logits(const Tensor& logits, const InterleavedSequence& seq,
                         std::span<const char> corrupted, const ScoreOptions& options);

double lm_ppl(const TokenCounts& c);
double lm_correctness(const TokenCounts& c);
double determination_accuracy(const TokenCounts& c);
double fluency(const TokenCounts& c);

struct TimeDiffResult {
    double sum = 0.0;
    std::size_t n = 0;
    std::size_t unmatched = 0;
    bool empty = true;

    double mean() const { return n == 0 ? 0.0 : sum / static_cast<double>(n); }
    TimeDiffResult& operator+=(const TimeDiffResult& o);
};

/// Expected turns are taken in time order and each matched to the nearest
/// unmatched actual response (earlier wins a tie). Unmatched expected turns
/// cost `penalty` seconds, or the distance to the stream end when negative.
TimeDiffResult time_diff(std::span<const double> expected, std::span<const double> actual,
                         double stream_end, double penalty = -1.0);
TimeDiffResult time_diff(const EpisodeLog& log, const EncodedEpisode& episode,
                         const MetricsConfig& metrics);

/// Penalty seconds from the metrics config; negative means "stream end".
double unmatched_penalty_seconds(const MetricsConfig& metrics);

struct EvalReport {
    double lm_ppl = 0.0;
    double lm_correctness = 0.0;
    double time_diff = 0.0;
    double fluency = 0.0;
    double determination_accuracy = 0.0;
    std::uint64_t flops = 0;  // mean multiply-accumulates per teacher-forced episode
    std::size_t n_turns = 0;
    std::size_t n_frames = 0;
    std::size_t n_episodes = 0;
    std::size_t n_responses = 0;
    bool time_diff_empty = false;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string label;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
};

struct EvalOptions {
    bool online = true;  // run the dialogue loop for TimeDiff
    std::size_t threads = 1;
};

/// Teacher-forced metrics plus online TimeDiff over the samples.
EvalReport build_report(const Assistant& assistant, const std::vector<StreamSample>& samples,
                        const EvalOptions& options = {});

std::string reports_to_csv(const std::vector<EvalReport>& reports);

}  // namespace ovd
