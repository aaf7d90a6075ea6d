// SPDX-License-Identifier: Apache-2.0
#pragma once

// Online dialogue loop: frame ingestion, per-bundle determination, slow-path
// trigger and greedy response generation over a growing decode cache.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovd/assistant.hpp"

namespace ovd {

struct EngineOptions {
    bool slow_path = true;
    std::size_t max_len = 32;
    double threshold = 0.5;
    bool record = false;   // keep every fed element and its logits for replay
    bool timings = false;  // per-stage wall-clock; off keeps logs deterministic
};

EngineOptions engine_options(const RunConfig& config);

struct DecisionRecord {
    std::size_t index = 0;
    double t = 0.0;
    Decision decision = Decision::silent;
    double logit_gap = 0.0;
};

struct TurnRecord {
    double t = 0.0;
    std::vector<std::size_t> tokens;
    bool truncated = false;
    bool template_used = false;
};

struct StageTimings {
    std::size_t index = 0;
    double encode_ms = 0.0;
    double aggregate_ms = 0.0;
    double decide_ms = 0.0;
    double slow_path_ms = 0.0;
    double generate_ms = 0.0;
};

struct EpisodeLog {
    nlohmann::json header = nlohmann::json::object();
    std::vector<Query> queries;
    std::vector<DecisionRecord> decisions;
    std::vector<TurnRecord> turns;
    std::vector<StageTimings> timings;

    /// FNV-1a over the query, decision and turn lines (timings excluded).
    std::uint64_t hash() const;
};

std::string episode_log_to_jsonl(const EpisodeLog& log);
EpisodeLog episode_log_from_jsonl(const std::string& text, const std::string& origin = "<log>");
void save_episode(const std::filesystem::path& path, const EpisodeLog& log);
/// Parse error with line number on malformed input; data error when the
/// footer hash disagrees with the body.
EpisodeLog load_episode(const std::filesystem::path& path);

struct StepResult {
    Decision decision = Decision::silent;
    double logit_gap = 0.0;
    std::optional<TurnRecord> turn;
};

class EpisodeState {
public:
    EpisodeState(const Assistant& assistant, const EngineOptions& options);

    /// Query tokens enter before the next bundle whose last frame comes after `t`.
    void inject_user_query(std::vector<std::size_t> tokens, double t);
    /// Buffers a frame; the fourth frame of a group forms a bundle and steps.
    std::optional<StepResult> ingest_frame(const SyntheticFrame& frame);
    StepResult step(const FrameBundle& bundle);

    double current_time() const noexcept { return current_time_; }
    std::size_t buffered() const noexcept { return buffer_.size(); }
    std::size_t bundles() const noexcept { return n_bundles_; }
    const EpisodeLog& log() const noexcept { return log_; }
    EpisodeLog& log() noexcept { return log_; }

    /// Everything fed to the model so far, in order (requires record).
    const std::vector<Element>& transcript() const noexcept { return elements_; }
    Tensor transcript_visual() const;
    /// Incremental logits for every transcript position (requires record).
    Tensor recorded_logits() const;
    std::size_t cache_length() const noexcept { return cache_.length; }

private:
    Tensor feed(std::vector<Element> elements, const std::vector<Tensor>& visual_parts);

    const Assistant& assistant_;
    EngineOptions options_;
    DecodeCache cache_;
    std::vector<SyntheticFrame> buffer_;
    std::deque<Query> pending_queries_;
    std::vector<Element> pending_;
    std::size_t n_frames_ = 0;
    std::size_t n_bundles_ = 0;
    std::size_t n_visual_ = 0;
    double current_time_ = 0.0;
    EpisodeLog log_;

    std::vector<Element> elements_;
    std::vector<Tensor> visual_parts_;
    std::vector<Tensor> logit_parts_;
};

/// Renders the sample, feeds its frames and queries through a fresh state and
/// returns the state (for transcript access) with a completed log.
struct EpisodeRun {
    EpisodeLog log;
    std::vector<Element> transcript;
    Tensor visual;
    Tensor logits;
};

EpisodeRun run_episode(const Assistant& assistant, const std::vector<SyntheticFrame>& frames,
                       const std::vector<Query>& queries, const EngineOptions& options,
                       std::size_t episode_id = 0);
EpisodeRun run_episode(const Assistant& assistant, const StreamSample& sample,
                       const EngineOptions& options);

}  // namespace ovd
