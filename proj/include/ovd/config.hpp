// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration. File format: one `key = value` per line, `#` starts a
// comment, blank lines ignored. Unknown keys are rejected. The canonical dump
// lists every key in sorted order; its FNV-1a hash identifies the run.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ovd/aggregation.hpp"
#include "ovd/dropping.hpp"
#include "ovd/encoders.hpp"
#include "ovd/model.hpp"
#include "ovd/slow_path.hpp"

namespace ovd {

struct SlowPathConfig {
    bool enabled = true;
    GridMode grid = GridMode::grid;
    bool box = true;
    bool jitter = false;
    std::uint64_t jitter_seed = 5;
    bool train_with_template = true;
};

struct StreamConfig {
    double w = 1.0;
    /// Also supervise SILENCE at the TURN_END position closing a response.
    bool supervise_in_response = false;
    /// Keep streaming supervision on silent frames that follow a user query.
    bool supervise_after_query = true;
    double respond_threshold = 0.5;
};

struct GenerateConfig {
    std::size_t max_len = 32;
};

struct DataConfig {
    std::uint64_t seed = 7;
    std::size_t episodes = 200;
    std::uint64_t heldout_seed = 1007;
    std::size_t heldout_episodes = 50;
    double duration = 10.0;
    double event_rate = 0.3;  // events per second
    bool query_at_start = true;
    std::string augment = "none";  // none or a comma list of strategies
    double augment_fraction = 0.25;
    double background = 0.3;
    double noise = 0.02;
};

struct TrainConfig {
    std::size_t steps = 600;
    std::size_t batch = 4;
    double lr = 2e-3;
    double weight_decay = 0.01;
    double clip = 1.0;
    double warmup_frac = 0.05;
    std::uint64_t seed = 3;
    std::size_t log_every = 10;
};

struct MetricsConfig {
    bool include_corrupted = false;
    std::string ppl_positions = "all";        // all | lm_only
    std::string unmatched_penalty = "stream_end";  // stream_end | seconds as a number
};

struct RunConfig {
    ModelConfig model;
    EncoderConfig encoders;
    AggregationConfig aggregation;
    DroppingConfig dropping;
    SlowPathConfig slow_path;
    StreamConfig stream;
    GenerateConfig generate;
    DataConfig data;
    TrainConfig train;
    MetricsConfig metrics;

    /// Sets one key from its text form; config error on unknown key or bad value.
    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    static const std::vector<std::string>& keys();

    void validate() const;
    std::string dump() const;
    std::uint64_t hash() const;
    std::string hash_hex() const;

    static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
    static RunConfig load(const std::filesystem::path& path);
};

/// Applies `key=value` strings in order.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

std::string format_double(double v);
std::string hex64(std::uint64_t v);

}  // namespace ovd
