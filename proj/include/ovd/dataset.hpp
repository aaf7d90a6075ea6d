// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic narration episodes, dialogue augmentations, and the JSON-lines
// dataset and stream file formats.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovd/config.hpp"
#include "ovd/encoders.hpp"

namespace ovd {

/// Word list of the text vocabulary; id = kFirstText + index. Ids past the
/// list print as w<id>.
const std::vector<std::string>& text_words();
std::string token_name(std::size_t id);
std::size_t token_id(const std::string& word);

/// Fixed three-word narration of an event kind.
std::vector<std::size_t> narration(EventKind kind);
/// Tokens of the opening user query.
std::vector<std::size_t> opening_query();

struct Query {
    double t = 0.0;
    std::vector<std::size_t> tokens;
};

struct Turn {
    double t = 0.0;  // expected response time, on the 0.5 s bundle grid
    std::vector<std::size_t> tokens;
    bool corrupted = false;
};

/// Frame-level edit applied after rendering: insert duplicates the frame
/// before `at` `count` times, remove deletes `count` frames starting at `at`,
/// freeze overwrites them with copies of frame at - 1.
struct FrameEdit {
    std::string op;
    std::size_t at = 0;
    std::size_t count = 0;
};

struct StreamSample {
    std::size_t id = 0;
    std::uint64_t video_seed = 0;
    double duration = 0.0;  // rendered seconds before any edit
    VideoSpec spec;
    std::vector<VideoEvent> events;
    std::vector<FrameEdit> edits;
    std::vector<Query> queries;
    std::vector<Turn> turns;
    std::vector<SyntheticFrame> frames;  // materialised, not serialised

    /// Renders frames from (video_seed, duration, events, spec) and edits.
    void render();
    /// Seconds covered after trimming the trailing partial second.
    double trimmed_duration() const;
};

/// Onsets for n events on the 0.5 s grid, at least 1 s apart, inside
/// [0, duration - 0.5]. Generation error if they cannot fit.
std::vector<double> place_onsets(std::size_t n, double duration, Rng& rng);

StreamSample generate_episode(std::uint64_t seed, std::size_t id, const DataConfig& cfg);
std::vector<StreamSample> generate_dataset(std::uint64_t seed, std::size_t n_episodes,
                                           const DataConfig& cfg);

/// strategy is corrupt_message, temporal_jitter or drop_message.
StreamSample augment_dialogue(const StreamSample& sample, const std::string& strategy,
                              std::uint64_t seed);
/// Applies one frame edit and moves annotations with the frames.
StreamSample edit_frames(const StreamSample& sample, const FrameEdit& edit);

nlohmann::json sample_to_json(const StreamSample& s);
StreamSample sample_from_json(const nlohmann::json& j);

/// One episode per line.
std::string dataset_to_jsonl(const std::vector<StreamSample>& samples);
void save_dataset(const std::filesystem::path& path, const std::vector<StreamSample>& samples);
std::vector<StreamSample> load_dataset(const std::filesystem::path& path);

/// Stream files: one frame per line, {"t", "field"} or {"t", "generator"}
/// with optional "scene_spec" and "boxes".
std::vector<SyntheticFrame> load_stream_file(const std::filesystem::path& path);
void save_stream_file(const std::filesystem::path& path, const std::vector<SyntheticFrame>& frames);

}  // namespace ovd
