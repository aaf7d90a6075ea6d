// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic stand-ins for the 2 FPS general image encoder and the 8 FPS
// grouped egocentric encoder, synthetic video generation, and the dual-rate
// alignment that turns an 8 FPS stream into one bundle per half second.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ovd/rng.hpp"
#include "ovd/tensor.hpp"

namespace ovd {

inline constexpr double kCaptureFps = 8.0;
inline constexpr double kFramePeriod = 1.0 / kCaptureFps;
inline constexpr std::size_t kGroupSize = 4;
inline constexpr double kBundlePeriod = 0.5;
inline constexpr std::size_t kGridSide = 24;
inline constexpr std::size_t kPatchCount = kGridSide * kGridSide;

enum class RegionKind { hand_left = 0, hand_right = 1, object = 2 };

const char* to_string(RegionKind kind);
RegionKind region_kind_from_string(const std::string& name);

/// Axis-aligned rectangle placed in the field, in cell units.
struct Primitive {
    RegionKind kind = RegionKind::object;
    int top = 0;
    int left = 0;
    int height = 1;
    int width = 1;
    double intensity = 1.0;
};

/// Inclusive patch-coordinate rectangle.
struct Box {
    RegionKind kind = RegionKind::object;
    int r0 = 0;
    int c0 = 0;
    int r1 = 0;
    int c1 = 0;

    bool operator==(const Box&) const = default;
};

struct SyntheticFrame {
    double t = 0.0;
    std::size_t side = kGridSide;
    std::vector<double> field;  // row-major, side * side
    std::vector<Primitive> scene;
    /// Externally supplied boxes bypass the synthetic detector.
    std::optional<std::vector<Box>> boxes;
};

struct FrameBundle {
    std::size_t index = 0;
    double timestamp = 0.0;  // start of the half-second window
    Tensor general_tokens;   // [1 or 10 x width], row 0 is CLS
    Tensor ego_tokens;       // [1 or 10 x width]
    Tensor patch_grid;       // [576 x width], undefined unless requested
    SyntheticFrame keyframe; // the designated 2 FPS frame (scene, supplied boxes)
};

struct EncoderConfig {
    std::size_t width = 64;
    std::uint64_t seed = 0x5eedULL;
};

struct GeneralEncoding {
    Tensor tokens;      // [mode x width]
    Tensor patch_grid;  // [576 x width]
};

/// Frozen random affine encoders. Each cell value v embeds to v*a + b; pooled
/// tokens are block means of that embedding; CLS is a fixed affine map of the
/// whole-frame mean patch.
class SyntheticEncoders {
public:
    explicit SyntheticEncoders(const EncoderConfig& config = {});

    const EncoderConfig& config() const noexcept { return config_; }
    std::size_t width() const noexcept { return config_.width; }

    Tensor patch_grid(const SyntheticFrame& frame) const;
    GeneralEncoding encode_general(const SyntheticFrame& frame, int mode,
                                   bool with_patches = true) const;
    /// Tokens for a group of four consecutive 8 FPS frames: the general
    /// pooling of the per-cell temporal mean plus a motion channel driven by
    /// the mean absolute successive-frame difference.
    Tensor encode_egocentric(std::span<const SyntheticFrame> group, int mode) const;

private:
    Tensor tokens_from_field(std::span<const double> field, int mode,
                             std::span<const double> motion) const;

    EncoderConfig config_;
    std::vector<double> cell_gain_;   // a
    std::vector<double> cell_bias_;   // b
    std::vector<double> cls_map_;     // [width x width]
    std::vector<double> cls_bias_;
    std::vector<double> motion_dir_;  // fixed mixing of the motion channel
};

/// Per-cell temporal mean of a group, computed as f0 + sum(fk - f0)/n so a
/// static group reproduces f0 bit for bit.
std::vector<double> temporal_mean(std::span<const SyntheticFrame> group);
/// Mean absolute successive difference per cell.
std::vector<double> temporal_difference(std::span<const SyntheticFrame> group);

/// Block means of a side x side field over a blocks x blocks partition, row-major.
std::vector<double> block_means(std::span<const double> field, std::size_t side,
                                std::size_t blocks);

struct AlignOptions {
    int general_mode = 10;
    int ego_mode = 10;
    bool with_patches = false;
};

/// Seconds retained after trimming the trailing partial second.
double trimmed_duration(std::size_t n_frames);

/// One bundle per complete half-second window of the trimmed stream. The
/// designated 2 FPS frame of a window is its last frame.
std::vector<FrameBundle> align_streams(const SyntheticEncoders& encoders,
                                       std::span<const SyntheticFrame> frames,
                                       const AlignOptions& options = {});

FrameBundle make_bundle(const SyntheticEncoders& encoders, std::span<const SyntheticFrame> group,
                        std::size_t index, const AlignOptions& options);

// ---- synthetic video ----------------------------------------------------------

enum class EventKind { left_hand_reach = 0, right_hand_reach = 1, object_enters = 2, pick_up = 3 };
inline constexpr std::size_t kEventKinds = 4;

const char* to_string(EventKind kind);
EventKind event_kind_from_string(const std::string& name);

struct VideoEvent {
    double onset = 0.0;
    EventKind kind = EventKind::object_enters;
    double duration = kBundlePeriod;
};

struct VideoSpec {
    double background = 0.3;  // texture amplitude, static per video
    double noise = 0.0;       // per-frame Gaussian noise std
    double min_gap = 1.0;     // seconds between event onsets
};

/// Primitives realised by `event` at `step` frames after its onset.
std::vector<Primitive> event_primitives(EventKind kind, int step);

std::vector<SyntheticFrame> synth_video(std::uint64_t seed, double duration_s,
                                        std::span<const VideoEvent> events,
                                        const VideoSpec& spec = {});

// ---- trainable width adapters -----------------------------------------------------

/// Trainable affine map from encoder width to model width.
class Projection {
public:
    Projection() = default;
    Projection(std::size_t in, std::size_t out, Rng& rng);

    Tensor apply(const Tensor& rows) const;
    void collect(const std::string& prefix, ParameterSet& out) const;

    Tensor weight;
    Tensor bias;
};

}  // namespace ovd
