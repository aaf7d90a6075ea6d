// SPDX-License-Identifier: Apache-2.0
#include "ovd/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "ovd/error.hpp"
#include "ovd/init.hpp"

namespace ovd {

namespace {

constexpr std::size_t kPoolBlocks = 3;  // 3x3 pooled tokens of 8x8 patches

void require_mode(int mode) {
    require(mode == 1 || mode == 10, ErrorKind::strategy,
            "token mode must be 1 or 10, got " + std::to_string(mode));
}

void require_field(const SyntheticFrame& frame) {
    require(frame.side == kGridSide && frame.field.size() == kPatchCount, ErrorKind::shape,
            "field must be 24x24, got side " + std::to_string(frame.side) + " with " +
                std::to_string(frame.field.size()) + " cells");
}

std::vector<double> normal_vector(Rng& rng, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = stddev * rng.normal();
    return v;
}

double mean_of(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

}  // namespace

const char* to_string(RegionKind kind) {
    switch (kind) {
        case RegionKind::hand_left: return "hand_left";
        case RegionKind::hand_right: return "hand_right";
        case RegionKind::object: return "object";
    }
    return "?";
}

RegionKind region_kind_from_string(const std::string& name) {
    if (name == "hand_left") return RegionKind::hand_left;
    if (name == "hand_right") return RegionKind::hand_right;
    if (name == "object") return RegionKind::object;
    fail(ErrorKind::parse, "unknown region kind '" + name + "'");
}

SyntheticEncoders::SyntheticEncoders(const EncoderConfig& config) : config_(config) {
    require(config.width > 0, ErrorKind::config, "encoder width must be positive");
    const std::size_t w = config.width;
    Rng rng(config.seed, 0xe1c0);
    cell_gain_ = normal_vector(rng, w, 1.0);
    cell_bias_ = normal_vector(rng, w, 0.5);
    cls_map_ = normal_vector(rng, w * w, 1.0 / std::sqrt(static_cast<double>(w)));
    cls_bias_ = normal_vector(rng, w, 0.1);
    motion_dir_ = normal_vector(rng, w, 2.0);
}

Tensor SyntheticEncoders::patch_grid(const SyntheticFrame& frame) const {
    require_field(frame);
    const std::size_t w = width();
    std::vector<double> out(kPatchCount * w);
    for (std::size_t p = 0; p < kPatchCount; ++p)
        for (std::size_t j = 0; j < w; ++j)
            out[p * w + j] = frame.field[p] * cell_gain_[j] + cell_bias_[j];
    return Tensor::from({kPatchCount, w}, std::move(out));
}

Tensor SyntheticEncoders::tokens_from_field(std::span<const double> field, int mode,
                                            std::span<const double> motion) const {
    const std::size_t w = width();
    const std::size_t n = static_cast<std::size_t>(mode);
    std::vector<double> out(n * w);

    // CLS: A * (mean patch embedding) + c; the mean patch is m*a + b.
    const double m = mean_of(field);
    std::vector<double> mean_patch(w);
    for (std::size_t j = 0; j < w; ++j) mean_patch[j] = m * cell_gain_[j] + cell_bias_[j];
    const double motion_mean = motion.empty() ? 0.0 : mean_of(motion);
    for (std::size_t i = 0; i < w; ++i) {
        double acc = cls_bias_[i];
        for (std::size_t j = 0; j < w; ++j) acc += cls_map_[i * w + j] * mean_patch[j];
        if (motion_mean != 0.0) acc += motion_mean * motion_dir_[i];
        out[i] = acc;
    }
    if (mode == 1) return Tensor::from({1, w}, std::move(out));

    const auto pooled = block_means(field, kGridSide, kPoolBlocks);
    std::vector<double> pooled_motion;
    if (!motion.empty()) pooled_motion = block_means(motion, kGridSide, kPoolBlocks);
    for (std::size_t b = 0; b < kPoolBlocks * kPoolBlocks; ++b) {
        double* tok = out.data() + (b + 1) * w;
        for (std::size_t j = 0; j < w; ++j) tok[j] = pooled[b] * cell_gain_[j] + cell_bias_[j];
        if (!pooled_motion.empty() && pooled_motion[b] != 0.0)
            for (std::size_t j = 0; j < w; ++j) tok[j] += pooled_motion[b] * motion_dir_[j];
    }
    return Tensor::from({n, w}, std::move(out));
}

GeneralEncoding SyntheticEncoders::encode_general(const SyntheticFrame& frame, int mode,
                                                  bool with_patches) const {
    require_field(frame);
    require_mode(mode);
    GeneralEncoding enc;
    enc.tokens = tokens_from_field(frame.field, mode, {});
    if (with_patches) enc.patch_grid = patch_grid(frame);
    return enc;
}

Tensor SyntheticEncoders::encode_egocentric(std::span<const SyntheticFrame> group,
                                            int mode) const {
    require(group.size() == kGroupSize, ErrorKind::grouping,
            "egocentric group needs exactly 4 frames, got " + std::to_string(group.size()));
    require_mode(mode);
    for (std::size_t k = 0; k < group.size(); ++k) {
        require_field(group[k]);
        if (k > 0)
            require(group[k].t > group[k - 1].t, ErrorKind::grouping,
                    "egocentric group timestamps must ascend");
    }
    require(group.back().t - group.front().t < kBundlePeriod, ErrorKind::grouping,
            "egocentric group spans more than one half-second window");
    const auto mean_field = temporal_mean(group);
    const auto diff = temporal_difference(group);
    return tokens_from_field(mean_field, mode, diff);
}

std::vector<double> temporal_mean(std::span<const SyntheticFrame> group) {
    require(!group.empty(), ErrorKind::grouping, "empty frame group");
    const auto& base = group.front().field;
    std::vector<double> acc(base.size(), 0.0);
    for (std::size_t k = 1; k < group.size(); ++k)
        for (std::size_t i = 0; i < base.size(); ++i) acc[i] += group[k].field[i] - base[i];
    const double n = static_cast<double>(group.size());
    std::vector<double> out(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) out[i] = base[i] + acc[i] / n;
    return out;
}

std::vector<double> temporal_difference(std::span<const SyntheticFrame> group) {
    require(group.size() >= 2, ErrorKind::grouping, "difference needs at least two frames");
    const std::size_t cells = group.front().field.size();
    std::vector<double> out(cells, 0.0);
    for (std::size_t k = 1; k < group.size(); ++k)
        for (std::size_t i = 0; i < cells; ++i)
            out[i] += std::abs(group[k].field[i] - group[k - 1].field[i]);
    const double pairs = static_cast<double>(group.size() - 1);
    for (double& v : out) v /= pairs;
    return out;
}

std::vector<double> block_means(std::span<const double> field, std::size_t side,
                                std::size_t blocks) {
    require(field.size() == side * side, ErrorKind::shape, "block_means: field is not square");
    require(blocks > 0 && side % blocks == 0, ErrorKind::shape,
            "block_means: blocks must divide the side");
    const std::size_t b = side / blocks;
    std::vector<double> out(blocks * blocks, 0.0);
    for (std::size_t br = 0; br < blocks; ++br)
        for (std::size_t bc = 0; bc < blocks; ++bc) {
            double acc = 0.0;
            for (std::size_t r = br * b; r < (br + 1) * b; ++r)
                for (std::size_t c = bc * b; c < (bc + 1) * b; ++c) acc += field[r * side + c];
            out[br * blocks + bc] = acc / static_cast<double>(b * b);
        }
    return out;
}

double trimmed_duration(std::size_t n_frames) {
    return std::floor(static_cast<double>(n_frames) / kCaptureFps);
}

FrameBundle make_bundle(const SyntheticEncoders& encoders, std::span<const SyntheticFrame> group,
                        std::size_t index, const AlignOptions& options) {
    require(group.size() == kGroupSize, ErrorKind::grouping, "bundle needs 4 frames");
    const SyntheticFrame& key = group.back();
    FrameBundle b;
    b.index = index;
    b.timestamp = kBundlePeriod * static_cast<double>(index);
    auto gen = encoders.encode_general(key, options.general_mode, options.with_patches);
    b.general_tokens = gen.tokens;
    b.patch_grid = gen.patch_grid;
    b.ego_tokens = encoders.encode_egocentric(group, options.ego_mode);
    b.keyframe = key;
    return b;
}

std::vector<FrameBundle> align_streams(const SyntheticEncoders& encoders,
                                       std::span<const SyntheticFrame> frames,
                                       const AlignOptions& options) {
    require(frames.size() >= 2 * kGroupSize, ErrorKind::empty_stream,
            "stream has " + std::to_string(frames.size()) +
                " frames; at least one second (8 frames) is required");
    for (std::size_t k = 1; k < frames.size(); ++k)
        require(std::abs(frames[k].t - frames[k - 1].t - kFramePeriod) < 1e-6, ErrorKind::stream,
                "frames must be spaced at 8 FPS (frame " + std::to_string(k) + ")");
    const std::size_t kept = (frames.size() / (2 * kGroupSize)) * 2 * kGroupSize;
    std::vector<FrameBundle> bundles;
    bundles.reserve(kept / kGroupSize);
    for (std::size_t i = 0; i * kGroupSize < kept; ++i)
        bundles.push_back(
            make_bundle(encoders, frames.subspan(i * kGroupSize, kGroupSize), i, options));
    return bundles;
}

// ---- synthetic video ----------------------------------------------------------

const char* to_string(EventKind kind) {
    switch (kind) {
        case EventKind::left_hand_reach: return "left_hand_reach";
        case EventKind::right_hand_reach: return "right_hand_reach";
        case EventKind::object_enters: return "object_enters";
        case EventKind::pick_up: return "pick_up";
    }
    return "?";
}

EventKind event_kind_from_string(const std::string& name) {
    for (std::size_t k = 0; k < kEventKinds; ++k) {
        const auto kind = static_cast<EventKind>(k);
        if (name == to_string(kind)) return kind;
    }
    fail(ErrorKind::parse, "unknown event kind '" + name + "'");
}

std::vector<Primitive> event_primitives(EventKind kind, int step) {
    const int s = std::max(step, 0);
    switch (kind) {
        case EventKind::left_hand_reach:
            return {{RegionKind::hand_left, 16, 2 + s, 4, 4, 0.9}};
        case EventKind::right_hand_reach:
            return {{RegionKind::hand_right, 16, 18 - s, 4, 4, 0.9}};
        case EventKind::object_enters:
            return {{RegionKind::object, 1 + s, 10, 4, 4, 1.5}};
        case EventKind::pick_up:
            return {{RegionKind::hand_left, 15 - s, 6, 4, 3, 0.9},
                    {RegionKind::hand_right, 15 - s, 15, 4, 3, 0.9},
                    {RegionKind::object, 12 - s, 10, 3, 4, 1.5}};
    }
    return {};
}

namespace {

Primitive clamp_inside(Primitive p) {
    const int side = static_cast<int>(kGridSide);
    p.height = std::clamp(p.height, 1, side);
    p.width = std::clamp(p.width, 1, side);
    p.top = std::clamp(p.top, 0, side - p.height);
    p.left = std::clamp(p.left, 0, side - p.width);
    return p;
}

}  // namespace

std::vector<SyntheticFrame> synth_video(std::uint64_t seed, double duration_s,
                                        std::span<const VideoEvent> events,
                                        const VideoSpec& spec) {
    require(duration_s > 0.0, ErrorKind::generation, "duration must be positive");
    std::vector<VideoEvent> sorted(events.begin(), events.end());
    std::sort(sorted.begin(), sorted.end(),
              [](const VideoEvent& a, const VideoEvent& b) { return a.onset < b.onset; });
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        require(sorted[i].onset >= 0.0 && sorted[i].onset < duration_s, ErrorKind::generation,
                "event onset outside the video");
        require(sorted[i].duration > 0.0, ErrorKind::generation, "event duration must be positive");
        if (i > 0)
            require(sorted[i].onset - sorted[i - 1].onset >= spec.min_gap - 1e-9,
                    ErrorKind::generation, "events overlap: onsets must be at least 1 s apart");
    }

    const auto n_frames = static_cast<std::size_t>(std::llround(duration_s * kCaptureFps));
    std::vector<double> background(kPatchCount);
    Rng bg(seed, 1);
    for (double& v : background) v = spec.background * bg.uniform();

    std::vector<SyntheticFrame> frames(n_frames);
    for (std::size_t k = 0; k < n_frames; ++k) {
        SyntheticFrame& f = frames[k];
        f.t = static_cast<double>(k) * kFramePeriod;
        f.field = background;
        for (const VideoEvent& e : sorted) {
            const auto start = static_cast<long>(std::llround(e.onset * kCaptureFps));
            const auto len = std::max<long>(1, std::llround(e.duration * kCaptureFps));
            const long step = static_cast<long>(k) - start;
            if (step < 0 || step >= len) continue;
            for (Primitive p : event_primitives(e.kind, static_cast<int>(step))) {
                p = clamp_inside(p);
                for (int r = p.top; r < p.top + p.height; ++r)
                    for (int c = p.left; c < p.left + p.width; ++c)
                        f.field[static_cast<std::size_t>(r) * kGridSide + c] = p.intensity;
                f.scene.push_back(p);
            }
        }
        if (spec.noise > 0.0) {
            Rng nz(seed, 1000 + k);
            for (double& v : f.field) v += spec.noise * nz.normal();
        }
    }
    return frames;
}

// ---- projection ----------------------------------------------------------------

Projection::Projection(std::size_t in, std::size_t out, Rng& rng)
    : weight(affine_weight(in, out, rng)), bias(zero_parameter({out})) {}

Tensor Projection::apply(const Tensor& rows) const { return add_bias(matmul(rows, weight), bias); }

void Projection::collect(const std::string& prefix, ParameterSet& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

}  // namespace ovd
