// SPDX-License-Identifier: Apache-2.0
#pragma once

// Decoder-only toy language model over interleaved visual/text sequences,
// with routed (token-dropping) layers and an append-only decode cache.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ovd/dropping.hpp"
#include "ovd/tensor.hpp"

namespace ovd {

namespace vocab {
inline constexpr std::size_t SILENCE = 0;
inline constexpr std::size_t RESPOND = 1;
inline constexpr std::size_t STREAM_TAG = 2;
inline constexpr std::size_t USER_TAG = 3;
inline constexpr std::size_t FOCUS_PHRASE = 4;
inline constexpr std::size_t FRAME_SEP = 5;
inline constexpr std::size_t TURN_END = 6;
inline constexpr std::size_t kFirstText = 7;
inline constexpr std::size_t kSize = 64;

inline bool is_text(std::size_t id) { return id >= kFirstText && id < kSize; }
inline bool is_special(std::size_t id) { return id < kFirstText; }
const char* special_name(std::size_t id);
}  // namespace vocab

enum class ElementKind { visual, text, special };

struct Element {
    ElementKind kind = ElementKind::special;
    std::size_t token = 0;  // text and special elements
    std::size_t row = 0;    // visual elements: row of the visual tensor
    int group = -1;         // routing group (frame); -1 is never dropped

    static Element text(std::size_t id) { return {ElementKind::text, id, 0, -1}; }
    static Element special(std::size_t id) { return {ElementKind::special, id, 0, -1}; }
    static Element visual(std::size_t row, int group) { return {ElementKind::visual, 0, row, group}; }
};

/// Elements with their visual rows and the per-position supervision of the
/// combined objective: stream[j] supervises target[j] in {SILENCE, RESPOND}
/// at a frame-final position, lm[j] supervises the next text token.
struct InterleavedSequence {
    std::vector<Element> elements;
    Tensor visual;  // [n_visual x d_model]
    std::vector<char> stream;
    std::vector<char> lm;
    std::vector<std::size_t> target;

    std::size_t size() const noexcept { return elements.size(); }
};

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 6;
    std::size_t n_heads = 4;
    std::size_t ffn_mult = 4;
    std::size_t vocab = vocab::kSize;
    std::uint64_t seed = 1;
};

void validate_model(const ModelConfig& config);

struct Block {
    Tensor ln1_g, ln1_b, wq, wk, wv, wo;
    Tensor ln2_g, ln2_b, w_ff1, b_ff1, w_ff2, b_ff2;
    Tensor w_theta;  // [d x 1]; only read when the layer is routed
};

struct LayerCache {
    std::vector<double> k;  // rows x d, rotated keys
    std::vector<double> v;
    std::vector<std::size_t> pos;
};

/// Append-only per-episode state. Stores only the keys and values of rows
/// that took part in each layer.
struct DecodeCache {
    std::size_t length = 0;
    std::vector<LayerCache> layers;
    int last_group = -1;
    std::size_t d_model = 0;
};

struct ForwardOptions {
    std::vector<LayerRoutingRecord>* records = nullptr;
    /// Residual stream entering each layer, then the final one (n_layers + 1).
    std::vector<Tensor>* hidden = nullptr;
};

class ToyLM {
public:
    ToyLM() = default;
    ToyLM(const ModelConfig& config, const DroppingConfig& dropping);

    const ModelConfig& config() const noexcept { return config_; }
    const DroppingConfig& dropping() const noexcept { return dropping_; }
    /// Changes dropping behaviour without touching parameters. Router vectors
    /// are created for every layer, so any policy can be selected later.
    void set_dropping(const DroppingConfig& dropping);
    const std::vector<std::size_t>& routed_layers() const noexcept { return routed_; }

    DecodeCache new_cache() const;

    /// Logits [n x V] for `elements` appended to `cache` (or to an empty
    /// episode when cache is null). Visual elements read rows of `visual`.
    Tensor forward(std::span<const Element> elements, const Tensor& visual,
                   DecodeCache* cache = nullptr, const ForwardOptions& options = {}) const;
    Tensor forward(const InterleavedSequence& seq, DecodeCache* cache = nullptr,
                   const ForwardOptions& options = {}) const {
        return forward(seq.elements, seq.visual, cache, options);
    }

    ParameterSet parameters() const;

    Tensor embedding;  // [V x d]
    std::vector<Block> blocks;
    Tensor lnf_g, lnf_b, w_out, b_out;

private:
    std::vector<char> retention(std::size_t layer, std::span<const Element> elements,
                                std::span<const double> r, std::size_t first_pos,
                                LayerRoutingRecord* record) const;

    ModelConfig config_;
    DroppingConfig dropping_;
    std::vector<std::size_t> routed_;
    std::vector<char> is_routed_;
};

struct LossTerms {
    Tensor total;      // (w * stream_sum + lm_sum) / N
    Tensor streaming;  // w * stream_sum / N
    Tensor lm;         // lm_sum / N
    std::size_t n_positions = 0;
    std::size_t n_stream = 0;
    std::size_t n_lm = 0;
};

LossTerms streaming_lm_loss(const Tensor& logits, const InterleavedSequence& seq, double w = 1.0);
void validate_supervision(const InterleavedSequence& seq, std::size_t n_logits);

enum class Decision { silent, respond };

/// respond iff logit(RESPOND) > logit(SILENCE). With a threshold other than
/// 0.5 the pair probability sigmoid(gap) must exceed it instead.
Decision determine(std::span<const double> logits, double threshold = 0.5);
inline double logit_gap(std::span<const double> logits) {
    return logits[vocab::RESPOND] - logits[vocab::SILENCE];
}

struct GeneratedTurn {
    std::vector<std::size_t> tokens;
    bool truncated = false;
};

/// Logits after feeding one token.
using StepFn = std::function<std::vector<double>(std::size_t token)>;

/// Greedy decoding restricted to text ids and TURN_END. Every emitted token
/// and the closing TURN_END are passed to `step` (TURN_END is fed even after
/// truncation, so the episode always ends the turn).
GeneratedTurn greedy_decode(std::span<const double> first_logits, const StepFn& step,
                            std::size_t max_len);

GeneratedTurn generate_response(const ToyLM& model, DecodeCache& cache,
                                std::span<const double> first_logits, std::size_t max_len);

std::size_t argmax(std::span<const double> v);
/// Greedy choice among text ids and TURN_END; ties go to TURN_END, then the
/// lower id.
std::size_t decode_choice(std::span<const double> logits);

}  // namespace ovd
