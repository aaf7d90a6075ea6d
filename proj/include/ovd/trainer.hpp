// SPDX-License-Identifier: Apache-2.0
#pragma once

// Training loop over teacher-forced episode sequences: one tape per batch,
// gradient clipping, warmup + cosine schedule, AdamW, checkpoints with
// optimizer state.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovd/assistant.hpp"
#include "ovd/optim.hpp"

namespace ovd {

struct TrainLogEntry {
    std::size_t step = 0;
    double loss = 0.0;
    double streaming_term = 0.0;
    double lm_term = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;

    nlohmann::json to_json() const;
};

/// Mean loss terms of a batch, gradients already reduced over it.
struct BatchGradients {
    double loss = 0.0;
    double streaming_term = 0.0;
    double lm_term = 0.0;
    std::vector<std::vector<double>> grads;  // parameter order
};

/// Forward + backward over a batch of episodes on a fresh tape.
BatchGradients batch_gradients(const Assistant& assistant,
                               std::span<const EncodedEpisode* const> batch,
                               const LayoutOptions& layout);

/// Dropping-router scorer vectors, frozen when selection is random.
bool is_router_parameter(const std::string& name);

class Trainer {
public:
    Trainer(Assistant& assistant, std::vector<EncodedEpisode> episodes);

    /// Episode indices used at a step; depends only on (train.seed, step).
    std::vector<std::size_t> batch_indices(std::size_t step) const;
    /// One optimizer update. Numeric error on a non-finite loss or gradient.
    TrainLogEntry step();
    /// Runs until `train.steps`; `on_log` sees every entry.
    void run(const std::function<void(const TrainLogEntry&)>& on_log = {});

    std::size_t current_step() const noexcept { return step_; }
    const AdamW& optimizer() const noexcept { return optimizer_; }

    /// Parameters, optimizer moments and meta {config_hash, step}.
    void save(const std::filesystem::path& manifest) const;
    void resume(const std::filesystem::path& manifest);

private:
    Assistant& assistant_;
    std::vector<EncodedEpisode> episodes_;
    ParameterSet params_;                 // optimised subset
    std::vector<std::size_t> trainable_;  // their indices in parameters()
    AdamW optimizer_;
    LayoutOptions layout_;
    std::size_t step_ = 0;
};

/// Loads parameters from a checkpoint into an assistant; warns (returns
/// false) when the stored config hash differs.
bool load_parameters(Assistant& assistant, const std::filesystem::path& manifest);

}  // namespace ovd
