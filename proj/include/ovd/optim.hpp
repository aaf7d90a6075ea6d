// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ovd/tensor.hpp"

namespace ovd {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Decay applies to rank-2 parameters only.
class AdamW {
public:
    AdamW() = default;
    AdamW(const ParameterSet& params, const AdamWConfig& config);

    void step(std::span<const std::vector<double>> grads, double lr);

    std::size_t steps() const noexcept { return t_; }
    /// Moment buffers as named tensors ("adam.m.<name>", "adam.v.<name>").
    ParameterSet state() const;
    void load_state(std::span<const NamedTensor> state, std::size_t steps);

private:
    ParameterSet params_;
    AdamWConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_gradients(std::span<std::vector<double>> grads, double max_norm);

/// Linear warmup over warmup_frac of the run, then cosine decay to zero.
double cosine_lr(std::size_t step, std::size_t total, double base, double warmup_frac);

}  // namespace ovd
