// SPDX-License-Identifier: Apache-2.0
#include "ovd/optim.hpp"

#include <cmath>
#include <numbers>

#include "ovd/error.hpp"

namespace ovd {

AdamW::AdamW(const ParameterSet& params, const AdamWConfig& config)
    : params_(params), config_(config) {
    for (const NamedTensor& p : params_) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
    }
}

void AdamW::step(std::span<const std::vector<double>> grads, double lr) {
    require(grads.size() == params_.size(), ErrorKind::dimension,
            "optimizer: one gradient buffer per parameter");
    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto data = params_[i].tensor.mutable_data();
        const auto& g = grads[i];
        require(g.size() == data.size(), ErrorKind::dimension,
                "optimizer: gradient size mismatch for " + params_[i].name);
        const bool decay = params_[i].tensor.rank() == 2 && config_.weight_decay > 0.0;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            if (lr == 0.0) continue;
            const double update = (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
            if (decay) data[j] -= lr * config_.weight_decay * data[j];
            data[j] -= lr * update;
        }
    }
}

ParameterSet AdamW::state() const {
    ParameterSet out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam.m." + params_[i].name, Tensor::from(params_[i].tensor.shape(), m_[i])});
        out.push_back({"adam.v." + params_[i].name, Tensor::from(params_[i].tensor.shape(), v_[i])});
    }
    return out;
}

void AdamW::load_state(std::span<const NamedTensor> state, std::size_t steps) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        bool found_m = false, found_v = false;
        for (const NamedTensor& s : state) {
            if (s.name == "adam.m." + params_[i].name) {
                require(s.tensor.numel() == m_[i].size(), ErrorKind::parse,
                        "optimizer state size mismatch for " + params_[i].name);
                m_[i].assign(s.tensor.data().begin(), s.tensor.data().end());
                found_m = true;
            } else if (s.name == "adam.v." + params_[i].name) {
                require(s.tensor.numel() == v_[i].size(), ErrorKind::parse,
                        "optimizer state size mismatch for " + params_[i].name);
                v_[i].assign(s.tensor.data().begin(), s.tensor.data().end());
                found_v = true;
            }
        }
        require(found_m && found_v, ErrorKind::parse,
                "checkpoint lacks optimizer state for " + params_[i].name);
    }
    t_ = steps;
}

double clip_gradients(std::span<std::vector<double>> grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& g : grads)
            for (double& x : g) x *= s;
    }
    return norm;
}

double cosine_lr(std::size_t step, std::size_t total, double base, double warmup_frac) {
    if (total == 0) return base;
    const auto warmup = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<double>(total)));
    if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(total - warmup);
    const double progress = span > 0 ? static_cast<double>(step - warmup) / span : 1.0;
    return 0.5 * base * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

}  // namespace ovd
