// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "ovd/rng.hpp"
#include "ovd/tensor.hpp"

namespace ovd {

/// Affine weight [fan_in x fan_out], uniform in +-1/sqrt(fan_in).
inline Tensor affine_weight(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> values(fan_in * fan_out);
    for (double& v : values) v = rng.uniform(-bound, bound);
    return Tensor::parameter({fan_in, fan_out}, std::move(values));
}

inline Tensor zero_parameter(Shape shape) {
    return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), 0.0));
}

inline Tensor constant_parameter(Shape shape, double value) {
    return Tensor::parameter(shape, std::vector<double>(shape_numel(shape), value));
}

}  // namespace ovd
