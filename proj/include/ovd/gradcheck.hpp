// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>

#include "ovd/tensor.hpp"

namespace ovd {

struct GradCheckOptions {
    double eps = 1e-5;
    /// Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
    double floor = 1e-7;
    /// 0 checks every coordinate; otherwise a seeded sample per tensor.
    std::size_t max_coords_per_tensor = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
    std::size_t worst_tensor = 0;
    std::size_t worst_index = 0;
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

/// Compares tape gradients of a scalar function against central differences.
/// `point` holds leaf tensors; their values are perturbed in place and
/// restored before returning.
GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor> point,
                           const GradCheckOptions& options = {});

}  // namespace ovd
