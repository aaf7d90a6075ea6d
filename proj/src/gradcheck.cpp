// SPDX-License-Identifier: Apache-2.0
#include "ovd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ovd/error.hpp"
#include "ovd/rng.hpp"

namespace ovd {

namespace {

double evaluate(const ScalarFn& f, std::span<const Tensor> point) {
    const double v = f(point).item();
    require(std::isfinite(v), ErrorKind::check, "function value is not finite");
    return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<Tensor> point,
                           const GradCheckOptions& options) {
    for (Tensor& t : point) t.set_requires_grad(true);

    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = f(point);
    }
    require(std::isfinite(loss.item()), ErrorKind::check, "function value is not finite");
    tape.backward(loss);

    GradCheckResult result;
    Rng rng(options.seed, 0x67636b);
    for (std::size_t ti = 0; ti < point.size(); ++ti) {
        Tensor& t = point[ti];
        const auto analytic = tape.grad(t);
        std::vector<std::size_t> coords(t.numel());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (options.max_coords_per_tensor > 0 && coords.size() > options.max_coords_per_tensor) {
            for (std::size_t i = 0; i < options.max_coords_per_tensor; ++i) {
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            }
            coords.resize(options.max_coords_per_tensor);
        }
        auto values = t.mutable_data();
        for (std::size_t idx : coords) {
            const double saved = values[idx];
            values[idx] = saved + options.eps;
            const double fp = evaluate(f, point);
            values[idx] = saved - options.eps;
            const double fm = evaluate(f, point);
            values[idx] = saved;
            const double numeric = (fp - fm) / (2.0 * options.eps);
            const double a = analytic.empty() ? 0.0 : analytic[idx];
            const double abs_err = std::abs(a - numeric);
            const double rel =
                abs_err / std::max({std::abs(a), std::abs(numeric), options.floor});
            result.max_abs_error = std::max(result.max_abs_error, abs_err);
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst_tensor = ti;
                result.worst_index = idx;
            }
            ++result.checked;
        }
    }
    return result;
}

}  // namespace ovd
