// SPDX-License-Identifier: Apache-2.0
#include "ovd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ovd/error.hpp"

namespace ovd {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::shared_ptr<TensorImpl> new_impl(Shape shape, std::vector<double> data) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return impl;
}

std::shared_ptr<TensorImpl> new_impl(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return new_impl(std::move(shape), std::vector<double>(n, 0.0));
}

// Tape on which an op over `inputs` must be recorded, or nullptr.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = g_active_tape;
    if (tape == nullptr) return nullptr;
    bool any = false;
    for (const Tensor* in : inputs) {
        if (in == nullptr || !in->defined()) continue;
        const TensorImpl* impl = in->impl();
        if (impl->tape != nullptr && impl->tape != tape && impl->requires_grad) {
            fail(ErrorKind::tape, "tensor was recorded on a different tape");
        }
        any = any || impl->requires_grad;
    }
    return any ? tape : nullptr;
}

Tensor finish(std::shared_ptr<TensorImpl> out, Tape* tape,
              std::vector<std::shared_ptr<TensorImpl>> inputs, Tape::BackwardFn fn) {
    if (tape != nullptr) {
        out->requires_grad = true;
        out->tape = tape;
        tape->record(std::move(inputs), out, std::move(fn));
    }
    return Tensor(std::move(out));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    require(t.defined(), ErrorKind::dimension, std::string(op) + ": undefined tensor");
    require(t.rank() == rank, ErrorKind::dimension,
            std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), ErrorKind::dimension,
            std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<std::size_t>());
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return Tensor(new_impl(std::move(shape))); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(new_impl(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    require(shape_numel(shape) == data.size(), ErrorKind::dimension,
            "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                " values");
    return Tensor(new_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return Tensor(new_impl({}, {value})); }

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
    require(axis < rank(), ErrorKind::dimension, "axis out of range");
    return impl_->shape[axis];
}

std::size_t Tensor::rows() const {
    require_rank(*this, 2, "rows");
    return impl_->shape[0];
}

std::size_t Tensor::cols() const {
    require_rank(*this, 2, "cols");
    return impl_->shape[1];
}

double Tensor::item() const {
    require(numel() == 1, ErrorKind::dimension, "item() on tensor " + shape_str(shape()));
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_rank(*this, 2, "at");
    require(r < impl_->shape[0] && c < impl_->shape[1], ErrorKind::index, "at() out of range");
    return impl_->data[r * impl_->shape[1] + c];
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(new_impl(impl_->shape, impl_->data)); }

// ---- Tape ------------------------------------------------------------------

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, BackwardFn fn) {
    require(!consumed_, ErrorKind::tape, "cannot record on a tape that was already replayed");
    nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(fn)});
}

double* Tape::grad_buffer(TensorImpl* t) {
    if (t == nullptr || !t->requires_grad) return nullptr;
    if (t->tape == this) {
        if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
        return t->grad.data();
    }
    if (t->tape == nullptr) {
        auto [it, inserted] = leaf_grads_.try_emplace(t);
        if (inserted) {
            it->second.assign(t->data.size(), 0.0);
            leaf_order_.push_back(t);
        }
        return it->second.data();
    }
    fail(ErrorKind::tape, "gradient requested for a tensor of another tape");
}

const double* Tape::output_grad(const TensorImpl* t) const {
    return t->grad.empty() ? nullptr : t->grad.data();
}

void Tape::backward(const Tensor& loss) {
    require(loss.defined(), ErrorKind::tape, "backward on undefined tensor");
    require(loss.impl()->tape == this, ErrorKind::tape,
            "loss is detached from this tape (no recorded history)");
    require(!consumed_, ErrorKind::tape, "backward already ran on this tape; run a new forward");
    require(loss.numel() == 1, ErrorKind::dimension, "backward needs a scalar loss");
    consumed_ = true;
    loss.impl()->grad.assign(1, 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output->grad.empty()) continue;
        it->fn(*this);
    }
}

std::span<const double> Tape::grad(const Tensor& t) const {
    const TensorImpl* impl = t.impl();
    if (impl->tape == this) return impl->grad;
    auto it = leaf_grads_.find(const_cast<TensorImpl*>(impl));
    if (it == leaf_grads_.end()) return {};
    return it->second;
}

std::vector<TensorImpl*> Tape::leaves() const { return leaf_order_; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
    require(loss.defined() && loss.impl()->tape != nullptr, ErrorKind::tape,
            "backward on a detached tensor");
    Tape& tape = *loss.impl()->tape;
    tape.backward(loss);
    for (TensorImpl* leaf : tape.leaves()) {
        Tensor handle(std::shared_ptr<TensorImpl>(std::shared_ptr<TensorImpl>{}, leaf));
        auto g = tape.grad(handle);
        if (leaf->grad.empty()) leaf->grad.assign(leaf->data.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
    }
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    require(b.dim(0) == k, ErrorKind::dimension,
            "matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    auto out = new_impl({m, n});
    if (m > 0 && n > 0) {
        MutMap(out->data.data(), m, n).noalias() =
            ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    }
    Tape* tape = recording_tape({&a, &b});
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), b.ptr()}, [=](Tape& t) {
        ConstMap g(t.output_grad(po), m, n);
        if (double* ga = t.grad_buffer(pa)) {
            MutMap(ga, m, k).noalias() += g * ConstMap(pb->data.data(), k, n).transpose();
        }
        if (double* gb = t.grad_buffer(pb)) {
            MutMap(gb, k, n).noalias() += ConstMap(pa->data.data(), m, k).transpose() * g;
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    auto out = new_impl({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[j * m + i] = a.data()[i * n + j];
    Tape* tape = recording_tape({&a});
    TensorImpl* pa = a.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa)) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        }
    });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto out = new_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a[i] + b[i];
    Tape* tape = recording_tape({&a, &b});
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), b.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        const std::size_t n = po->data.size();
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (double* gb = t.grad_buffer(pb))
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto out = new_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a[i] - b[i];
    Tape* tape = recording_tape({&a, &b});
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), b.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        const std::size_t n = po->data.size();
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        if (double* gb = t.grad_buffer(pb))
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto out = new_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a[i] * b[i];
    Tape* tape = recording_tape({&a, &b});
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), b.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        const std::size_t n = po->data.size();
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb->data[i];
        if (double* gb = t.grad_buffer(pb))
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa->data[i];
    });
}

Tensor scale(const Tensor& a, double s) {
    auto out = new_impl(a.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = a[i] * s;
    Tape* tape = recording_tape({&a});
    TensorImpl* pa = a.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < po->data.size(); ++i) ga[i] += g[i] * s;
    });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
    require_rank(a, 2, "add_bias");
    const std::size_t m = a.dim(0), n = a.dim(1);
    require(bias.numel() == n, ErrorKind::dimension, "add_bias: bias width mismatch");
    auto out = new_impl({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] = a[i * n + j] + bias[j];
    Tape* tape = recording_tape({&a, &bias});
    TensorImpl* pa = a.impl();
    TensorImpl* pb = bias.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), bias.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < m * n; ++i) ga[i] += g[i];
        if (double* gb = t.grad_buffer(pb))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& s) {
    require_rank(a, 2, "scale_rows");
    const std::size_t m = a.dim(0), n = a.dim(1);
    require(s.numel() == m, ErrorKind::dimension, "scale_rows: scale length mismatch");
    auto out = new_impl({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] = a[i * n + j] * s[i];
    Tape* tape = recording_tape({&a, &s});
    TensorImpl* pa = a.impl();
    TensorImpl* ps = s.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr(), s.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * ps->data[i];
        if (double* gs = t.grad_buffer(ps))
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pa->data[i * n + j];
                gs[i] += acc;
            }
    });
}

Tensor column(const Tensor& a, std::size_t j) {
    require_rank(a, 2, "column");
    const std::size_t m = a.dim(0), n = a.dim(1);
    require(j < n, ErrorKind::index, "column index out of range");
    auto out = new_impl({m});
    for (std::size_t i = 0; i < m; ++i) out->data[i] = a[i * n + j];
    Tape* tape = recording_tape({&a});
    TensorImpl* pa = a.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < m; ++i) ga[i * n + j] += g[i];
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    require(shape_numel(shape) == a.numel(), ErrorKind::dimension,
            "reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto out = new_impl(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
    Tape* tape = recording_tape({&a});
    TensorImpl* pa = a.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {a.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* ga = t.grad_buffer(pa))
            for (std::size_t i = 0; i < po->data.size(); ++i) ga[i] += g[i];
    });
}

// ---- nonlinearities --------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
    auto out = new_impl(x.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double v = x[i];
        if (v >= 0.0) {
            out->data[i] = 1.0 / (1.0 + std::exp(-v));
        } else {
            const double e = std::exp(v);
            out->data[i] = e / (1.0 + e);
        }
    }
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < po->data.size(); ++i) {
                const double y = po->data[i];
                gx[i] += g[i] * y * (1.0 - y);
            }
    });
}

Tensor relu(const Tensor& x) {
    auto out = new_impl(x.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = x[i] > 0.0 ? x[i] : 0.0;
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < po->data.size(); ++i)
                if (px->data[i] > 0.0) gx[i] += g[i];
    });
}

Tensor gelu(const Tensor& x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    auto out = new_impl(x.shape());
    for (std::size_t i = 0; i < out->data.size(); ++i) {
        const double v = x[i];
        out->data[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a * v * v * v)));
    }
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < po->data.size(); ++i) {
                const double v = px->data[i];
                const double th = std::tanh(c * (v + a * v * v * v));
                const double dth = (1.0 - th * th) * c * (1.0 + 3.0 * a * v * v);
                gx[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * dth);
            }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    require(x.defined() && axis < x.rank(), ErrorKind::dimension, "softmax: invalid axis");
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    auto out = new_impl(s);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x[base + k * inner]);
            double total = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double e = std::exp(x[base + k * inner] - mx);
                out->data[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k) out->data[base + k * inner] /= total;
        }
    }
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        double* gx = t.grad_buffer(px);
        if (gx == nullptr) return;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k)
                    dot += g[base + k * inner] * po->data[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    const std::size_t idx = base + k * inner;
                    gx[idx] += po->data[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(x.defined() && x.rank() >= 1, ErrorKind::dimension, "layer_norm: rank >= 1 required");
    const std::size_t width = x.shape().back();
    require(width >= 2, ErrorKind::dimension, "layer_norm: last axis must have length >= 2");
    require(gain.numel() == width && bias.numel() == width, ErrorKind::dimension,
            "layer_norm: gain/bias width mismatch");
    const std::size_t rows = x.numel() / width;
    auto out = new_impl(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data().data() + r * width;
        double mu = 0.0;
        for (std::size_t j = 0; j < width; ++j) mu += row[j];
        mu /= static_cast<double>(width);
        double var = 0.0;
        for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(width);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = inv;
        for (std::size_t j = 0; j < width; ++j) {
            const double h = (row[j] - mu) * inv;
            (*xhat)[r * width + j] = h;
            out->data[r * width + j] = gain[j] * h + bias[j];
        }
    }
    Tape* tape = recording_tape({&x, &gain, &bias});
    TensorImpl* px = x.impl();
    TensorImpl* pg = gain.impl();
    TensorImpl* pb = bias.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr(), gain.ptr(), bias.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        double* gx = t.grad_buffer(px);
        double* gg = t.grad_buffer(pg);
        double* gb = t.grad_buffer(pb);
        std::vector<double> dh(width);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * width;
            const double* hr = xhat->data() + r * width;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < width; ++j) {
                if (gg) gg[j] += gr[j] * hr[j];
                if (gb) gb[j] += gr[j];
                dh[j] = gr[j] * pg->data[j];
                mean_dh += dh[j];
                mean_dh_h += dh[j] * hr[j];
            }
            if (gx == nullptr) continue;
            mean_dh /= static_cast<double>(width);
            mean_dh_h /= static_cast<double>(width);
            for (std::size_t j = 0; j < width; ++j)
                gx[r * width + j] += (*rstd)[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
        }
    });
}

// ---- reductions and losses --------------------------------------------------

Tensor sum(const Tensor& x) {
    auto out = new_impl({});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out->data[0] = acc;
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double g = t.output_grad(po)[0];
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < px->data.size(); ++i) gx[i] += g;
    });
}

Tensor mean(const Tensor& x) {
    require(x.numel() > 0, ErrorKind::dimension, "mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    require(logits.defined() && (logits.rank() == 1 || (logits.rank() == 2 && logits.dim(0) == 1)),
            ErrorKind::dimension, "cross_entropy expects a single logit vector");
    const std::size_t v = logits.numel();
    require(target < v, ErrorKind::index,
            "cross_entropy: target " + std::to_string(target) + " outside vocabulary of " +
                std::to_string(v));
    const Tensor row = logits.rank() == 1 ? reshape(logits, {1, v}) : logits;
    const std::size_t r = 0;
    const double w = 1.0;
    return weighted_nll(row, std::span(&r, 1), std::span(&target, 1), std::span(&w, 1));
}

Tensor weighted_nll(const Tensor& logits, std::span<const std::size_t> rows,
                    std::span<const std::size_t> targets, std::span<const double> weights) {
    require_rank(logits, 2, "weighted_nll");
    require(rows.size() == targets.size() && rows.size() == weights.size(),
            ErrorKind::dimension, "weighted_nll: rows/targets/weights length mismatch");
    const std::size_t n = logits.dim(0), v = logits.dim(1);
    auto lse = std::make_shared<std::vector<double>>(rows.size());
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] < n, ErrorKind::index, "weighted_nll: row out of range");
        require(targets[i] < v, ErrorKind::index, "weighted_nll: target out of range");
        const double* row = logits.data().data() + rows[i] * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
        double acc = 0.0;
        for (std::size_t j = 0; j < v; ++j) acc += std::exp(row[j] - mx);
        (*lse)[i] = mx + std::log(acc);
        total += weights[i] * ((*lse)[i] - row[targets[i]]);
    }
    auto out = new_impl({}, {total});
    Tape* tape = recording_tape({&logits});
    TensorImpl* pl = logits.impl();
    TensorImpl* po = out.get();
    std::vector<std::size_t> r(rows.begin(), rows.end());
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return finish(out, tape, {logits.ptr()}, [=](Tape& t) {
        const double g = t.output_grad(po)[0];
        double* gl = t.grad_buffer(pl);
        if (gl == nullptr) return;
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (w[i] == 0.0) continue;
            const double* row = pl->data.data() + r[i] * v;
            double* grow = gl + r[i] * v;
            for (std::size_t j = 0; j < v; ++j) grow[j] += g * w[i] * std::exp(row[j] - (*lse)[i]);
            grow[tg[i]] -= g * w[i];
        }
    });
}

// ---- row plumbing -----------------------------------------------------------

Tensor concat_rows(std::span<const Tensor> parts) {
    require(!parts.empty(), ErrorKind::dimension, "concat_rows: no inputs");
    const std::size_t width = parts.front().cols();
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        require(p.cols() == width, ErrorKind::dimension, "concat_rows: width mismatch");
        rows += p.dim(0);
    }
    auto out = new_impl({rows, width});
    std::size_t offset = 0;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::vector<TensorImpl*> raw;
    std::vector<std::size_t> offsets;
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out->data.begin() + offset * width);
        offsets.push_back(offset);
        offset += p.dim(0);
        if (Tape* tp = recording_tape({&p})) tape = tp;
        inputs.push_back(p.ptr());
        raw.push_back(p.impl());
    }
    TensorImpl* po = out.get();
    return finish(out, tape, inputs, [=](Tape& t) {
        const double* g = t.output_grad(po);
        for (std::size_t k = 0; k < raw.size(); ++k) {
            if (double* gp = t.grad_buffer(raw[k])) {
                const double* src = g + offsets[k] * width;
                for (std::size_t i = 0; i < raw[k]->data.size(); ++i) gp[i] += src[i];
            }
        }
    });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
    require_rank(x, 2, "gather_rows");
    const std::size_t n = x.dim(0), width = x.dim(1);
    auto out = new_impl({rows.size(), width});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] < n, ErrorKind::index, "gather_rows: row out of range");
        std::copy_n(x.data().begin() + rows[i] * width, width, out->data.begin() + i * width);
    }
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < width; ++j) gx[idx[i] * width + j] += g[i * width + j];
    });
}

// ---- attention ---------------------------------------------------------------

Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads) {
    require_rank(x, 2, "rotary");
    const std::size_t n = x.dim(0), d = x.dim(1);
    require(n_heads > 0 && d % n_heads == 0 && (d / n_heads) % 2 == 0, ErrorKind::dimension,
            "rotary: width must split into heads of even size");
    require(positions.size() == n, ErrorKind::dimension, "rotary: one position per row");
    const std::size_t hd = d / n_heads;
    const std::size_t pairs = hd / 2;
    auto cs = std::make_shared<std::vector<double>>(n * pairs * 2);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < pairs; ++p) {
            const double inv_freq =
                std::pow(10000.0, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
            const double angle = static_cast<double>(positions[i]) * inv_freq;
            (*cs)[(i * pairs + p) * 2] = std::cos(angle);
            (*cs)[(i * pairs + p) * 2 + 1] = std::sin(angle);
        }
    }
    auto out = new_impl({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t p = 0; p < pairs; ++p) {
                const std::size_t c0 = i * d + h * hd + 2 * p;
                const double c = (*cs)[(i * pairs + p) * 2], s = (*cs)[(i * pairs + p) * 2 + 1];
                const double x0 = x[c0], x1 = x[c0 + 1];
                out->data[c0] = x0 * c - x1 * s;
                out->data[c0 + 1] = x0 * s + x1 * c;
            }
        }
    }
    Tape* tape = recording_tape({&x});
    TensorImpl* px = x.impl();
    TensorImpl* po = out.get();
    return finish(out, tape, {x.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        double* gx = t.grad_buffer(px);
        if (gx == nullptr) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t h = 0; h < n_heads; ++h)
                for (std::size_t p = 0; p < pairs; ++p) {
                    const std::size_t c0 = i * d + h * hd + 2 * p;
                    const double c = (*cs)[(i * pairs + p) * 2];
                    const double s = (*cs)[(i * pairs + p) * 2 + 1];
                    gx[c0] += g[c0] * c + g[c0 + 1] * s;
                    gx[c0 + 1] += -g[c0] * s + g[c0 + 1] * c;
                }
    });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::span<const std::size_t> query_pos,
                        std::span<const std::size_t> key_pos) {
    require_rank(q, 2, "causal_attention");
    require_rank(k, 2, "causal_attention");
    require_rank(v, 2, "causal_attention");
    const std::size_t n = q.dim(0), d = q.dim(1), m = k.dim(0);
    require(k.dim(1) == d && v.dim(1) == d && v.dim(0) == m, ErrorKind::dimension,
            "causal_attention: q/k/v widths differ");
    require(n_heads > 0 && d % n_heads == 0, ErrorKind::dimension,
            "causal_attention: width not divisible by heads");
    require(query_pos.size() == n && key_pos.size() == m, ErrorKind::dimension,
            "causal_attention: position count mismatch");
    const std::size_t hd = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    // probs[h][i][j]; masked entries stay 0
    auto probs = std::make_shared<std::vector<double>>(n_heads * n * m, 0.0);
    auto visible = std::make_shared<std::vector<std::size_t>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t cnt = 0;
        for (std::size_t j = 0; j < m; ++j) cnt += key_pos[j] <= query_pos[i] ? 1 : 0;
        (*visible)[i] = cnt;
    }
    auto out = new_impl({n, d});
    const double* qd = q.data().data();
    const double* kd = k.data().data();
    const double* vd = v.data().data();
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t i = 0; i < n; ++i) {
            double* p = probs->data() + (h * n + i) * m;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < m; ++j) {
                if (key_pos[j] > query_pos[i]) continue;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qd[i * d + off + c] * kd[j * d + off + c];
                s *= inv_sqrt;
                p[j] = s;
                mx = std::max(mx, s);
            }
            if ((*visible)[i] == 0) continue;
            double total = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                if (key_pos[j] > query_pos[i]) continue;
                p[j] = std::exp(p[j] - mx);
                total += p[j];
            }
            double* o = out->data.data() + i * d + off;
            for (std::size_t j = 0; j < m; ++j) {
                if (key_pos[j] > query_pos[i]) continue;
                p[j] /= total;
                for (std::size_t c = 0; c < hd; ++c) o[c] += p[j] * vd[j * d + off + c];
            }
        }
    }
    Tape* tape = recording_tape({&q, &k, &v});
    TensorImpl* pq = q.impl();
    TensorImpl* pk = k.impl();
    TensorImpl* pv = v.impl();
    TensorImpl* po = out.get();
    std::vector<std::size_t> qp(query_pos.begin(), query_pos.end());
    std::vector<std::size_t> kp(key_pos.begin(), key_pos.end());
    return finish(out, tape, {q.ptr(), k.ptr(), v.ptr()}, [=](Tape& t) {
        const double* g = t.output_grad(po);
        double* gq = t.grad_buffer(pq);
        double* gk = t.grad_buffer(pk);
        double* gv = t.grad_buffer(pv);
        std::vector<double> dp(m);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < n; ++i) {
                const double* p = probs->data() + (h * n + i) * m;
                const double* gi = g + i * d + off;
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) {
                    if (kp[j] > qp[i]) continue;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) acc += gi[c] * pv->data[j * d + off + c];
                    dp[j] = acc;
                    dot += p[j] * acc;
                    if (gv)
                        for (std::size_t c = 0; c < hd; ++c) gv[j * d + off + c] += p[j] * gi[c];
                }
                for (std::size_t j = 0; j < m; ++j) {
                    if (kp[j] > qp[i]) continue;
                    const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                    if (gq)
                        for (std::size_t c = 0; c < hd; ++c)
                            gq[i * d + off + c] += ds * pk->data[j * d + off + c];
                    if (gk)
                        for (std::size_t c = 0; c < hd; ++c)
                            gk[j * d + off + c] += ds * pq->data[i * d + off + c];
                }
            }
        }
    });
}

Tensor residual_update(const Tensor& x, const Tensor& delta, std::span<const std::size_t> rows,
                       const Tensor& r, std::span<const char> scaled) {
    require_rank(x, 2, "residual_update");
    require_rank(delta, 2, "residual_update");
    const std::size_t n = x.dim(0), d = x.dim(1), k = delta.dim(0);
    require(delta.dim(1) == d, ErrorKind::dimension, "residual_update: width mismatch");
    require(rows.size() == k, ErrorKind::routing, "residual_update: one row index per update");
    const bool use_r = r.defined();
    if (use_r) {
        require(r.numel() == k && scaled.size() == k, ErrorKind::routing,
                "residual_update: routing weight count mismatch");
    }
    auto out = new_impl(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
    for (std::size_t i = 0; i < k; ++i) {
        require(rows[i] < n, ErrorKind::index, "residual_update: row out of range");
        const double* dx = x.data().data() + rows[i] * d;
        const double* dd = delta.data().data() + i * d;
        double* o = out->data.data() + rows[i] * d;
        if (use_r && scaled[i]) {
            const double c = r[i];
            for (std::size_t j = 0; j < d; ++j) o[j] = dx[j] + c * dd[j];
        } else {
            for (std::size_t j = 0; j < d; ++j) o[j] = dx[j] + dd[j];
        }
    }
    Tape* tape = recording_tape({&x, &delta, use_r ? &r : nullptr});
    TensorImpl* px = x.impl();
    TensorImpl* pd = delta.impl();
    TensorImpl* pr = use_r ? r.impl() : nullptr;
    TensorImpl* po = out.get();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<char> sc(scaled.begin(), scaled.end());
    std::vector<std::shared_ptr<TensorImpl>> inputs{x.ptr(), delta.ptr()};
    if (use_r) inputs.push_back(r.ptr());
    return finish(out, tape, std::move(inputs), [=](Tape& t) {
        const double* g = t.output_grad(po);
        if (double* gx = t.grad_buffer(px))
            for (std::size_t i = 0; i < n * d; ++i) gx[i] += g[i];
        double* gd = t.grad_buffer(pd);
        double* gr = pr ? t.grad_buffer(pr) : nullptr;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* gi = g + idx[i] * d;
            const bool is_scaled = pr != nullptr && sc[i];
            if (gd) {
                const double c = is_scaled ? pr->data[i] : 1.0;
                for (std::size_t j = 0; j < d; ++j) gd[i * d + j] += c * gi[j];
            }
            if (gr && is_scaled) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) acc += gi[j] * pd->data[i * d + j];
                gr[i] += acc;
            }
        }
    });
}

}  // namespace ovd
