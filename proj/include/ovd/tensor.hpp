// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Operations executed while a Tape is active (see TapeScope) are recorded when
// any input requires a gradient; otherwise they run as plain numeric kernels.
// Parameters are leaf tensors. Their gradients are kept per tape, so several
// threads may differentiate through the same read-only parameters, each with
// its own tape.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ovd {

using Shape = std::vector<std::size_t>;

class Tape;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    Tape* tape = nullptr;  // set for recorded intermediates, null for leaves
};

std::size_t shape_numel(const Shape& shape);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);
    /// Leaf tensor that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> data);

    bool defined() const noexcept { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return impl_->data; }
    /// Mutable access is only meaningful for leaves (parameters, constants).
    std::span<double> mutable_data() { return impl_->data; }
    double item() const;
    double at(std::size_t r, std::size_t c) const;
    double operator[](std::size_t i) const { return impl_->data[i]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool value) { impl_->requires_grad = value; }
    bool is_leaf() const { return impl_->tape == nullptr; }

    /// Gradient accumulated by ovd::backward(); empty before the first call.
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();

    /// Same values, no history, no gradient.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    TensorImpl* impl() const noexcept { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& ptr() const noexcept { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed operations. Single owner; not thread safe.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Replays the recorded nodes in reverse. A tape can be replayed once.
    void backward(const Tensor& loss);

    /// Gradient of a tensor seen by this tape (leaf or intermediate); empty if
    /// no gradient reached it.
    std::span<const double> grad(const Tensor& t) const;

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }
    /// Leaf tensors that received gradient during backward().
    std::vector<TensorImpl*> leaves() const;

    // Kernel-facing API.
    void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                std::shared_ptr<TensorImpl> output, BackwardFn fn);
    /// Writable gradient buffer for t, or nullptr if t needs no gradient.
    double* grad_buffer(TensorImpl* t);
    const double* output_grad(const TensorImpl* t) const;

private:
    struct Node {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    std::unordered_map<TensorImpl*, std::vector<double>> leaf_grads_;
    std::vector<TensorImpl*> leaf_order_;
    bool consumed_ = false;
};

/// Makes a tape the active recorder for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

/// Replays the tape that produced `loss` and accumulates leaf gradients into
/// each leaf's grad() buffer.
void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// [m x n] + [n], bias broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
/// Row i of [m x n] multiplied by s[i].
Tensor scale_rows(const Tensor& a, const Tensor& s);
Tensor column(const Tensor& a, std::size_t j);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// -log softmax(logits)[target] for a 1-D logit vector (or a single row).
Tensor cross_entropy(const Tensor& logits, std::size_t target);
/// sum_i weight_i * -log softmax(logits[row_i])[target_i] over [N x V] logits.
Tensor weighted_nll(const Tensor& logits, std::span<const std::size_t> rows,
                    std::span<const std::size_t> targets, std::span<const double> weights);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

/// Rotary phase on consecutive channel pairs inside each head, angle
/// pos * 10000^(-2i/head_dim).
Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads);

/// Multi-head attention where key j is visible to query i iff
/// key_pos[j] <= query_pos[i].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::span<const std::size_t> query_pos,
                        std::span<const std::size_t> key_pos);

/// out = x; out[rows[i]] = x[rows[i]] + c_i * delta[i], where c_i = r[i] when
/// `r` is defined and scaled[i] is set, else 1 (and the product is skipped).
Tensor residual_update(const Tensor& x, const Tensor& delta, std::span<const std::size_t> rows,
                       const Tensor& r, std::span<const char> scaled);

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Ordered parameter list; order is part of the checkpoint and optimizer contract.
using ParameterSet = std::vector<NamedTensor>;

}  // namespace ovd
