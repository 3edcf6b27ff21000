#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "spine3d/common.hpp"

namespace spine3d {

class Tape;

/// Dense row-major tensor (last dimension contiguous). Values are immutable
/// after construction; copies share storage. Image tensors are laid out
/// (h, w, c) with channels fastest, batches as an outer dimension when
/// present. Convolution kernels are (kh, kw, c_in/groups, c_out).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> dims);
    Tensor(std::vector<int> dims, std::vector<Real> values);

    static Tensor full(std::vector<int> dims, Real v);
    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    int rank() const { return static_cast<int>(dims_.size()); }
    int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }
    const std::vector<int>& dims() const { return dims_; }
    std::size_t size() const;
    bool empty() const { return !data_; }

    // Lvalue-only: a span into a temporary would dangle once the temporary dies.
    std::span<const Real> values() const& { return {data_->data(), data_->size()}; }
    std::span<const Real> values() const&& = delete;
    Real value() const;  // scalar tensors only
    Real at(std::initializer_list<int> idx) const;

    bool on_tape() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    std::string shape_str() const;

private:
    friend class Tape;
    friend struct OpContext;

    std::vector<int> dims_;
    std::shared_ptr<const std::vector<Real>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Reverse-mode differentiation record. One tape per forward/backward pass;
/// not shareable across threads. Tensors enter the record via watch();
/// every op whose input is on the tape appends a node with its backward rule.
class Tape {
public:
    using BackFn = std::function<void(Tape&, std::span<const Real> grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Register a leaf (parameter or input) for differentiation.
    Tensor watch(const Tensor& t);

    /// Accumulate gradients of every recorded node w.r.t. a scalar loss.
    void backward(const Tensor& loss);

    /// Gradient of the last backward() w.r.t. a tape tensor. Untouched
    /// leaves report zeros.
    Tensor grad(const Tensor& t) const;

    std::size_t node_count() const { return nodes_.size(); }

    // --- op plumbing ---
    int record(std::vector<int> parents, std::size_t out_size, BackFn back);
    Tensor adopt(Tensor value, int node);
    std::vector<Real>& grad_buffer(int node);

private:
    struct Node {
        std::vector<int> parents;
        std::size_t size;
        BackFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<Real>> grads_;
    std::vector<char> touched_;
};

// ---- elementwise / scalar ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, Real s);
Tensor mul_scalar(const Tensor& a, Real s);
/// x / s with s a one-element tensor (differentiable in both).
Tensor div_scalar(const Tensor& x, const Tensor& s);

// ---- shape ----
Tensor reshape(const Tensor& x, std::vector<int> dims);
Tensor transpose(const Tensor& x);  // rank-2
/// Slice [from, to) of the last dimension.
Tensor slice_last(const Tensor& x, int from, int to);
/// Concatenate along the last dimension.
Tensor concat_last(const std::vector<Tensor>& parts);

// ---- linear / conv ----
Tensor matmul(const Tensor& a, const Tensor& b);
/// x: (h, w, c_in); w: (kh, kw, c_in/groups, c_out); no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad, int groups);
int conv_out_extent(int in, int kernel, int stride, int pad);

// ---- resampling ----
/// (h, w, c) -> (h*r, w*r, c/r^2); exact inverse of pixel_unshuffle.
Tensor pixel_shuffle(const Tensor& x, int r);
/// (h, w, c) -> (h/r, w/r, c*r^2). Output channel index is
/// c_in * r^2 + dy * r + dx for block offset (dy, dx).
Tensor pixel_unshuffle(const Tensor& x, int r);

// ---- normalization / activation ----
/// Softmax along dimension `axis`; slices along that axis sum to 1.
Tensor softmax(const Tensor& x, int axis);
/// Per-pixel normalization over the channel axis of (h, w, c), then affine.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           Real eps = Real(1e-5));
/// Per-channel normalization over spatial positions of (h, w, c), then affine.
Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                     Real eps = Real(1e-5));
Tensor gelu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, Real slope = Real(0.2));
Tensor sigmoid(const Tensor& x);

// ---- reductions / losses ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of squared differences over every element.
Tensor mse_loss(const Tensor& a, const Tensor& b);
/// Sum over entries of -[y log k + (1-y) log(1-k)], k clamped to
/// [1e-7, 1-1e-7]. Gradient flows to k only.
Tensor bce_sum(const Tensor& k, const Tensor& y);
Tensor bce_mean(const Tensor& k, const Tensor& y);

// ---- gradient checking ----
struct GradReport {
    double max_abs_err = 0.0;
    /// Worst |analytic - numeric| divided by the owning parameter's largest
    /// gradient magnitude (guarded at 1e-6).
    double max_rel_err = 0.0;
    double step = 0.0;
    bool pass = false;
    std::string worst;  // "param <i> [<j>]" of the worst coordinate
};

/// Central finite differences against backward() for every coordinate of
/// every parameter. `f` must be a pure function of the parameter values.
GradReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                      const std::vector<Tensor>& params, double h, double tol);

}  // namespace spine3d
