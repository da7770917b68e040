#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mst/errors.hpp"

namespace mst {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tensor;

namespace detail {

// One node of the reverse-mode graph. Values are f64, row-major, contiguous.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first backward touch; accumulates until zeroed
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
    }
};

// Scoped switch that stops ops from recording the graph (value-only forward).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

}  // namespace detail

// Dense f64 tensor participating in a reverse-mode graph. Copies share the
// underlying node; values are immutable after construction except through
// mutable_data() on leaves (init, optimizer updates).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double v) { return from_data({1}, {v}); }
    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);

    // Marks this tensor as a trainable leaf.
    Tensor& set_requires_grad(bool b);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node_->numel(); }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    // Value of a one-element tensor.
    double item() const;

    // Value copy with no graph attachment.
    Tensor detached() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

// --- elementwise, with trailing-dimension broadcasting on binary ops ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor clamp01(const Tensor& a);

// --- structure ---
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const int64_t> idx);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// --- reductions ---
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_last(const Tensor& a);  // [..., d] -> [...]

// Mean squared deviation between same-shape tensors.
Tensor mse(const Tensor& a, const Tensor& b);

// --- neural ops ---
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernels);  // [d,h,w], [d,k,k]
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
Tensor upsample_nn2x(const Tensor& x);          // [c,h,w] -> [c,2h,2w]
Tensor patchify(const Tensor& img, int patch);  // [c,H,W] -> [h*w, c*p*p]

// Reverse traversal from a scalar loss; grads accumulate into leaf buffers.
void backward(const Tensor& loss);

}  // namespace mst
