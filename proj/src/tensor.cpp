#include "mst/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace mst {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

#ifndef NDEBUG
void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::logic_error(std::string("non-finite value produced by ") + op);
    }
}
#define MST_CHECK_FINITE(op, v) check_finite(op, v)
#else
#define MST_CHECK_FINITE(op, v) (void)0
#endif

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

// Attaches parents + backward closure when grad mode is on and any input needs it.
void attach(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> fn) {
    bool need = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) need = true;
    if (!need || !grad_enabled()) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

}  // namespace

}  // namespace detail

using detail::Node;

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    int64_t n = shape_numel(shape);
    return wrap(detail::make_node(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0)));
}

Tensor Tensor::full(Shape shape, double v) {
    int64_t n = shape_numel(shape);
    return wrap(detail::make_node(std::move(shape), std::vector<double>(static_cast<size_t>(n), v)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
    return wrap(detail::make_node(std::move(shape), std::move(data)));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
    int64_t n = shape_numel(shape);
    std::vector<double> v(static_cast<size_t>(n));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& x : v) x = dist(rng) * stddev;
    return wrap(detail::make_node(std::move(shape), std::move(v)));
}

Tensor& Tensor::set_requires_grad(bool b) {
    node_->requires_grad = b;
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient buffer");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()) + ", expected one element");
    return node_->value[0];
}

Tensor Tensor::detached() const {
    return wrap(detail::make_node(node_->shape, node_->value));
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

namespace {

struct Broadcast {
    Shape out_shape;
    std::vector<int64_t> stride_a, stride_b;  // 0 on broadcast dims

    Broadcast(const Shape& a, const Shape& b) {
        size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
        out_shape.resize(r);
        stride_a.resize(r);
        stride_b.resize(r);
        // row-major strides of the padded inputs
        std::vector<int64_t> sa(r, 0), sb(r, 0), da(r, 1), db(r, 1);
        for (size_t i = 0; i < r; ++i) {
            da[i] = i < r - ra ? 1 : a[i - (r - ra)];
            db[i] = i < r - rb ? 1 : b[i - (r - rb)];
        }
        int64_t acca = 1, accb = 1;
        for (size_t i = r; i-- > 0;) {
            sa[i] = acca;
            sb[i] = accb;
            acca *= da[i];
            accb *= db[i];
        }
        for (size_t i = 0; i < r; ++i) {
            if (da[i] != db[i] && da[i] != 1 && db[i] != 1)
                throw ShapeError("elementwise: shapes " + shape_str(a) + " and " + shape_str(b) +
                                 " are not broadcastable");
            out_shape[i] = std::max(da[i], db[i]);
            stride_a[i] = da[i] == 1 && out_shape[i] != 1 ? 0 : sa[i];
            stride_b[i] = db[i] == 1 && out_shape[i] != 1 ? 0 : sb[i];
        }
    }

    bool trivial() const {
        for (size_t i = 0; i < out_shape.size(); ++i)
            if (stride_a[i] == 0 || stride_b[i] == 0) return false;
        return true;
    }

    // Walks all output positions; f(out_idx, a_idx, b_idx).
    template <class F>
    void for_each(F&& f) const {
        size_t r = out_shape.size();
        if (r == 0) {
            f(0, 0, 0);
            return;
        }
        std::vector<int64_t> idx(r, 0);
        int64_t oa = 0, ob = 0;
        int64_t total = shape_numel(out_shape);
        for (int64_t o = 0; o < total; ++o) {
            f(static_cast<size_t>(o), static_cast<size_t>(oa), static_cast<size_t>(ob));
            for (size_t i = r; i-- > 0;) {
                idx[i]++;
                oa += stride_a[i];
                ob += stride_b[i];
                if (idx[i] < out_shape[i]) break;
                oa -= stride_a[i] * out_shape[i];
                ob -= stride_b[i] * out_shape[i];
                idx[i] = 0;
            }
        }
    }
};

template <class FwdF, class BwdA, class BwdB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, FwdF fwd, BwdA bwd_a, BwdB bwd_b) {
    const auto& av = a.data();
    const auto& bv = b.data();
    Broadcast bc(a.shape(), b.shape());
    std::vector<double> out(static_cast<size_t>(shape_numel(bc.out_shape)));
    if (bc.trivial() && a.shape() == b.shape()) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
    } else {
        bc.for_each([&](size_t o, size_t ia, size_t ib) { out[o] = fwd(av[ia], bv[ib]); });
    }
    MST_CHECK_FINITE(name, out);
    auto n = detail::make_node(bc.out_shape, std::move(out));
    auto an = a.node();
    auto bn = b.node();
    detail::attach(n, {an, bn}, [an, bn, bc, bwd_a, bwd_b](Node& self) {
        const bool ga = an->requires_grad, gb = bn->requires_grad;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        bc.for_each([&](size_t o, size_t ia, size_t ib) {
            double g = self.grad[o];
            if (ga) an->grad[ia] += g * bwd_a(an->value[ia], bn->value[ib]);
            if (gb) bn->grad[ib] += g * bwd_b(an->value[ia], bn->value[ib]);
        });
    });
    return Tensor::wrap(n);
}

template <class FwdF, class BwdF>
Tensor unary_op(const char* name, const Tensor& a, FwdF fwd, BwdF dfdx_from_x_and_y) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    MST_CHECK_FINITE(name, out);
    auto n = detail::make_node(a.shape(), std::move(out));
    auto an = a.node();
    detail::attach(n, {an}, [an, dfdx_from_x_and_y](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.value.size(); ++i)
            an->grad[i] += self.grad[i] * dfdx_from_x_and_y(an->value[i], self.value[i]);
    });
    return Tensor::wrap(n);
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus_d(double x) {
    // numerically stable ln(1+e^x)
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
    return unary_op(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& a) {
    return unary_op(
        "silu", a, [](double x) { return x * sigmoid_d(x); },
        [](double x, double) {
            double s = sigmoid_d(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        "softplus", a, [](double x) { return softplus_d(x); }, [](double x, double) { return sigmoid_d(x); });
}

Tensor clamp01(const Tensor& a) {
    return unary_op(
        "clamp01", a, [](double x) { return x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x); },
        [](double x, double) { return x >= 0.0 && x <= 1.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// structure
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto n = detail::make_node(std::move(shape), a.data());
    auto an = a.node();
    detail::attach(n, {an}, [an](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    return Tensor::wrap(n);
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d: expected rank-2, got " + shape_str(a.shape()));
    int64_t r = a.dim(0), c = a.dim(1);
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = av[static_cast<size_t>(i * c + j)];
    auto n = detail::make_node({c, r}, std::move(out));
    auto an = a.node();
    detail::attach(n, {an}, [an, r, c](Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                an->grad[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j * r + i)];
    });
    return Tensor::wrap(n);
}

Tensor gather_rows(const Tensor& a, std::span<const int64_t> idx) {
    if (a.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(a.shape()));
    int64_t rows = a.dim(0), d = a.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= rows) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range");
    std::vector<int64_t> ix(idx.begin(), idx.end());
    const auto& av = a.data();
    std::vector<double> out(ix.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ix.size(); ++i)
        std::memcpy(&out[i * static_cast<size_t>(d)], &av[static_cast<size_t>(ix[i] * d)],
                    static_cast<size_t>(d) * sizeof(double));
    auto n = detail::make_node({static_cast<int64_t>(ix.size()), d}, std::move(out));
    auto an = a.node();
    detail::attach(n, {an}, [an, ix, d](Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < ix.size(); ++i) {
            const double* g = &self.grad[i * static_cast<size_t>(d)];
            double* dst = &an->grad[static_cast<size_t>(ix[i] * d)];
            for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
    return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(int64_t m, int64_t k, int64_t n, const double* A, const double* B, double* C) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            double a = A[i * k + p];
            if (a == 0.0) continue;
            const double* b = B + p * n;
            double* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

// C[m,k] += A[m,n] * B^T where B is [k,n]
void gemm_nt(int64_t m, int64_t n, int64_t k, const double* A, const double* B, double* C) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            const double* a = A + i * n;
            const double* b = B + p * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += a[j] * b[j];
            C[i * k + p] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
void gemm_tn(int64_t m, int64_t k, int64_t n, const double* A, const double* B, double* C) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t p = 0; p < k; ++p) {
            double a = A[i * k + p];
            if (a == 0.0) continue;
            const double* b = B + i * n;
            double* c = C + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
    MST_CHECK_FINITE("matmul", out);
    auto node = detail::make_node({m, n}, std::move(out));
    auto an = a.node();
    auto bn = b.node();
    detail::attach(node, {an, bn}, [an, bn, m, k, n](Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            gemm_nt(m, n, k, self.grad.data(), bn->value.data(), an->grad.data());
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            gemm_tn(m, k, n, an->value.data(), self.grad.data(), bn->grad.data());
        }
    });
    return Tensor::wrap(node);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.rank() != 2) throw ShapeError("linear: weight must be rank-2, got " + shape_str(weight.shape()));
    int64_t d_in = weight.dim(0), d_out = weight.dim(1);
    if (x.rank() < 1 || x.shape().back() != d_in)
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    Shape lead(x.shape().begin(), x.shape().end() - 1);
    int64_t rows = shape_numel(lead);
    Tensor flat = reshape(x, {rows, d_in});
    Tensor y = matmul(flat, weight);
    if (bias.defined()) {
        if (bias.shape() != Shape{d_out})
            throw ShapeError("linear: bias " + shape_str(bias.shape()) + " must be [" + std::to_string(d_out) + "]");
        y = add(y, bias);
    }
    Shape out_shape = lead;
    out_shape.push_back(d_out);
    return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto n = detail::make_node({1}, {s});
    auto an = a.node();
    detail::attach(n, {an}, [an](Node& self) {
        an->ensure_grad();
        double g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
    return Tensor::wrap(n);
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean_last(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("mean_last: rank must be >= 1");
    int64_t d = a.shape().back();
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    int64_t rows = shape_numel(out_shape);
    const auto& av = a.data();
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    for (int64_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) s += av[static_cast<size_t>(i * d + j)];
        out[static_cast<size_t>(i)] = s / static_cast<double>(d);
    }
    auto n = detail::make_node(out_shape, std::move(out));
    auto an = a.node();
    detail::attach(n, {an}, [an, rows, d](Node& self) {
        an->ensure_grad();
        double inv = 1.0 / static_cast<double>(d);
        for (int64_t i = 0; i < rows; ++i) {
            double g = self.grad[static_cast<size_t>(i)] * inv;
            for (int64_t j = 0; j < d; ++j) an->grad[static_cast<size_t>(i * d + j)] += g;
        }
    });
    return Tensor::wrap(n);
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mse: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---------------------------------------------------------------------------
// neural ops
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank must be >= 1");
    int64_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    int64_t rows = x.numel() / d;
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<double> out(xv.size());
    // saved for backward
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        const double* row = &xv[static_cast<size_t>(i * d)];
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < d; ++j) {
            double h = (row[j] - mean) * inv;
            (*xhat)[static_cast<size_t>(i * d + j)] = h;
            out[static_cast<size_t>(i * d + j)] = h * gv[j] + bv[j];
        }
    }
    MST_CHECK_FINITE("layer_norm", out);
    auto n = detail::make_node(x.shape(), std::move(out));
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    detail::attach(n, {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, rows, d](Node& self) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int64_t i = 0; i < rows; ++i) {
            const double* dy = &self.grad[static_cast<size_t>(i * d)];
            const double* h = &(*xhat)[static_cast<size_t>(i * d)];
            if (gn->requires_grad || bn->requires_grad) {
                for (int64_t j = 0; j < d; ++j) {
                    if (gn->requires_grad) gn->grad[j] += dy[j] * h[j];
                    if (bn->requires_grad) bn->grad[j] += dy[j];
                }
            }
            if (xn->requires_grad) {
                double m1 = 0.0, m2 = 0.0;
                for (int64_t j = 0; j < d; ++j) {
                    double g = dy[j] * gn->value[j];
                    m1 += g;
                    m2 += g * h[j];
                }
                m1 /= static_cast<double>(d);
                m2 /= static_cast<double>(d);
                double inv = (*inv_std)[static_cast<size_t>(i)];
                for (int64_t j = 0; j < d; ++j) {
                    double g = dy[j] * gn->value[j];
                    xn->grad[static_cast<size_t>(i * d + j)] += inv * (g - m1 - h[j] * m2);
                }
            }
        }
    });
    return Tensor::wrap(n);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernels) {
    if (x.rank() != 3) throw ShapeError("depthwise_conv2d: input must be [d,h,w], got " + shape_str(x.shape()));
    if (kernels.rank() != 3 || kernels.dim(0) != x.dim(0) || kernels.dim(1) != kernels.dim(2))
        throw ShapeError("depthwise_conv2d: kernels must be [d,k,k] with d matching input, got " +
                         shape_str(kernels.shape()) + " for input " + shape_str(x.shape()));
    int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), k = kernels.dim(1);
    if (k % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd, got " + std::to_string(k));
    int64_t pad = (k - 1) / 2;
    const auto& xv = x.data();
    const auto& kv = kernels.data();
    std::vector<double> out(xv.size(), 0.0);
    for (int64_t c = 0; c < d; ++c) {
        const double* xp = &xv[static_cast<size_t>(c * h * w)];
        const double* kp = &kv[static_cast<size_t>(c * k * k)];
        double* op = &out[static_cast<size_t>(c * h * w)];
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx) {
                double acc = 0.0;
                for (int64_t ky = 0; ky < k; ++ky) {
                    int64_t sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        int64_t sx = xx + kx - pad;
                        if (sx < 0 || sx >= w) continue;
                        acc += xp[sy * w + sx] * kp[ky * k + kx];
                    }
                }
                op[y * w + xx] = acc;
            }
    }
    MST_CHECK_FINITE("depthwise_conv2d", out);
    auto n = detail::make_node(x.shape(), std::move(out));
    auto xn = x.node();
    auto kn = kernels.node();
    detail::attach(n, {xn, kn}, [xn, kn, d, h, w, k, pad](Node& self) {
        if (xn->requires_grad) xn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        for (int64_t c = 0; c < d; ++c) {
            const double* gy = &self.grad[static_cast<size_t>(c * h * w)];
            const double* xp = &xn->value[static_cast<size_t>(c * h * w)];
            const double* kp = &kn->value[static_cast<size_t>(c * k * k)];
            for (int64_t y = 0; y < h; ++y)
                for (int64_t xx = 0; xx < w; ++xx) {
                    double g = gy[y * w + xx];
                    if (g == 0.0) continue;
                    for (int64_t ky = 0; ky < k; ++ky) {
                        int64_t sy = y + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int64_t kx = 0; kx < k; ++kx) {
                            int64_t sx = xx + kx - pad;
                            if (sx < 0 || sx >= w) continue;
                            if (xn->requires_grad)
                                xn->grad[static_cast<size_t>(c * h * w + sy * w + sx)] += g * kp[ky * k + kx];
                            if (kn->requires_grad)
                                kn->grad[static_cast<size_t>(c * k * k + ky * k + kx)] += g * xp[sy * w + sx];
                        }
                    }
                }
        }
    });
    return Tensor::wrap(n);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 3) throw ShapeError("conv2d: input must be [c,h,w], got " + shape_str(x.shape()));
    if (weight.rank() != 4 || weight.dim(1) != x.dim(0))
        throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
    if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
    int64_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    int64_t co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (bias.defined() && bias.shape() != Shape{co})
        throw ShapeError("conv2d: bias must be [" + std::to_string(co) + "], got " + shape_str(bias.shape()));
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (w + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: output would be empty for input " + shape_str(x.shape()));
    const auto& xv = x.data();
    const auto& wv = weight.data();
    std::vector<double> out(static_cast<size_t>(co * oh * ow), 0.0);
    for (int64_t o = 0; o < co; ++o) {
        double b = bias.defined() ? bias.data()[static_cast<size_t>(o)] : 0.0;
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t xx = 0; xx < ow; ++xx) {
                double acc = b;
                for (int64_t i = 0; i < ci; ++i) {
                    const double* xp = &xv[static_cast<size_t>(i * h * w)];
                    const double* wp = &wv[static_cast<size_t>(((o * ci) + i) * kh * kw)];
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t sy = y * stride + ky - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t sx = xx * stride + kx - pad;
                            if (sx < 0 || sx >= w) continue;
                            acc += xp[sy * w + sx] * wp[ky * kw + kx];
                        }
                    }
                }
                out[static_cast<size_t>(o * oh * ow + y * ow + xx)] = acc;
            }
    }
    MST_CHECK_FINITE("conv2d", out);
    auto n = detail::make_node({co, oh, ow}, std::move(out));
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<std::shared_ptr<Node>> parents = {xn, wn};
    if (bn) parents.push_back(bn);
    detail::attach(n, parents, [xn, wn, bn, ci, h, w, co, kh, kw, oh, ow, stride, pad](Node& self) {
        if (xn->requires_grad) xn->ensure_grad();
        if (wn->requires_grad) wn->ensure_grad();
        if (bn && bn->requires_grad) bn->ensure_grad();
        for (int64_t o = 0; o < co; ++o) {
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t xx = 0; xx < ow; ++xx) {
                    double g = self.grad[static_cast<size_t>(o * oh * ow + y * ow + xx)];
                    if (g == 0.0) continue;
                    if (bn && bn->requires_grad) bn->grad[static_cast<size_t>(o)] += g;
                    for (int64_t i = 0; i < ci; ++i) {
                        const double* xp = &xn->value[static_cast<size_t>(i * h * w)];
                        const double* wp = &wn->value[static_cast<size_t>(((o * ci) + i) * kh * kw)];
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t sy = y * stride + ky - pad;
                            if (sy < 0 || sy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t sx = xx * stride + kx - pad;
                                if (sx < 0 || sx >= w) continue;
                                if (xn->requires_grad)
                                    xn->grad[static_cast<size_t>(i * h * w + sy * w + sx)] += g * wp[ky * kw + kx];
                                if (wn->requires_grad)
                                    wn->grad[static_cast<size_t>(((o * ci) + i) * kh * kw + ky * kw + kx)] +=
                                        g * xp[sy * w + sx];
                            }
                        }
                    }
                }
        }
    });
    return Tensor::wrap(n);
}

Tensor upsample_nn2x(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("upsample_nn2x: input must be [c,h,w], got " + shape_str(x.shape()));
    int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const auto& xv = x.data();
    std::vector<double> out(static_cast<size_t>(c * 4 * h * w));
    int64_t oh = 2 * h, ow = 2 * w;
    for (int64_t i = 0; i < c; ++i)
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t xx = 0; xx < ow; ++xx)
                out[static_cast<size_t>(i * oh * ow + y * ow + xx)] =
                    xv[static_cast<size_t>(i * h * w + (y / 2) * w + xx / 2)];
    auto n = detail::make_node({c, oh, ow}, std::move(out));
    auto xn = x.node();
    detail::attach(n, {xn}, [xn, c, h, w, oh, ow](Node& self) {
        xn->ensure_grad();
        for (int64_t i = 0; i < c; ++i)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t xx = 0; xx < ow; ++xx)
                    xn->grad[static_cast<size_t>(i * h * w + (y / 2) * w + xx / 2)] +=
                        self.grad[static_cast<size_t>(i * oh * ow + y * ow + xx)];
    });
    return Tensor::wrap(n);
}

Tensor patchify(const Tensor& img, int patch) {
    if (img.rank() != 3) throw ShapeError("patchify: image must be [c,H,W], got " + shape_str(img.shape()));
    if (patch < 1) throw ConfigError("patchify: patch size must be >= 1");
    int64_t c = img.dim(0), H = img.dim(1), W = img.dim(2), p = patch;
    if (H % p != 0 || W % p != 0)
        throw ShapeError("patchify: image " + shape_str(img.shape()) + " not divisible by patch " +
                         std::to_string(p) + "; crop to a multiple first");
    int64_t gh = H / p, gw = W / p, tokens = gh * gw, feat = c * p * p;
    const auto& xv = img.data();
    std::vector<double> out(static_cast<size_t>(tokens * feat));
    for (int64_t gy = 0; gy < gh; ++gy)
        for (int64_t gx = 0; gx < gw; ++gx) {
            int64_t t = gy * gw + gx;
            for (int64_t i = 0; i < c; ++i)
                for (int64_t dy = 0; dy < p; ++dy)
                    for (int64_t dx = 0; dx < p; ++dx)
                        out[static_cast<size_t>(t * feat + (i * p + dy) * p + dx)] =
                            xv[static_cast<size_t>(i * H * W + (gy * p + dy) * W + gx * p + dx)];
        }
    auto n = detail::make_node({tokens, feat}, std::move(out));
    auto xn = img.node();
    detail::attach(n, {xn}, [xn, c, H, W, p, gh, gw, feat](Node& self) {
        xn->ensure_grad();
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx) {
                int64_t t = gy * gw + gx;
                for (int64_t i = 0; i < c; ++i)
                    for (int64_t dy = 0; dy < p; ++dy)
                        for (int64_t dx = 0; dx < p; ++dx)
                            xn->grad[static_cast<size_t>(i * H * W + (gy * p + dy) * W + gx * p + dx)] +=
                                self.grad[static_cast<size_t>(t * feat + (i * p + dy) * p + dx)];
            }
    });
    return Tensor::wrap(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ShapeError("backward: loss must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
    Node* root = loss.node().get();
    if (!root->requires_grad) return;  // nothing reachable requires grad

    // iterative post-order topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace mst
