#include "mst/ssm.hpp"

#include <cmath>

namespace mst {

namespace {

double softplus_inv(double y) { return std::log(std::expm1(y)); }

}  // namespace

SSMLayerParams make_ssm_params(int64_t d_inner, int64_t n_state, std::mt19937_64& rng, bool with_d_skip) {
    SSMLayerParams p;
    std::vector<double> alog(static_cast<size_t>(d_inner * n_state));
    for (int64_t d = 0; d < d_inner; ++d)
        for (int64_t n = 0; n < n_state; ++n)
            alog[static_cast<size_t>(d * n_state + n)] = std::log(static_cast<double>(n + 1));
    p.a_log = Tensor::from_data({d_inner, n_state}, std::move(alog)).set_requires_grad(true);
    if (with_d_skip) p.d_skip = Tensor::full({d_inner}, 1.0).set_requires_grad(true);
    double ws = 1.0 / std::sqrt(static_cast<double>(d_inner));
    p.w_b = Tensor::randn({d_inner, n_state}, rng, ws).set_requires_grad(true);
    p.b_b = Tensor::zeros({n_state}).set_requires_grad(true);
    p.w_c = Tensor::randn({d_inner, n_state}, rng, ws).set_requires_grad(true);
    p.b_c = Tensor::zeros({n_state}).set_requires_grad(true);
    p.w_dt = Tensor::randn({d_inner, d_inner}, rng, ws).set_requires_grad(true);
    p.b_dt = Tensor::full({d_inner}, softplus_inv(0.01)).set_requires_grad(true);
    return p;
}

void collect_params(const std::string& prefix, const SSMLayerParams& p, NamedParams& out) {
    out.emplace_back(prefix + ".a_log", p.a_log);
    if (p.d_skip.defined()) out.emplace_back(prefix + ".d_skip", p.d_skip);
    out.emplace_back(prefix + ".w_b", p.w_b);
    out.emplace_back(prefix + ".b_b", p.b_b);
    out.emplace_back(prefix + ".w_c", p.w_c);
    out.emplace_back(prefix + ".b_c", p.b_c);
    out.emplace_back(prefix + ".w_dt", p.w_dt);
    out.emplace_back(prefix + ".b_dt", p.b_dt);
}

Tensor ssm_decay_matrix(const SSMLayerParams& p) { return neg(exp(p.a_log)); }

Tensor derive_b(const Tensor& driver, const SSMLayerParams& p) { return linear(driver, p.w_b, p.b_b); }
Tensor derive_c(const Tensor& source, const SSMLayerParams& p) { return linear(source, p.w_c, p.b_c); }
Tensor derive_dt(const Tensor& driver, const SSMLayerParams& p) {
    return softplus(linear(driver, p.w_dt, p.b_dt));
}

DerivedParams derive_params(const Tensor& driver, const SSMLayerParams& p) {
    return {derive_b(driver, p), derive_c(driver, p), derive_dt(driver, p)};
}

DiscretizedPair discretize(const Tensor& dt, const Tensor& decay_a, const Tensor& b) {
    if (dt.rank() != 2) throw ShapeError("discretize: dt must be [L, d_inner], got " + shape_str(dt.shape()));
    int64_t L = dt.dim(0), d = dt.dim(1);
    if (decay_a.rank() != 2 || decay_a.dim(0) != d)
        throw ShapeError("discretize: A " + shape_str(decay_a.shape()) + " incompatible with dt " +
                         shape_str(dt.shape()));
    int64_t n = decay_a.dim(1);
    if (b.rank() != 2 || b.dim(0) != L || b.dim(1) != n)
        throw ShapeError("discretize: B must be [" + std::to_string(L) + ", " + std::to_string(n) + "], got " +
                         shape_str(b.shape()));
    for (double v : dt.data())
        if (!(v > 0.0))
            throw ConfigError("discretize: non-positive step size " + std::to_string(v) +
                              " (step sizes must pass through softplus)");
    Tensor dt_col = reshape(dt, {L, d, 1});
    DiscretizedPair pair;
    pair.a_bar = exp(mul(dt_col, decay_a));
    pair.b_bar = mul(dt_col, reshape(b, {L, 1, n}));
    return pair;
}

Tensor selective_scan_1d(const DiscretizedPair& pair, const Tensor& c, const Tensor& u, const Tensor& d_skip,
                         const Tensor& h0) {
    const Tensor& a_bar = pair.a_bar;
    const Tensor& b_bar = pair.b_bar;
    if (a_bar.rank() != 3) throw ShapeError("selective_scan_1d: a_bar must be [L,d,N], got " + shape_str(a_bar.shape()));
    int64_t L = a_bar.dim(0), d = a_bar.dim(1), N = a_bar.dim(2);
    if (b_bar.shape() != a_bar.shape())
        throw ShapeError("selective_scan_1d: b_bar " + shape_str(b_bar.shape()) + " must match a_bar " +
                         shape_str(a_bar.shape()));
    if (c.rank() != 2 || c.dim(0) != L || c.dim(1) != N)
        throw ShapeError("selective_scan_1d: C must be [" + std::to_string(L) + ", " + std::to_string(N) +
                         "], got " + shape_str(c.shape()));
    if (u.rank() != 2 || u.dim(0) != L || u.dim(1) != d)
        throw ShapeError("selective_scan_1d: u must be [" + std::to_string(L) + ", " + std::to_string(d) +
                         "], got " + shape_str(u.shape()));
    if (d_skip.defined() && d_skip.shape() != Shape{d})
        throw ShapeError("selective_scan_1d: d_skip must be [" + std::to_string(d) + "], got " +
                         shape_str(d_skip.shape()));
    if (h0.defined() && h0.shape() != Shape{d, N})
        throw ShapeError("selective_scan_1d: h0 must be [" + std::to_string(d) + ", " + std::to_string(N) +
                         "], got " + shape_str(h0.shape()));

    const auto& av = a_bar.data();
    const auto& bv = b_bar.data();
    const auto& cv = c.data();
    const auto& uv = u.data();
    const size_t dn = static_cast<size_t>(d * N);

    // All post-update states are kept for the backward sweep.
    auto states = std::make_shared<std::vector<double>>(static_cast<size_t>(L) * dn);
    std::vector<double> h(dn, 0.0);
    if (h0.defined()) h = h0.data();
    std::vector<double> y(static_cast<size_t>(L * d), 0.0);
    for (int64_t k = 0; k < L; ++k) {
        const double* ak = &av[static_cast<size_t>(k) * dn];
        const double* bk = &bv[static_cast<size_t>(k) * dn];
        const double* ck = &cv[static_cast<size_t>(k * N)];
        double* hk = &(*states)[static_cast<size_t>(k) * dn];
        for (int64_t di = 0; di < d; ++di) {
            double uk = uv[static_cast<size_t>(k * d + di)];
            double acc = 0.0;
            double* hrow = &h[static_cast<size_t>(di * N)];
            const double* arow = ak + di * N;
            const double* brow = bk + di * N;
            for (int64_t n = 0; n < N; ++n) {
                hrow[n] = arow[n] * hrow[n] + brow[n] * uk;
                acc += ck[n] * hrow[n];
            }
            if (d_skip.defined()) acc += d_skip.data()[static_cast<size_t>(di)] * uk;
            y[static_cast<size_t>(k * d + di)] = acc;
            std::copy(hrow, hrow + N, hk + di * N);
        }
    }

    auto node = std::make_shared<detail::Node>();
    node->shape = {L, d};
    node->value = std::move(y);

    auto an = a_bar.node();
    auto bn = b_bar.node();
    auto cn = c.node();
    auto un = u.node();
    auto dn_node = d_skip.defined() ? d_skip.node() : nullptr;
    auto h0n = h0.defined() ? h0.node() : nullptr;

    bool need = an->requires_grad || bn->requires_grad || cn->requires_grad || un->requires_grad ||
                (dn_node && dn_node->requires_grad) || (h0n && h0n->requires_grad);
    if (need && detail::grad_enabled()) {
        node->requires_grad = true;
        node->parents = {an, bn, cn, un};
        if (dn_node) node->parents.push_back(dn_node);
        if (h0n) node->parents.push_back(h0n);
        node->backward_fn = [an, bn, cn, un, dn_node, h0n, states, L, d, N, dn](detail::Node& self) {
            const auto& gy = self.grad;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (cn->requires_grad) cn->ensure_grad();
            if (un->requires_grad) un->ensure_grad();
            if (dn_node && dn_node->requires_grad) dn_node->ensure_grad();
            if (h0n && h0n->requires_grad) h0n->ensure_grad();

            // readout and skip terms
            for (int64_t k = 0; k < L; ++k) {
                const double* hk = &(*states)[static_cast<size_t>(k) * dn];
                for (int64_t di = 0; di < d; ++di) {
                    double g = gy[static_cast<size_t>(k * d + di)];
                    if (g == 0.0) continue;
                    if (cn->requires_grad) {
                        const double* hrow = hk + di * N;
                        for (int64_t n = 0; n < N; ++n) cn->grad[static_cast<size_t>(k * N + n)] += g * hrow[n];
                    }
                    double uk = un->value[static_cast<size_t>(k * d + di)];
                    if (dn_node) {
                        if (dn_node->requires_grad) dn_node->grad[static_cast<size_t>(di)] += g * uk;
                        if (un->requires_grad)
                            un->grad[static_cast<size_t>(k * d + di)] += g * dn_node->value[static_cast<size_t>(di)];
                    }
                }
            }

            // reverse state sweep
            std::vector<double> s(dn, 0.0);
            for (int64_t k = L - 1; k >= 0; --k) {
                const double* ak = &an->value[static_cast<size_t>(k) * dn];
                const double* bk = &bn->value[static_cast<size_t>(k) * dn];
                const double* ck = &cn->value[static_cast<size_t>(k * N)];
                const double* hprev =
                    k > 0 ? &(*states)[static_cast<size_t>(k - 1) * dn] : (h0n ? h0n->value.data() : nullptr);
                for (int64_t di = 0; di < d; ++di) {
                    double g = gy[static_cast<size_t>(k * d + di)];
                    double uk = un->value[static_cast<size_t>(k * d + di)];
                    double* srow = &s[static_cast<size_t>(di * N)];
                    double du_acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        double sv = srow[n] + g * ck[n];
                        double prev = hprev ? hprev[di * N + n] : 0.0;
                        if (an->requires_grad) an->grad[static_cast<size_t>(k) * dn + di * N + n] += sv * prev;
                        if (bn->requires_grad) bn->grad[static_cast<size_t>(k) * dn + di * N + n] += sv * uk;
                        du_acc += sv * bk[di * N + n];
                        srow[n] = sv * ak[di * N + n];
                    }
                    if (un->requires_grad) un->grad[static_cast<size_t>(k * d + di)] += du_acc;
                }
            }
            if (h0n && h0n->requires_grad)
                for (size_t i = 0; i < dn; ++i) h0n->grad[i] += s[i];
        };
    }
    return Tensor::wrap(node);
}

OracleDecomposition attention_form_oracle(const SSMLayerParams& p, const Tensor& dt, const Tensor& b,
                                          const Tensor& c, const Tensor& u) {
    int64_t L = u.dim(0), d = u.dim(1);
    int64_t N = b.dim(1);
    Tensor decay = ssm_decay_matrix(p).detached();
    const auto& av = decay.data();   // [d, N], negative
    const auto& dtv = dt.data();     // [L, d]
    const auto& bv = b.data();       // [L, N]
    const auto& cv = c.data();       // [L, N]
    const auto& uv = u.data();       // [L, d]

    OracleDecomposition out;
    std::vector<double> kfac(static_cast<size_t>(L * d * N));
    for (int64_t j = 0; j < L; ++j)
        for (int64_t di = 0; di < d; ++di)
            for (int64_t n = 0; n < N; ++n)
                kfac[static_cast<size_t>((j * d + di) * N + n)] =
                    dtv[static_cast<size_t>(j * d + di)] * bv[static_cast<size_t>(j * N + n)];

    std::vector<double> hprod(static_cast<size_t>(L * L * d * N), 0.0);
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j <= i; ++j)
            for (int64_t di = 0; di < d; ++di)
                for (int64_t n = 0; n < N; ++n) {
                    double prod = 1.0;
                    for (int64_t k = j + 1; k <= i; ++k)
                        prod *= std::exp(dtv[static_cast<size_t>(k * d + di)] * av[static_cast<size_t>(di * N + n)]);
                    hprod[static_cast<size_t>(((i * L + j) * d + di) * N + n)] = prod;
                }

    std::vector<double> y(static_cast<size_t>(L * d), 0.0);
    for (int64_t i = 0; i < L; ++i)
        for (int64_t di = 0; di < d; ++di) {
            double acc = 0.0;
            for (int64_t j = 0; j <= i; ++j)
                for (int64_t n = 0; n < N; ++n)
                    acc += cv[static_cast<size_t>(i * N + n)] *
                           hprod[static_cast<size_t>(((i * L + j) * d + di) * N + n)] *
                           kfac[static_cast<size_t>((j * d + di) * N + n)] * uv[static_cast<size_t>(j * d + di)];
            y[static_cast<size_t>(i * d + di)] = acc;
        }

    out.q = Tensor::from_data({L, N}, std::vector<double>(cv));
    out.k = Tensor::from_data({L, d, N}, std::move(kfac));
    out.h = Tensor::from_data({L, L, d, N}, std::move(hprod));
    out.x = Tensor::from_data({L, d}, std::vector<double>(uv));
    out.y = Tensor::from_data({L, d}, std::move(y));
    return out;
}

Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw ShapeError("naive_attention: expected rank-2 Q, K, V");
    int64_t L = q.dim(0), d = q.dim(1);
    if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != L || v.dim(0) != L)
        throw ShapeError("naive_attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) +
                         ", V " + shape_str(v.shape()) + " must agree");
    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> scores(static_cast<size_t>(L * L));
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < L; ++j) {
            double acc = 0.0;
            for (int64_t m = 0; m < d; ++m)
                acc += qv[static_cast<size_t>(i * d + m)] * kv[static_cast<size_t>(j * d + m)];
            scores[static_cast<size_t>(i * L + j)] = acc * inv_sqrt_d;
        }

    std::vector<double> out(static_cast<size_t>(L * d), 0.0);
    for (int64_t i = 0; i < L; ++i) {
        double* row = &scores[static_cast<size_t>(i * L)];
        double mx = row[0];
        for (int64_t j = 1; j < L; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < L; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int64_t j = 0; j < L; ++j) {
            double wgt = row[j] / z;
            for (int64_t m = 0; m < d; ++m)
                out[static_cast<size_t>(i * d + m)] += wgt * vv[static_cast<size_t>(j * d + m)];
        }
    }
    return Tensor::from_data({L, d}, std::move(out));
}

}  // namespace mst
