#pragma once

#include <cstdint>
#include <random>

#include "mst/adam.hpp"
#include "mst/tensor.hpp"

namespace mst {

// Learnable pieces of one selective-scan layer. A is diagonal per channel,
// stored as A = -exp(a_log) so it stays strictly negative.
struct SSMLayerParams {
    Tensor a_log;    // [d_inner, n_state]
    Tensor d_skip;   // [d_inner]; empty when the layer runs without the skip term
    Tensor w_b, b_b; // d_inner -> n_state
    Tensor w_c, b_c; // d_inner -> n_state
    Tensor w_dt, b_dt;  // d_inner -> d_inner, softplus'd into the step size
};

SSMLayerParams make_ssm_params(int64_t d_inner, int64_t n_state, std::mt19937_64& rng, bool with_d_skip);
void collect_params(const std::string& prefix, const SSMLayerParams& p, NamedParams& out);

// A = -exp(a_log), elementwise.
Tensor ssm_decay_matrix(const SSMLayerParams& p);

struct DerivedParams {
    Tensor b;   // [L, n_state]
    Tensor c;   // [L, n_state]
    Tensor dt;  // [L, d_inner], strictly positive
};

// Input-dependent parameterization: B and C are linear in the driver, the
// step size passes through softplus.
DerivedParams derive_params(const Tensor& driver, const SSMLayerParams& p);
Tensor derive_b(const Tensor& driver, const SSMLayerParams& p);
Tensor derive_c(const Tensor& source, const SSMLayerParams& p);
Tensor derive_dt(const Tensor& driver, const SSMLayerParams& p);

struct DiscretizedPair {
    Tensor a_bar;  // [L, d_inner, n_state], in (0,1] for dt>0 and A<0
    Tensor b_bar;  // [L, d_inner, n_state]
};

// a_bar = exp(dt*A), b_bar = dt*B. Throws if dt has a non-positive entry.
DiscretizedPair discretize(const Tensor& dt, const Tensor& decay_a, const Tensor& b);

// Sequential recurrence h_k = a_bar_k*h_{k-1} + b_bar_k*u_k, y_k = C_k·h_k
// (+ d_skip*u_k). Differentiable; cost linear in L.
Tensor selective_scan_1d(const DiscretizedPair& pair, const Tensor& c, const Tensor& u,
                         const Tensor& d_skip = {}, const Tensor& h0 = {});

// Closed-form O(L^2) expansion of the same recurrence, kept independent of
// the scan implementation. Skip term excluded by construction.
struct OracleDecomposition {
    Tensor q;  // [L, n_state]          content-side row factors (the C rows)
    Tensor k;  // [L, d_inner, n_state] style-side factors dt_j * B_j
    Tensor h;  // [L, L, d_inner, n_state] decay products over (i, j)
    Tensor x;  // [L, d_inner]          scan input
    Tensor y;  // [L, d_inner]
};

OracleDecomposition attention_form_oracle(const SSMLayerParams& p, const Tensor& dt, const Tensor& b,
                                          const Tensor& c, const Tensor& u);

// Row-softmax(Q K^T / sqrt(d)) V. Quadratic time and score memory; forward
// only — it exists as the benchmark baseline.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace mst
