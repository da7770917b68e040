#include "mst/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace mst {

void adam_step(NamedParams& params, AdamState& state) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            size_t n = params[i].second.data().size();
            state.m[i].assign(n, 0.0);
            state.v[i].assign(n, 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::logic_error("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                               " buffers for " + std::to_string(params.size()) + " parameters");

    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));

    for (size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        if (!p.has_grad()) throw std::runtime_error("adam_step: missing gradient for parameter '" + name + "'");
        const auto& g = p.grad();
        auto& theta = p.mutable_data();
        if (state.m[i].size() != theta.size())
            throw std::logic_error("adam_step: moment buffer size mismatch for parameter '" + name + "'");
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < theta.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            theta[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

void zero_grads(NamedParams& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

}  // namespace mst
