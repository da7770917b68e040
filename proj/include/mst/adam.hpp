#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mst/tensor.hpp"

namespace mst {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Bias-corrected Adam. Moment buffers are keyed by position in the parameter
// list, which must stay stable across steps.
struct AdamState {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

// One update over all parameters. Throws if any parameter is missing its
// gradient, naming the parameter.
void adam_step(NamedParams& params, AdamState& state);

void zero_grads(NamedParams& params);

}  // namespace mst
