#pragma once

#include <functional>

#include "mst/adam.hpp"
#include "mst/tensor.hpp"

namespace mst {

struct GradCheckOptions {
    double step = 1e-5;
    // <= 0 checks every coordinate; otherwise an evenly strided sample per tensor.
    int64_t max_coords_per_tensor = -1;
};

// Central finite differences against reverse-mode gradients.
// f must rebuild its graph over the current parameter values on every call.
// Returns max over checked coordinates of
//   |analytic - numeric| / max(1, |analytic|, |numeric|).
// A non-finite f evaluation yields +inf.
double grad_check_fd(const std::function<Tensor()>& f, NamedParams& params, const GradCheckOptions& opts = {});

}  // namespace mst
