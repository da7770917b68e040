#include "mst/grad_check.hpp"

#include <cmath>
#include <limits>

namespace mst {

double grad_check_fd(const std::function<Tensor()>& f, NamedParams& params, const GradCheckOptions& opts) {
    zero_grads(params);
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic(params.size());
    for (size_t i = 0; i < params.size(); ++i)
        analytic[i] = params[i].second.has_grad() ? params[i].second.grad()
                                                  : std::vector<double>(params[i].second.data().size(), 0.0);

    const double h = opts.step;
    double worst = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
        auto& theta = params[i].second.mutable_data();
        int64_t n = static_cast<int64_t>(theta.size());
        int64_t count = opts.max_coords_per_tensor > 0 ? std::min<int64_t>(n, opts.max_coords_per_tensor) : n;
        int64_t stride = n / count;
        for (int64_t c = 0; c < count; ++c) {
            int64_t j = c * stride;
            double saved = theta[static_cast<size_t>(j)];
            double fp, fm;
            {
                detail::NoGradGuard ng;
                theta[static_cast<size_t>(j)] = saved + h;
                fp = f().item();
                theta[static_cast<size_t>(j)] = saved - h;
                fm = f().item();
                theta[static_cast<size_t>(j)] = saved;
            }
            if (!std::isfinite(fp) || !std::isfinite(fm)) return std::numeric_limits<double>::infinity();
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i][static_cast<size_t>(j)];
            double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace mst
