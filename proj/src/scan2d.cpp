#include "mst/scan2d.hpp"

namespace mst {

PatchSeq make_patch_seq(Tensor tokens, int64_t h, int64_t w) {
    if (h < 1 || w < 1) throw ConfigError("patch grid must be at least 1x1");
    if (tokens.rank() != 2 || tokens.dim(0) != h * w)
        throw ShapeError("patch sequence " + shape_str(tokens.shape()) + " does not cover a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    return {std::move(tokens), h, w};
}

std::vector<int64_t> direction_index_map(ScanDirection dir, int64_t h, int64_t w) {
    int64_t L = h * w;
    std::vector<int64_t> map(static_cast<size_t>(L));
    switch (dir) {
        case ScanDirection::RowMajorForward:
            for (int64_t i = 0; i < L; ++i) map[static_cast<size_t>(i)] = i;
            break;
        case ScanDirection::RowMajorBackward:
            for (int64_t i = 0; i < L; ++i) map[static_cast<size_t>(i)] = L - 1 - i;
            break;
        case ScanDirection::ColMajorForward:
            for (int64_t s = 0; s < L; ++s) map[static_cast<size_t>(s)] = (s % h) * w + s / h;
            break;
        case ScanDirection::ColMajorBackward:
            for (int64_t s = 0; s < L; ++s) {
                int64_t r = L - 1 - s;
                map[static_cast<size_t>(s)] = (r % h) * w + r / h;
            }
            break;
    }
    return map;
}

std::vector<int64_t> inverse_permutation(std::span<const int64_t> perm) {
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
    return inv;
}

Tensor flatten_direction(const PatchSeq& seq, ScanDirection dir) {
    auto map = direction_index_map(dir, seq.h, seq.w);
    return gather_rows(seq.tokens, map);
}

PatchSeq unflatten_direction(const Tensor& y, ScanDirection dir, int64_t h, int64_t w) {
    if (y.rank() != 2 || y.dim(0) != h * w)
        throw ShapeError("unflatten_direction: sequence " + shape_str(y.shape()) + " does not match a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    auto inv = inverse_permutation(direction_index_map(dir, h, w));
    return {gather_rows(y, inv), h, w};
}

PatchSeq scan_2d(std::span<const SSMLayerParams> dir_params, const PatchSeq& driver,
                 const PatchSeq& scan_input, const PatchSeq* content, bool use_d_skip) {
    size_t ndir = dir_params.size();
    if (ndir != 1 && ndir != 2 && ndir != 4)
        throw ConfigError("scan_2d: direction count must be 1, 2, or 4, got " + std::to_string(ndir));
    if (driver.h != scan_input.h || driver.w != scan_input.w)
        throw ShapeError("scan_2d: driver grid " + std::to_string(driver.h) + "x" + std::to_string(driver.w) +
                         " vs scan input grid " + std::to_string(scan_input.h) + "x" +
                         std::to_string(scan_input.w));
    if (content && (content->h != driver.h || content->w != driver.w))
        throw ShapeError("scan_2d: content grid " + std::to_string(content->h) + "x" +
                         std::to_string(content->w) + " vs driver grid " + std::to_string(driver.h) + "x" +
                         std::to_string(driver.w));

    if (use_d_skip)
        for (const auto& p : dir_params)
            if (!p.d_skip.defined()) throw ConfigError("scan_2d: skip term requested but parameters carry no d_skip");

    Tensor merged;
    for (size_t i = 0; i < ndir; ++i) {
        ScanDirection dir = kAllDirections[i];
        Tensor drv = flatten_direction(driver, dir);
        Tensor u = flatten_direction(scan_input, dir);
        Tensor csrc = content ? flatten_direction(*content, dir) : drv;

        const SSMLayerParams& p = dir_params[i];
        Tensor b = derive_b(drv, p);
        Tensor dt = derive_dt(drv, p);
        Tensor c = derive_c(csrc, p);
        DiscretizedPair pair = discretize(dt, ssm_decay_matrix(p), b);
        Tensor y = selective_scan_1d(pair, c, u, use_d_skip ? p.d_skip : Tensor{});

        Tensor back = unflatten_direction(y, dir, driver.h, driver.w).tokens;
        merged = merged.defined() ? add(merged, back) : back;
    }
    return {merged, driver.h, driver.w};
}

}  // namespace mst
