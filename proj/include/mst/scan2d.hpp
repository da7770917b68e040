#pragma once

#include <span>
#include <vector>

#include "mst/ssm.hpp"
#include "mst/tensor.hpp"

namespace mst {

// Token sequence with the grid geometry it was flattened from.
struct PatchSeq {
    Tensor tokens;  // [h*w, d]
    int64_t h = 0, w = 0;
};

PatchSeq make_patch_seq(Tensor tokens, int64_t h, int64_t w);

enum class ScanDirection { RowMajorForward, RowMajorBackward, ColMajorForward, ColMajorBackward };

constexpr ScanDirection kAllDirections[4] = {
    ScanDirection::RowMajorForward,
    ScanDirection::RowMajorBackward,
    ScanDirection::ColMajorForward,
    ScanDirection::ColMajorBackward,
};

// Bijection sequence-position -> raster index. inverse(map(p)) == p.
std::vector<int64_t> direction_index_map(ScanDirection dir, int64_t h, int64_t w);
std::vector<int64_t> inverse_permutation(std::span<const int64_t> perm);

Tensor flatten_direction(const PatchSeq& seq, ScanDirection dir);
PatchSeq unflatten_direction(const Tensor& y, ScanDirection dir, int64_t h, int64_t w);

// Multi-direction selective scan over a grid. B and the step size derive
// from the driver, C from the content source (the driver itself when content
// is null), and the scan consumes scan_input. One parameter set per
// direction; outputs are reorder-merged by summation.
PatchSeq scan_2d(std::span<const SSMLayerParams> dir_params, const PatchSeq& driver,
                 const PatchSeq& scan_input, const PatchSeq* content, bool use_d_skip);

}  // namespace mst
