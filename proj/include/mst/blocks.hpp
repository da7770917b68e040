#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "mst/scan2d.hpp"

namespace mst {

// Parameters of one VSSM block. The value projection and the depthwise conv
// are shared between the content and style streams; the gate projection is
// fed by the content stream only.
struct VSSMBlockParams {
    Tensor w_in, b_in;   // d_model -> d_inner (value stream)
    Tensor w_z, b_z;     // d_model -> d_inner (gate)
    Tensor conv;         // [d_inner, 3, 3] depthwise
    std::vector<SSMLayerParams> ssm;  // one per scan direction
    Tensor ln_gamma, ln_beta;         // [d_inner]
    Tensor w_out, b_out;  // d_inner -> d_model
};

VSSMBlockParams make_vssm_params(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                 std::mt19937_64& rng, bool with_d_skip);
void collect_params(const std::string& prefix, const VSSMBlockParams& p, NamedParams& out);

// Lin -> DWConv -> SiLU -> multi-direction scan (skip term on) -> LayerNorm
// -> SiLU gate -> Lin.
PatchSeq base_vssm(const PatchSeq& p, const VSSMBlockParams& params);

// Same skeleton, two streams: state (B, step size, scan input) from style,
// readout C and the gate from content, no skip term. Style must already be
// shuffled by the caller.
PatchSeq st_vssm(const PatchSeq& content, const PatchSeq& style, const VSSMBlockParams& params);

struct ShufflePlan {
    std::vector<int64_t> perm;
    uint64_t seed = 0;
};

std::pair<PatchSeq, ShufflePlan> shuffle_style(const PatchSeq& style, uint64_t seed);
PatchSeq apply_inverse_shuffle(const PatchSeq& shuffled, const ShufflePlan& plan);

struct EncoderLayerParams {
    Tensor ln_gamma, ln_beta;  // pre-norm over d_model
    VSSMBlockParams block;
};

EncoderLayerParams make_encoder_layer(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                      std::mt19937_64& rng);
void collect_params(const std::string& prefix, const EncoderLayerParams& p, NamedParams& out);

// Pre-norm residual: p + base_vssm(LN(p)).
PatchSeq encoder_layer(const PatchSeq& p, const EncoderLayerParams& params);

struct MstdLayerParams {
    Tensor ln_c_gamma, ln_c_beta;  // pre-norm, content stream
    Tensor ln_s_gamma, ln_s_beta;  // pre-norm, style stream
    VSSMBlockParams block;
};

MstdLayerParams make_mstd_layer(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                std::mt19937_64& rng);
void collect_params(const std::string& prefix, const MstdLayerParams& p, NamedParams& out);

// Content residual around the style-fusing block; the style tokens are
// shuffled (seeded) unless disabled.
PatchSeq mstd_layer(const PatchSeq& content, const PatchSeq& style, const MstdLayerParams& params,
                    uint64_t seed, bool shuffle = true);

struct PatchEmbedParams {
    Tensor weight;  // [c*p*p, d_model]
    Tensor bias;    // [d_model]
    int patch = 8;
};

PatchEmbedParams make_patch_embed(int64_t d_model, int patch, std::mt19937_64& rng);
void collect_params(const std::string& prefix, const PatchEmbedParams& p, NamedParams& out);

// Non-overlapping p x p blocks, flattened and projected; raster token order.
PatchSeq patch_embed(const Tensor& image, const PatchEmbedParams& params);

// [h*w, d] tokens -> [d, h, w] feature map (pure rearrangement).
Tensor depatchify(const PatchSeq& seq);

struct CnnDecoderParams {
    struct Conv {
        Tensor weight, bias;
    };
    std::vector<Conv> stages;  // 3x3 conv + ReLU + 2x nearest upsample each
    Conv final_conv;           // 3x3 conv to RGB
};

// Stage count is log2(patch); channels halve per stage.
CnnDecoderParams make_cnn_decoder(int64_t d_model, int patch, std::mt19937_64& rng);
void collect_params(const std::string& prefix, const CnnDecoderParams& p, NamedParams& out);

// [d, h, w] -> [3, p*h, p*w], clamped to [0, 1].
Tensor cnn_decode(const Tensor& fmap, const CnnDecoderParams& params);

}  // namespace mst
