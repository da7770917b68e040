#include "mst/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "mst/rng.hpp"

namespace mst {

namespace {

Tensor init_linear_weight(int64_t d_in, int64_t d_out, std::mt19937_64& rng) {
    return Tensor::randn({d_in, d_out}, rng, 1.0 / std::sqrt(static_cast<double>(d_in))).set_requires_grad(true);
}

// tokens [L, d] -> grid [d, h, w]
Tensor tokens_to_grid(const Tensor& tokens, int64_t h, int64_t w) {
    return reshape(transpose2d(tokens), {tokens.dim(1), h, w});
}

Tensor grid_to_tokens(const Tensor& grid) {
    return transpose2d(reshape(grid, {grid.dim(0), grid.dim(1) * grid.dim(2)}));
}

Tensor dwconv_on_grid(const Tensor& tokens, int64_t h, int64_t w, const Tensor& kernels) {
    return grid_to_tokens(depthwise_conv2d(tokens_to_grid(tokens, h, w), kernels));
}

int stage_count_for_patch(int patch) {
    if (patch < 1) throw ConfigError("patch size must be >= 1, got " + std::to_string(patch));
    int stages = 0, p = patch;
    while (p > 1) {
        if (p % 2 != 0)
            throw ConfigError("patch size " + std::to_string(patch) +
                              " is not a power of two; the upsampling decoder cannot reach it");
        p /= 2;
        ++stages;
    }
    return stages;
}

}  // namespace

VSSMBlockParams make_vssm_params(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                 std::mt19937_64& rng, bool with_d_skip) {
    VSSMBlockParams p;
    p.w_in = init_linear_weight(d_model, d_inner, rng);
    p.b_in = Tensor::zeros({d_inner}).set_requires_grad(true);
    p.w_z = init_linear_weight(d_model, d_inner, rng);
    p.b_z = Tensor::zeros({d_inner}).set_requires_grad(true);
    p.conv = Tensor::randn({d_inner, 3, 3}, rng, 1.0 / 3.0).set_requires_grad(true);
    p.ssm.reserve(static_cast<size_t>(n_dirs));
    for (int i = 0; i < n_dirs; ++i) p.ssm.push_back(make_ssm_params(d_inner, n_state, rng, with_d_skip));
    p.ln_gamma = Tensor::full({d_inner}, 1.0).set_requires_grad(true);
    p.ln_beta = Tensor::zeros({d_inner}).set_requires_grad(true);
    p.w_out = init_linear_weight(d_inner, d_model, rng);
    p.b_out = Tensor::zeros({d_model}).set_requires_grad(true);
    return p;
}

void collect_params(const std::string& prefix, const VSSMBlockParams& p, NamedParams& out) {
    out.emplace_back(prefix + ".w_in", p.w_in);
    out.emplace_back(prefix + ".b_in", p.b_in);
    out.emplace_back(prefix + ".w_z", p.w_z);
    out.emplace_back(prefix + ".b_z", p.b_z);
    out.emplace_back(prefix + ".conv", p.conv);
    for (size_t i = 0; i < p.ssm.size(); ++i) collect_params(prefix + ".ssm." + std::to_string(i), p.ssm[i], out);
    out.emplace_back(prefix + ".ln_gamma", p.ln_gamma);
    out.emplace_back(prefix + ".ln_beta", p.ln_beta);
    out.emplace_back(prefix + ".w_out", p.w_out);
    out.emplace_back(prefix + ".b_out", p.b_out);
}

PatchSeq base_vssm(const PatchSeq& p, const VSSMBlockParams& params) {
    if (p.tokens.dim(1) != params.w_in.dim(0))
        throw ShapeError("base_vssm: token width " + std::to_string(p.tokens.dim(1)) + " vs projection input " +
                         std::to_string(params.w_in.dim(0)));
    Tensor x = linear(p.tokens, params.w_in, params.b_in);
    Tensor z = linear(p.tokens, params.w_z, params.b_z);
    x = silu(dwconv_on_grid(x, p.h, p.w, params.conv));
    PatchSeq xg{x, p.h, p.w};
    PatchSeq y = scan_2d(params.ssm, xg, xg, nullptr, /*use_d_skip=*/true);
    Tensor out = layer_norm(y.tokens, params.ln_gamma, params.ln_beta);
    out = mul(out, silu(z));
    return {linear(out, params.w_out, params.b_out), p.h, p.w};
}

PatchSeq st_vssm(const PatchSeq& content, const PatchSeq& style, const VSSMBlockParams& params) {
    if (content.h != style.h || content.w != style.w)
        throw ShapeError("st_vssm: content grid " + std::to_string(content.h) + "x" + std::to_string(content.w) +
                         " vs style grid " + std::to_string(style.h) + "x" + std::to_string(style.w));
    Tensor x = linear(content.tokens, params.w_in, params.b_in);
    Tensor s = linear(style.tokens, params.w_in, params.b_in);
    Tensor z = linear(content.tokens, params.w_z, params.b_z);
    x = silu(dwconv_on_grid(x, content.h, content.w, params.conv));
    s = silu(dwconv_on_grid(s, style.h, style.w, params.conv));
    PatchSeq xg{x, content.h, content.w};
    PatchSeq sg{s, style.h, style.w};
    PatchSeq y = scan_2d(params.ssm, sg, sg, &xg, /*use_d_skip=*/false);
    Tensor out = layer_norm(y.tokens, params.ln_gamma, params.ln_beta);
    out = mul(out, silu(z));
    return {linear(out, params.w_out, params.b_out), content.h, content.w};
}

std::pair<PatchSeq, ShufflePlan> shuffle_style(const PatchSeq& style, uint64_t seed) {
    int64_t L = style.h * style.w;
    ShufflePlan plan;
    plan.seed = seed;
    plan.perm.resize(static_cast<size_t>(L));
    for (int64_t i = 0; i < L; ++i) plan.perm[static_cast<size_t>(i)] = i;
    auto rng = make_rng(seed);
    for (int64_t i = L - 1; i > 0; --i) {
        auto j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
        std::swap(plan.perm[static_cast<size_t>(i)], plan.perm[static_cast<size_t>(j)]);
    }
    PatchSeq out{gather_rows(style.tokens, plan.perm), style.h, style.w};
    return {std::move(out), std::move(plan)};
}

PatchSeq apply_inverse_shuffle(const PatchSeq& shuffled, const ShufflePlan& plan) {
    auto inv = inverse_permutation(plan.perm);
    return {gather_rows(shuffled.tokens, inv), shuffled.h, shuffled.w};
}

EncoderLayerParams make_encoder_layer(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                      std::mt19937_64& rng) {
    EncoderLayerParams p;
    p.ln_gamma = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    p.ln_beta = Tensor::zeros({d_model}).set_requires_grad(true);
    p.block = make_vssm_params(d_model, d_inner, n_state, n_dirs, rng, /*with_d_skip=*/true);
    return p;
}

void collect_params(const std::string& prefix, const EncoderLayerParams& p, NamedParams& out) {
    out.emplace_back(prefix + ".ln_gamma", p.ln_gamma);
    out.emplace_back(prefix + ".ln_beta", p.ln_beta);
    collect_params(prefix + ".block", p.block, out);
}

PatchSeq encoder_layer(const PatchSeq& p, const EncoderLayerParams& params) {
    PatchSeq normed{layer_norm(p.tokens, params.ln_gamma, params.ln_beta), p.h, p.w};
    PatchSeq inner = base_vssm(normed, params.block);
    return {add(p.tokens, inner.tokens), p.h, p.w};
}

MstdLayerParams make_mstd_layer(int64_t d_model, int64_t d_inner, int64_t n_state, int n_dirs,
                                std::mt19937_64& rng) {
    MstdLayerParams p;
    p.ln_c_gamma = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    p.ln_c_beta = Tensor::zeros({d_model}).set_requires_grad(true);
    p.ln_s_gamma = Tensor::full({d_model}, 1.0).set_requires_grad(true);
    p.ln_s_beta = Tensor::zeros({d_model}).set_requires_grad(true);
    p.block = make_vssm_params(d_model, d_inner, n_state, n_dirs, rng, /*with_d_skip=*/false);
    return p;
}

void collect_params(const std::string& prefix, const MstdLayerParams& p, NamedParams& out) {
    out.emplace_back(prefix + ".ln_c_gamma", p.ln_c_gamma);
    out.emplace_back(prefix + ".ln_c_beta", p.ln_c_beta);
    out.emplace_back(prefix + ".ln_s_gamma", p.ln_s_gamma);
    out.emplace_back(prefix + ".ln_s_beta", p.ln_s_beta);
    collect_params(prefix + ".block", p.block, out);
}

PatchSeq mstd_layer(const PatchSeq& content, const PatchSeq& style, const MstdLayerParams& params,
                    uint64_t seed, bool shuffle) {
    if (content.h != style.h || content.w != style.w)
        throw ShapeError("mstd_layer: content grid " + std::to_string(content.h) + "x" +
                         std::to_string(content.w) + " vs style grid " + std::to_string(style.h) + "x" +
                         std::to_string(style.w));
    PatchSeq c{layer_norm(content.tokens, params.ln_c_gamma, params.ln_c_beta), content.h, content.w};
    PatchSeq s{layer_norm(style.tokens, params.ln_s_gamma, params.ln_s_beta), style.h, style.w};
    if (shuffle) s = shuffle_style(s, seed).first;
    PatchSeq inner = st_vssm(c, s, params.block);
    return {add(content.tokens, inner.tokens), content.h, content.w};
}

PatchEmbedParams make_patch_embed(int64_t d_model, int patch, std::mt19937_64& rng) {
    PatchEmbedParams p;
    int64_t feat = 3ll * patch * patch;
    p.weight = init_linear_weight(feat, d_model, rng);
    p.bias = Tensor::zeros({d_model}).set_requires_grad(true);
    p.patch = patch;
    return p;
}

void collect_params(const std::string& prefix, const PatchEmbedParams& p, NamedParams& out) {
    out.emplace_back(prefix + ".weight", p.weight);
    out.emplace_back(prefix + ".bias", p.bias);
}

PatchSeq patch_embed(const Tensor& image, const PatchEmbedParams& params) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("patch_embed: image must be [3,H,W], got " + shape_str(image.shape()));
    int64_t H = image.dim(1), W = image.dim(2), p = params.patch;
    if (H % p != 0 || W % p != 0)
        throw ShapeError("patch_embed: image " + shape_str(image.shape()) + " not divisible by patch size " +
                         std::to_string(p) + "; crop to a multiple first");
    Tensor tokens = linear(patchify(image, params.patch), params.weight, params.bias);
    return {tokens, H / p, W / p};
}

Tensor depatchify(const PatchSeq& seq) {
    return reshape(transpose2d(seq.tokens), {seq.tokens.dim(1), seq.h, seq.w});
}

CnnDecoderParams make_cnn_decoder(int64_t d_model, int patch, std::mt19937_64& rng) {
    int stages = stage_count_for_patch(patch);
    if (d_model % (1ll << stages) != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by 2^" +
                          std::to_string(stages) + " as the decoder stages require");
    CnnDecoderParams p;
    int64_t ch = d_model;
    for (int i = 0; i < stages; ++i) {
        int64_t out_ch = ch / 2;
        double s = 1.0 / std::sqrt(static_cast<double>(ch * 9));
        CnnDecoderParams::Conv conv;
        conv.weight = Tensor::randn({out_ch, ch, 3, 3}, rng, s).set_requires_grad(true);
        conv.bias = Tensor::zeros({out_ch}).set_requires_grad(true);
        p.stages.push_back(std::move(conv));
        ch = out_ch;
    }
    double s = 1.0 / std::sqrt(static_cast<double>(ch * 9));
    p.final_conv.weight = Tensor::randn({3, ch, 3, 3}, rng, s).set_requires_grad(true);
    // start around mid-gray so the clamp does not saturate at init
    p.final_conv.bias = Tensor::full({3}, 0.5).set_requires_grad(true);
    return p;
}

void collect_params(const std::string& prefix, const CnnDecoderParams& p, NamedParams& out) {
    for (size_t i = 0; i < p.stages.size(); ++i) {
        out.emplace_back(prefix + ".stage." + std::to_string(i) + ".weight", p.stages[i].weight);
        out.emplace_back(prefix + ".stage." + std::to_string(i) + ".bias", p.stages[i].bias);
    }
    out.emplace_back(prefix + ".final.weight", p.final_conv.weight);
    out.emplace_back(prefix + ".final.bias", p.final_conv.bias);
}

Tensor cnn_decode(const Tensor& fmap, const CnnDecoderParams& params) {
    if (fmap.rank() != 3) throw ShapeError("cnn_decode: feature map must be [d,h,w], got " + shape_str(fmap.shape()));
    Tensor x = fmap;
    for (const auto& stage : params.stages) {
        if (stage.weight.dim(1) != x.dim(0))
            throw ConfigError("cnn_decode: stage expects " + std::to_string(stage.weight.dim(1)) +
                              " channels, feature map has " + std::to_string(x.dim(0)));
        x = upsample_nn2x(relu(conv2d(x, stage.weight, stage.bias, 1, 1)));
    }
    x = conv2d(x, params.final_conv.weight, params.final_conv.bias, 1, 1);
    return clamp01(x);
}

}  // namespace mst
