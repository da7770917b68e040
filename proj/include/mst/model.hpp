#pragma once

#include <string>

#include "mst/blocks.hpp"

namespace mst {

struct ModelConfig {
    int64_t d_model = 192;
    int64_t n_state = 16;
    int patch = 8;
    int encoder_layers = 3;
    int decoder_layers = 3;
    int scan_directions = 4;
    int expansion = 2;
    std::string precision = "f64";  // "f32" is only meaningful for benchmark kernels
    uint64_t seed = 0;

    int64_t d_inner() const { return expansion * d_model; }
};

// Throws ConfigError naming the first offending field.
void validate_config(const ModelConfig& cfg);

// Content and style encoders are independent towers; the decoder stack fuses
// them; the CNN decoder maps the merged tokens back to an image.
struct Model {
    ModelConfig cfg;
    PatchEmbedParams content_embed, style_embed;
    std::vector<EncoderLayerParams> content_encoder, style_encoder;
    std::vector<MstdLayerParams> decoder;
    CnnDecoderParams cnn;

    NamedParams named_parameters() const;
    int64_t parameter_count() const;
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

// Full pipeline. Inputs are [3,H,W] in [0,1] with H, W divisible by the patch
// size; the output matches the content image's size and stays in [0,1].
Tensor forward(const Model& m, const Tensor& content_img, const Tensor& style_img, uint64_t seed,
               bool shuffle = true);

// Copies parameter values from src into dst (same architecture).
void copy_parameters(const Model& src, Model& dst);

}  // namespace mst
