#include "mst/model.hpp"

#include "mst/rng.hpp"

namespace mst {

void validate_config(const ModelConfig& cfg) {
    if (cfg.d_model < 1) throw ConfigError("d_model must be >= 1, got " + std::to_string(cfg.d_model));
    if (cfg.n_state < 1) throw ConfigError("n_state must be >= 1, got " + std::to_string(cfg.n_state));
    if (cfg.patch < 1) throw ConfigError("patch must be >= 1, got " + std::to_string(cfg.patch));
    if (cfg.encoder_layers < 1)
        throw ConfigError("encoder_layers must be >= 1, got " + std::to_string(cfg.encoder_layers));
    if (cfg.decoder_layers < 1)
        throw ConfigError("decoder_layers must be >= 1, got " + std::to_string(cfg.decoder_layers));
    if (cfg.scan_directions != 1 && cfg.scan_directions != 2 && cfg.scan_directions != 4)
        throw ConfigError("scan_directions must be 1, 2, or 4, got " + std::to_string(cfg.scan_directions));
    if (cfg.expansion < 1) throw ConfigError("expansion must be >= 1, got " + std::to_string(cfg.expansion));
    if (cfg.precision != "f64" && cfg.precision != "f32")
        throw ConfigError("precision must be \"f64\" or \"f32\", got \"" + cfg.precision + "\"");
}

NamedParams Model::named_parameters() const {
    NamedParams out;
    collect_params("content_embed", content_embed, out);
    collect_params("style_embed", style_embed, out);
    for (size_t i = 0; i < content_encoder.size(); ++i)
        collect_params("content_encoder." + std::to_string(i), content_encoder[i], out);
    for (size_t i = 0; i < style_encoder.size(); ++i)
        collect_params("style_encoder." + std::to_string(i), style_encoder[i], out);
    for (size_t i = 0; i < decoder.size(); ++i) collect_params("decoder." + std::to_string(i), decoder[i], out);
    collect_params("cnn", cnn, out);
    return out;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p.numel();
    return n;
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
    validate_config(cfg);
    Model m;
    m.cfg = cfg;
    int64_t di = cfg.d_inner();
    auto rng = make_rng(derive_seed(seed, 0xB01d));
    m.content_embed = make_patch_embed(cfg.d_model, cfg.patch, rng);
    m.style_embed = make_patch_embed(cfg.d_model, cfg.patch, rng);
    for (int i = 0; i < cfg.encoder_layers; ++i)
        m.content_encoder.push_back(make_encoder_layer(cfg.d_model, di, cfg.n_state, cfg.scan_directions, rng));
    for (int i = 0; i < cfg.encoder_layers; ++i)
        m.style_encoder.push_back(make_encoder_layer(cfg.d_model, di, cfg.n_state, cfg.scan_directions, rng));
    for (int i = 0; i < cfg.decoder_layers; ++i)
        m.decoder.push_back(make_mstd_layer(cfg.d_model, di, cfg.n_state, cfg.scan_directions, rng));
    m.cnn = make_cnn_decoder(cfg.d_model, cfg.patch, rng);
    return m;
}

Tensor forward(const Model& m, const Tensor& content_img, const Tensor& style_img, uint64_t seed, bool shuffle) {
    PatchSeq c = patch_embed(content_img, m.content_embed);
    PatchSeq s = patch_embed(style_img, m.style_embed);
    if (c.h != s.h || c.w != s.w)
        throw ShapeError("forward: content grid " + std::to_string(c.h) + "x" + std::to_string(c.w) +
                         " vs style grid " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         "; resize or crop the style image first");
    for (const auto& layer : m.content_encoder) c = encoder_layer(c, layer);
    for (const auto& layer : m.style_encoder) s = encoder_layer(s, layer);
    for (size_t i = 0; i < m.decoder.size(); ++i)
        c = mstd_layer(c, s, m.decoder[i], derive_seed(seed, i), shuffle);
    return cnn_decode(depatchify(c), m.cnn);
}

void copy_parameters(const Model& src, Model& dst) {
    NamedParams a = src.named_parameters();
    NamedParams b = dst.named_parameters();
    if (a.size() != b.size()) throw ShapeError("copy_parameters: models have different parameter sets");
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].second.shape() != b[i].second.shape())
            throw ShapeError("copy_parameters: shape mismatch at '" + a[i].first + "'");
        b[i].second.mutable_data() = a[i].second.data();
    }
}

}  // namespace mst
