#include "mst/losses.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "mst/checkpoint.hpp"
#include "mst/rng.hpp"

namespace mst {

std::vector<Tensor> FeatureExtractor::features(const Tensor& image) const {
    if (taps.empty()) throw ConfigError("feature extractor has no taps");
    std::vector<Tensor> out;
    out.reserve(taps.size());
    Tensor x = image;
    for (const auto& tap : taps) {
        x = relu(conv2d(x, tap.weight, tap.bias, tap.stride, 1));
        out.push_back(x);
    }
    return out;
}

FeatureExtractor FeatureExtractor::seeded(uint64_t seed) {
    FeatureExtractor fx;
    fx.provenance = "seeded-random";
    auto rng = make_rng(derive_seed(seed, 0xFE));
    int64_t chans[5] = {3, 8, 16, 32, 64};
    for (int i = 0; i < 4; ++i) {
        Tap tap;
        double s = std::sqrt(2.0 / static_cast<double>(chans[i] * 9));
        tap.weight = Tensor::randn({chans[i + 1], chans[i], 3, 3}, rng, s);
        tap.bias = Tensor::zeros({chans[i + 1]});
        tap.stride = i == 0 ? 1 : 2;
        fx.taps.push_back(std::move(tap));
    }
    return fx;
}

void FeatureExtractor::save(const std::string& path) const {
    nlohmann::json j;
    j["type"] = "feature-extractor";
    j["provenance"] = provenance;
    nlohmann::json jt = nlohmann::json::array();
    NamedParams tensors;
    for (size_t i = 0; i < taps.size(); ++i) {
        jt.push_back({{"in", taps[i].weight.dim(1)}, {"out", taps[i].weight.dim(0)}, {"stride", taps[i].stride}});
        tensors.emplace_back("tap." + std::to_string(i) + ".weight", taps[i].weight);
        tensors.emplace_back("tap." + std::to_string(i) + ".bias", taps[i].bias);
    }
    j["taps"] = jt;
    write_checkpoint_file(path, j.dump(), tensors);
}

FeatureExtractor FeatureExtractor::from_checkpoint(const std::string& path) {
    using Kind = CheckpointError::Kind;
    RawCheckpoint ck = read_checkpoint_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ck.config_json);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::Structural, std::string("config header is not valid JSON: ") + e.what());
    }
    if (j.value("type", "") != "feature-extractor")
        throw CheckpointError(Kind::Structural, "config header type is not \"feature-extractor\"");
    FeatureExtractor fx;
    fx.provenance = "external-weights";
    auto jt = j.at("taps");
    if (ck.entries.size() != jt.size() * 2)
        throw CheckpointError(Kind::Structural, "feature extractor tensor count does not match tap list");
    for (size_t i = 0; i < jt.size(); ++i) {
        Tap tap;
        int64_t in = jt[i].at("in").get<int64_t>();
        int64_t out = jt[i].at("out").get<int64_t>();
        tap.stride = jt[i].at("stride").get<int>();
        const auto& we = ck.entries[2 * i];
        const auto& be = ck.entries[2 * i + 1];
        if (we.shape != Shape{out, in, 3, 3})
            throw CheckpointError(Kind::Structural, "tap " + std::to_string(i) + " weight has shape " +
                                                        shape_str(we.shape) + ", expected " +
                                                        shape_str({out, in, 3, 3}));
        if (be.shape != Shape{out})
            throw CheckpointError(Kind::Structural, "tap " + std::to_string(i) + " bias has shape " +
                                                        shape_str(be.shape) + ", expected [" + std::to_string(out) +
                                                        "]");
        tap.weight = Tensor::from_data(we.shape, ck.values(2 * i));
        tap.bias = Tensor::from_data(be.shape, ck.values(2 * i + 1));
        fx.taps.push_back(std::move(tap));
    }
    return fx;
}

Tensor content_loss(const Tensor& x_g, const Tensor& x_c, const FeatureExtractor& fx) {
    if (x_g.shape() != x_c.shape())
        throw ShapeError("content_loss: images " + shape_str(x_g.shape()) + " and " + shape_str(x_c.shape()) +
                         " differ");
    auto fg = fx.features(x_g);
    auto fc = fx.features(x_c);
    Tensor acc;
    for (size_t i = 0; i < fg.size(); ++i) {
        Tensor term = mse(fg[i], fc[i]);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(fg.size()));
}

std::pair<Tensor, Tensor> channel_moments(const Tensor& fmap, double eps) {
    if (fmap.rank() != 3) throw ShapeError("channel_moments: expected [c,h,w], got " + shape_str(fmap.shape()));
    int64_t c = fmap.dim(0), hw = fmap.dim(1) * fmap.dim(2);
    Tensor flat = reshape(fmap, {c, hw});
    Tensor mean = mean_last(flat);
    Tensor var = sub(mean_last(mul(flat, flat)), mul(mean, mean));
    Tensor sigma = sqrt(add_scalar(var, eps));
    return {mean, sigma};
}

Tensor style_loss(const Tensor& x_g, const Tensor& x_s, const FeatureExtractor& fx) {
    if (x_g.shape() != x_s.shape())
        throw ShapeError("style_loss: images " + shape_str(x_g.shape()) + " and " + shape_str(x_s.shape()) +
                         " differ");
    auto fg = fx.features(x_g);
    auto fs = fx.features(x_s);
    Tensor acc;
    for (size_t i = 0; i < fg.size(); ++i) {
        auto [mg, sg] = channel_moments(fg[i]);
        auto [ms, ss] = channel_moments(fs[i]);
        Tensor term = add(mse(mg, ms), mse(sg, ss));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(fg.size()));
}

std::pair<Tensor, Tensor> identity_losses(const Model& m, const Tensor& x_c, const Tensor& x_s,
                                          const FeatureExtractor& fx, uint64_t seed, bool shuffle) {
    Tensor g_c = forward(m, x_c, x_c, seed, shuffle);
    Tensor g_s = forward(m, x_s, x_s, seed, shuffle);
    Tensor lid1 = add(mse(g_c, x_c), mse(g_s, x_s));

    auto fgc = fx.features(g_c);
    auto fc = fx.features(x_c);
    auto fgs = fx.features(g_s);
    auto fs = fx.features(x_s);
    Tensor acc;
    for (size_t i = 0; i < fgc.size(); ++i) {
        Tensor term = add(mse(fgc[i], fc[i]), mse(fgs[i], fs[i]));
        acc = acc.defined() ? add(acc, term) : term;
    }
    Tensor lid2 = scale(acc, 1.0 / static_cast<double>(fgc.size()));
    return {lid1, lid2};
}

Tensor total_loss(const Tensor& lc, const Tensor& ls, const Tensor& lid1, const Tensor& lid2,
                  const LossWeights& w) {
    auto check = [](const Tensor& t, const char* name) {
        if (!t.defined() || t.numel() != 1) throw ShapeError(std::string("total_loss: ") + name + " must be scalar");
        if (std::isnan(t.item())) throw std::runtime_error(std::string("total_loss: component '") + name + "' is NaN");
    };
    check(lc, "content");
    check(ls, "style");
    check(lid1, "identity1");
    check(lid2, "identity2");
    Tensor t = scale(lc, w.content);
    t = add(t, scale(ls, w.style));
    t = add(t, scale(lid1, w.identity1));
    t = add(t, scale(lid2, w.identity2));
    return t;
}

}  // namespace mst
