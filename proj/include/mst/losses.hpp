#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mst/model.hpp"

namespace mst {

// Frozen multi-tap convolutional pyramid standing in for a pretrained
// perceptual network. Taps are 3x3 convs with ReLU; tap i's activation is the
// i-th feature map. Never receives gradient updates; gradients still flow
// through it to the image.
struct FeatureExtractor {
    struct Tap {
        Tensor weight;  // [out, in, 3, 3]
        Tensor bias;    // [out]
        int stride = 1;
    };
    std::vector<Tap> taps;
    std::string provenance = "seeded-random";  // or "external-weights"

    std::vector<Tensor> features(const Tensor& image) const;

    static FeatureExtractor seeded(uint64_t seed);
    static FeatureExtractor from_checkpoint(const std::string& path);
    void save(const std::string& path) const;
};

struct LossWeights {
    double content = 7.0;
    double style = 10.0;
    double identity1 = 70.0;
    double identity2 = 1.0;
};

// Mean over taps of the mean squared feature deviation.
Tensor content_loss(const Tensor& x_g, const Tensor& x_c, const FeatureExtractor& fx);

// Mean over taps of squared deviations of per-channel spatial means and
// standard deviations (population convention, eps inside the root).
Tensor style_loss(const Tensor& x_g, const Tensor& x_s, const FeatureExtractor& fx);

// Reconstruction penalties with each image serving as both content and
// style: pixel-space (first) and feature-space (second).
std::pair<Tensor, Tensor> identity_losses(const Model& m, const Tensor& x_c, const Tensor& x_s,
                                          const FeatureExtractor& fx, uint64_t seed, bool shuffle = true);

// Weighted sum; a NaN component is rejected by name.
Tensor total_loss(const Tensor& lc, const Tensor& ls, const Tensor& lid1, const Tensor& lid2,
                  const LossWeights& w);

// Per-channel spatial mean and standard deviation of a [c,h,w] map.
std::pair<Tensor, Tensor> channel_moments(const Tensor& fmap, double eps = 1e-6);

}  // namespace mst
