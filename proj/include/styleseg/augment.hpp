#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "styleseg/errors.hpp"
#include "styleseg/image.hpp"
#include "styleseg/rng.hpp"
#include "styleseg/stylizer.hpp"

namespace styleseg {

// Element of the dihedral group D4: counterclockwise quarter turns, then
// horizontal flip, then vertical flip, in that order.
struct GeometricTransform {
    int quarter_turns = 0; // 0..3
    bool flip_h = false;
    bool flip_v = false;
};

enum class RatioLaw { UniformCount }; // k uniform over {0, ..., batch_size}

struct AugmentationPolicy {
    bool geometric_enabled = true;
    bool style_enabled = false;
    Real alpha = 0.5;
    RatioLaw ratio_law = RatioLaw::UniformCount;

    void validate() const {
        if (alpha < 0 || alpha > 1) throw ConfigError("AugmentationPolicy: alpha must be in [0,1]");
    }
};

// out(i, j) = in(j, W-1-i); output is W x H
inline Image rotate90ccw(const Image& in) {
    Image out(in.width, in.height);
    for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j)
            for (int c = 0; c < 3; ++c) out.at(i, j, c) = in.at(j, in.width - 1 - i, c);
    return out;
}

inline BinaryMask rotate90ccw(const BinaryMask& in) {
    BinaryMask out(in.width, in.height);
    for (int i = 0; i < out.height; ++i)
        for (int j = 0; j < out.width; ++j) out.at(i, j) = in.at(j, in.width - 1 - i);
    return out;
}

inline Image flip_horizontal(const Image& in) {
    Image out(in.height, in.width);
    for (int i = 0; i < in.height; ++i)
        for (int j = 0; j < in.width; ++j)
            for (int c = 0; c < 3; ++c) out.at(i, j, c) = in.at(i, in.width - 1 - j, c);
    return out;
}

inline BinaryMask flip_horizontal(const BinaryMask& in) {
    BinaryMask out(in.height, in.width);
    for (int i = 0; i < in.height; ++i)
        for (int j = 0; j < in.width; ++j) out.at(i, j) = in.at(i, in.width - 1 - j);
    return out;
}

inline Image flip_vertical(const Image& in) {
    Image out(in.height, in.width);
    for (int i = 0; i < in.height; ++i)
        for (int j = 0; j < in.width; ++j)
            for (int c = 0; c < 3; ++c) out.at(i, j, c) = in.at(in.height - 1 - i, j, c);
    return out;
}

inline BinaryMask flip_vertical(const BinaryMask& in) {
    BinaryMask out(in.height, in.width);
    for (int i = 0; i < in.height; ++i)
        for (int j = 0; j < in.width; ++j) out.at(i, j) = in.at(in.height - 1 - i, j);
    return out;
}

// Identical index permutation on image and mask, so labels stay aligned.
inline Sample apply_geometric(const Sample& sample, const GeometricTransform& t) {
    if (t.quarter_turns < 0 || t.quarter_turns > 3)
        throw std::invalid_argument("apply_geometric: quarter_turns must be in 0..3");
    Sample out = sample;
    for (int k = 0; k < t.quarter_turns; ++k) {
        out.image = rotate90ccw(out.image);
        out.mask = rotate90ccw(out.mask);
    }
    if (t.flip_h) {
        out.image = flip_horizontal(out.image);
        out.mask = flip_horizontal(out.mask);
    }
    if (t.flip_v) {
        out.image = flip_vertical(out.image);
        out.mask = flip_vertical(out.mask);
    }
    return out;
}

inline Sample apply_inverse_geometric(const Sample& sample, const GeometricTransform& t) {
    Sample out = sample;
    if (t.flip_v) {
        out.image = flip_vertical(out.image);
        out.mask = flip_vertical(out.mask);
    }
    if (t.flip_h) {
        out.image = flip_horizontal(out.image);
        out.mask = flip_horizontal(out.mask);
    }
    for (int k = 0; k < (4 - t.quarter_turns) % 4; ++k) {
        out.image = rotate90ccw(out.image);
        out.mask = rotate90ccw(out.mask);
    }
    return out;
}

inline GeometricTransform draw_geometric(Rng& rng) {
    GeometricTransform t;
    t.quarter_turns = static_cast<int>(rng.uniform_int(4));
    t.flip_h = rng.coin();
    t.flip_v = rng.coin();
    return t;
}

// k ~ ratio law over {0..batch_size}; no generator draw when styling is off.
inline int draw_stylization_count(int batch_size, const AugmentationPolicy& policy, Rng& rng) {
    if (batch_size < 0) throw std::invalid_argument("draw_stylization_count: negative batch size");
    if (!policy.style_enabled || batch_size == 0) return 0;
    return static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(batch_size) + 1));
}

struct AugmentedBatch {
    std::vector<Sample> samples;
    std::vector<int> stylized_indices;             // ascending
    std::vector<GeometricTransform> transforms;    // one per sample when geometric on
};

// Per-batch augmentation. Order of effects: the stylized subset is chosen
// and rendered first (images only), then an independent geometric
// transform is applied jointly to each sample's image and mask.
inline AugmentedBatch augment_batch_detailed(const std::vector<Sample>& batch, const AugmentationPolicy& policy,
                                             const Stylizer* stylizer, const StylePrior* prior, Rng& rng) {
    policy.validate();
    if (policy.style_enabled && (!stylizer || !prior))
        throw ConfigError("augment_batch: style augmentation requires a stylizer and a prior");
    AugmentedBatch out;
    out.samples = batch;
    const int n = static_cast<int>(batch.size());

    const int k = draw_stylization_count(n, policy, rng);
    if (k > 0) {
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(k));
        std::sort(idx.begin(), idx.end());
        out.stylized_indices = idx;
        for (int i : idx) {
            Sample& s = out.samples[static_cast<std::size_t>(i)];
            const StyleEmbedding content = predict_style_embedding(*stylizer, s.image);
            const StyleEmbedding style = sample_style_embedding(*prior, rng);
            s.image = stylize_image(*stylizer, s.image, blend_embeddings(content, style, policy.alpha));
        }
    }
    if (policy.geometric_enabled) {
        out.transforms.reserve(static_cast<std::size_t>(n));
        for (auto& s : out.samples) {
            const GeometricTransform t = draw_geometric(rng);
            out.transforms.push_back(t);
            s = apply_geometric(s, t);
        }
    }
    return out;
}

inline std::vector<Sample> augment_batch(const std::vector<Sample>& batch, const AugmentationPolicy& policy,
                                         const Stylizer* stylizer, const StylePrior* prior, Rng& rng) {
    return augment_batch_detailed(batch, policy, stylizer, prior, rng).samples;
}

} // namespace styleseg
