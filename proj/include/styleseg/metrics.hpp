#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleseg/dataset.hpp"
#include "styleseg/image.hpp"
#include "styleseg/rng.hpp"
#include "styleseg/segnet.hpp"
#include "styleseg/tensor.hpp"

namespace styleseg {

// Threshold rule: probability >= threshold is foreground.
inline BinaryMask binarize(const Tensor& probabilities, Real threshold) {
    if (threshold <= 0 || threshold >= 1) throw std::invalid_argument("binarize: threshold must be in (0,1)");
    if (probabilities.rank() != 2) throw std::invalid_argument("binarize: expects an HxW map");
    BinaryMask mask(probabilities.dim(0), probabilities.dim(1));
    for (std::size_t i = 0; i < mask.pixels.size(); ++i)
        mask.pixels[i] = probabilities.data[i] >= threshold ? 1 : 0;
    return mask;
}

// Both metrics treat an empty-vs-empty pair as perfect agreement (1.0).
inline Real iou(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.height != truth.height || pred.width != truth.width)
        throw std::invalid_argument("iou: shape mismatch");
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        inter += pred.pixels[i] & truth.pixels[i];
        uni += pred.pixels[i] | truth.pixels[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<Real>(inter) / static_cast<Real>(uni);
}

inline Real dice(const BinaryMask& pred, const BinaryMask& truth) {
    if (pred.height != truth.height || pred.width != truth.width)
        throw std::invalid_argument("dice: shape mismatch");
    std::int64_t inter = 0, total = 0;
    for (std::size_t i = 0; i < pred.pixels.size(); ++i) {
        inter += pred.pixels[i] & truth.pixels[i];
        total += pred.pixels[i] + truth.pixels[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<Real>(inter) / static_cast<Real>(total);
}

struct InstanceMetrics {
    std::vector<Real> per_image_iou;
    std::vector<Real> per_image_dice;
    Real mean_iou = 0;
    Real mean_dice = 0;
};

struct MetricsReport {
    std::vector<InstanceMetrics> per_instance;
    Real mean_iou = 0, mean_dice = 0;
    Real std_iou = 0, std_dice = 0;
    int n_instances = 0;
    Real threshold = 0.5;
    std::uint64_t seed = 0;
    int empty_empty_pairs = 0; // pairs scored 1.0 by the empty-agreement rule
    // Optional prediction-ensemble read-out: probabilities averaged across
    // instances, then binarized once.
    bool ensemble_mode = false;
    Real ensemble_iou = 0, ensemble_dice = 0;
};

inline void to_json(nlohmann::json& j, const InstanceMetrics& m) {
    j = {{"per_image_iou", m.per_image_iou},
         {"per_image_dice", m.per_image_dice},
         {"mean_iou", m.mean_iou},
         {"mean_dice", m.mean_dice}};
}

inline void from_json(const nlohmann::json& j, InstanceMetrics& m) {
    j.at("per_image_iou").get_to(m.per_image_iou);
    j.at("per_image_dice").get_to(m.per_image_dice);
    j.at("mean_iou").get_to(m.mean_iou);
    j.at("mean_dice").get_to(m.mean_dice);
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = {{"per_instance", r.per_instance},
         {"mean_iou", r.mean_iou},
         {"mean_dice", r.mean_dice},
         {"std_iou", r.std_iou},
         {"std_dice", r.std_dice},
         {"n_instances", r.n_instances},
         {"threshold", r.threshold},
         {"seed", r.seed},
         {"empty_empty_pairs", r.empty_empty_pairs},
         {"ensemble_mode", r.ensemble_mode},
         {"ensemble_iou", r.ensemble_iou},
         {"ensemble_dice", r.ensemble_dice}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
    j.at("per_instance").get_to(r.per_instance);
    j.at("mean_iou").get_to(r.mean_iou);
    j.at("mean_dice").get_to(r.mean_dice);
    j.at("std_iou").get_to(r.std_iou);
    j.at("std_dice").get_to(r.std_dice);
    j.at("n_instances").get_to(r.n_instances);
    j.at("threshold").get_to(r.threshold);
    r.seed = j.value("seed", std::uint64_t(0));
    r.empty_empty_pairs = j.value("empty_empty_pairs", 0);
    r.ensemble_mode = j.value("ensemble_mode", false);
    r.ensemble_iou = j.value("ensemble_iou", 0.0);
    r.ensemble_dice = j.value("ensemble_dice", 0.0);
}

namespace metrics_detail {

inline Tensor probability_map(const Tensor& logits, int n) {
    Tensor p({logits.dim(2), logits.dim(3)});
    const int S = logits.dim(2) * logits.dim(3);
    const Real* src = &logits.data[static_cast<std::size_t>(n) * S];
    for (int i = 0; i < S; ++i) p.data[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-src[i]));
    return p;
}

} // namespace metrics_detail

// Metrics averaged across stochastic network instances: each instance is a
// full forward pass of the test set with dropout active under its own
// derived seed; per-image metrics are averaged per instance, then mean and
// (population) standard deviation are taken across instances.
inline MetricsReport mc_dropout_evaluate(const Model& model, const Dataset& test, int n_instances,
                                         Real threshold, std::uint64_t seed,
                                         bool ensemble_mode = false,
                                         std::vector<BinaryMask>* out_first_instance_masks = nullptr) {
    if (test.empty()) throw std::invalid_argument("mc_dropout_evaluate: empty test set");
    if (n_instances < 1) throw std::invalid_argument("mc_dropout_evaluate: n_instances must be >= 1");

    MetricsReport report;
    report.n_instances = n_instances;
    report.threshold = threshold;
    report.seed = seed;
    report.ensemble_mode = ensemble_mode;

    const int n_images = static_cast<int>(test.size());
    std::vector<Tensor> prob_sums;
    if (ensemble_mode) prob_sums.resize(static_cast<std::size_t>(n_images));

    Rng base(seed);
    for (int inst = 0; inst < n_instances; ++inst) {
        Rng rng = base.derive(static_cast<std::uint64_t>(inst + 1));
        InstanceMetrics im;
        for (int i = 0; i < n_images; ++i) {
            const Sample& s = test.samples[static_cast<std::size_t>(i)];
            Tensor x = image_to_tensor(s.image);
            Tensor logits = model.forward(x, ForwardMode::McDropout, rng);
            Tensor p = metrics_detail::probability_map(logits, 0);
            if (ensemble_mode) {
                auto& acc = prob_sums[static_cast<std::size_t>(i)];
                if (acc.data.empty())
                    acc = p;
                else
                    for (std::size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += p.data[k];
            }
            BinaryMask pred = binarize(p, threshold);
            if (inst == 0 && out_first_instance_masks) out_first_instance_masks->push_back(pred);
            if (pred.popcount() == 0 && s.mask.popcount() == 0) ++report.empty_empty_pairs;
            im.per_image_iou.push_back(iou(pred, s.mask));
            im.per_image_dice.push_back(dice(pred, s.mask));
        }
        for (Real v : im.per_image_iou) im.mean_iou += v;
        for (Real v : im.per_image_dice) im.mean_dice += v;
        im.mean_iou /= static_cast<Real>(n_images);
        im.mean_dice /= static_cast<Real>(n_images);
        report.per_instance.push_back(std::move(im));
    }

    for (const auto& im : report.per_instance) {
        report.mean_iou += im.mean_iou;
        report.mean_dice += im.mean_dice;
    }
    report.mean_iou /= static_cast<Real>(n_instances);
    report.mean_dice /= static_cast<Real>(n_instances);
    // identical instances (e.g. dropout 0) must report exactly zero spread,
    // which naive accumulation around the rounded mean does not guarantee
    bool all_equal = true;
    for (const auto& im : report.per_instance)
        if (im.mean_iou != report.per_instance[0].mean_iou || im.mean_dice != report.per_instance[0].mean_dice)
            all_equal = false;
    if (!all_equal) {
        for (const auto& im : report.per_instance) {
            report.std_iou += (im.mean_iou - report.mean_iou) * (im.mean_iou - report.mean_iou);
            report.std_dice += (im.mean_dice - report.mean_dice) * (im.mean_dice - report.mean_dice);
        }
        report.std_iou = std::sqrt(report.std_iou / static_cast<Real>(n_instances));
        report.std_dice = std::sqrt(report.std_dice / static_cast<Real>(n_instances));
    }

    if (ensemble_mode) {
        for (int i = 0; i < n_images; ++i) {
            auto& acc = prob_sums[static_cast<std::size_t>(i)];
            for (auto& v : acc.data) v /= static_cast<Real>(n_instances);
            BinaryMask pred = binarize(acc, threshold);
            report.ensemble_iou += iou(pred, test.samples[static_cast<std::size_t>(i)].mask);
            report.ensemble_dice += dice(pred, test.samples[static_cast<std::size_t>(i)].mask);
        }
        report.ensemble_iou /= static_cast<Real>(n_images);
        report.ensemble_dice /= static_cast<Real>(n_images);
    }
    return report;
}

} // namespace styleseg
