#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleseg/augment.hpp"
#include "styleseg/dataset.hpp"
#include "styleseg/errors.hpp"
#include "styleseg/metrics.hpp"
#include "styleseg/segnet.hpp"
#include "styleseg/stylizer.hpp"

namespace styleseg {

struct LossWeights {
    Real bce = 0.5;
    Real dice = 1.0;
};

struct TrainConfig {
    int batch_size = 4;
    int epochs = 2000;
    Real learning_rate = 1e-4;
    LossWeights loss_weights;
    AugmentationPolicy policy;
    std::uint64_t seed = 0;
    int val_every = 1;
    std::string run_dir;

    void validate() const {
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
        if (val_every < 1) throw ConfigError("TrainConfig: val_every must be >= 1");
        if (run_dir.empty()) throw ConfigError("TrainConfig: run_dir is required");
        policy.validate();
    }
};

inline void to_json(nlohmann::json& j, const AugmentationPolicy& p) {
    j = {{"geometric_enabled", p.geometric_enabled},
         {"style_enabled", p.style_enabled},
         {"alpha", p.alpha},
         {"ratio_law", "uniform-count"}};
}

inline void from_json(const nlohmann::json& j, AugmentationPolicy& p) {
    p.geometric_enabled = j.value("geometric_enabled", true);
    p.style_enabled = j.value("style_enabled", false);
    p.alpha = j.value("alpha", 0.5);
    const std::string law = j.value("ratio_law", "uniform-count");
    if (law != "uniform-count") throw ConfigError("unknown ratio_law: " + law);
    p.ratio_law = RatioLaw::UniformCount;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"optimizer", {{"kind", "adaptive-moment"}, {"learning_rate", c.learning_rate}}},
         {"loss_weights", {{"bce", c.loss_weights.bce}, {"dice", c.loss_weights.dice}}},
         {"policy", c.policy},
         {"seed", c.seed},
         {"val_every", c.val_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.batch_size = j.value("batch_size", 4);
    c.epochs = j.value("epochs", 2000);
    if (j.contains("optimizer")) {
        const auto& opt = j.at("optimizer");
        const std::string kind = opt.value("kind", "adaptive-moment");
        if (kind != "adaptive-moment") throw ConfigError("unknown optimizer kind: " + kind);
        c.learning_rate = opt.value("learning_rate", 1e-4);
    }
    if (j.contains("loss_weights")) {
        c.loss_weights.bce = j.at("loss_weights").value("bce", 0.5);
        c.loss_weights.dice = j.at("loss_weights").value("dice", 1.0);
    }
    if (j.contains("policy")) j.at("policy").get_to(c.policy);
    c.seed = j.value("seed", std::uint64_t(0));
    c.val_every = j.value("val_every", 1);
}

struct EpochRecord {
    int epoch = 0;
    Real train_loss = 0;
    Real val_loss = 0;
    Real val_iou = 0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    Real best_val_iou = 0;
    std::string checkpoint_path;
    std::uint64_t init_param_hash = 0;
};

inline Real compute_loss(const Tensor& logits, const Tensor& masks, const LossWeights& weights) {
    ag::NoGradGuard guard;
    return ag::bce_dice_loss(ag::Var::leaf(logits), masks, weights.bce, weights.dice).value().data[0];
}

// Deterministic eval-mode pass: per-image loss and IoU at threshold 0.5,
// averaged over the validation set.
inline std::pair<Real, Real> validation_pass(const Model& model, const Dataset& val,
                                             const LossWeights& weights = LossWeights{}) {
    if (val.empty()) throw std::invalid_argument("validation_pass: empty validation set");
    Rng unused(0);
    Real loss_sum = 0, iou_sum = 0;
    for (const auto& s : val.samples) {
        Tensor x = image_to_tensor(s.image);
        Tensor logits = model.forward(x, ForwardMode::Eval, unused);
        Tensor mask_t = masks_to_tensor({&s.mask});
        loss_sum += compute_loss(logits, mask_t, weights);
        Tensor p = metrics_detail::probability_map(logits, 0);
        iou_sum += iou(binarize(p, 0.5), s.mask);
    }
    const Real n = static_cast<Real>(val.size());
    return {loss_sum / n, iou_sum / n};
}

namespace trainer_detail {

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << "epoch,train_loss,val_loss,val_iou\n";
    char line[160];
    for (const auto& r : history) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.val_iou);
        out << line;
    }
}

inline std::vector<EpochRecord> read_history_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open history file " + path);
    std::string header;
    if (!std::getline(in, header) || header.rfind("epoch,", 0) != 0)
        throw DataError("malformed history CSV (bad header): " + path);
    std::vector<EpochRecord> records;
    std::string line;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        EpochRecord r;
        if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &r.epoch, &r.train_loss, &r.val_loss, &r.val_iou) != 4)
            throw DataError("malformed history CSV at line " + std::to_string(lineno) + ": " + path);
        records.push_back(r);
    }
    if (records.empty()) throw DataError("history CSV has no rows: " + path);
    return records;
}

} // namespace trainer_detail

// Seeded training loop: shuffle, batch, augment, forward, loss, Adam step;
// periodic validation; checkpoint overwritten whenever validation IoU
// strictly improves. Single-threaded and bitwise reproducible per seed.
inline TrainResult train(Model& model, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& config, const Stylizer* stylizer = nullptr,
                         const StylePrior* prior = nullptr) {
    config.validate();
    if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: needs nonempty train and val sets");
    if (config.policy.style_enabled && (!stylizer || !prior))
        throw ConfigError("train: style augmentation enabled but stylizer/prior missing");

    namespace fs = std::filesystem;
    fs::create_directories(config.run_dir);
    const std::string ckpt_path = (fs::path(config.run_dir) / "best.ckpt").string();

    TrainResult result;
    result.init_param_hash = model.params().content_hash();
    result.checkpoint_path = ckpt_path;

    {
        nlohmann::json echo;
        echo["schema"] = 1;
        echo["train_config"] = config;
        echo["model_config"] = model.config();
        echo["init_param_hash"] = result.init_param_hash;
        auto ids = nlohmann::json::array();
        for (const auto& s : train_set.samples) ids.push_back(s.id);
        echo["train_ids"] = ids;
        ids = nlohmann::json::array();
        for (const auto& s : val_set.samples) ids.push_back(s.id);
        echo["val_ids"] = ids;
        std::ofstream out(fs::path(config.run_dir) / "config.json");
        out << echo.dump(2) << "\n";
    }

    nn::AdamOptimizer opt(model.params(), config.learning_rate);
    Rng rng(Rng::mix(config.seed, 0x7a41'4e50'0000'0003ULL));
    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    Real best_iou = -1.0;
    Real last_val_loss = 0, last_val_iou = 0;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(order);
        Real loss_sum = 0;
        int n_seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            std::vector<Sample> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(train_set.samples[static_cast<std::size_t>(order[i])]);
            auto augmented = augment_batch(batch, config.policy, stylizer, prior, rng);

            std::vector<const Image*> images;
            std::vector<const BinaryMask*> masks;
            for (const auto& s : augmented) {
                images.push_back(&s.image);
                masks.push_back(&s.mask);
            }
            auto x = ag::Var::leaf(images_to_tensor(images));
            Tensor mask_t = masks_to_tensor(masks);
            auto logits = model.forward_var(x, ForwardMode::Train, rng);
            auto loss = ag::bce_dice_loss(logits, mask_t, config.loss_weights.bce, config.loss_weights.dice);
            const Real loss_value = loss.value().data[0];
            if (!std::isfinite(loss_value)) throw TrainingDivergence(epoch);
            opt.zero_grad();
            ag::backward(loss);
            opt.step();
            loss_sum += loss_value * static_cast<Real>(end - start);
            n_seen += static_cast<int>(end - start);
        }

        EpochRecord record;
        record.epoch = epoch;
        record.train_loss = loss_sum / static_cast<Real>(n_seen);
        if (!std::isfinite(record.train_loss)) throw TrainingDivergence(epoch);
        if ((epoch - 1) % config.val_every == 0 || epoch == config.epochs) {
            auto [vl, vi] = validation_pass(model, val_set, config.loss_weights);
            if (!std::isfinite(vl)) throw TrainingDivergence(epoch);
            last_val_loss = vl;
            last_val_iou = vi;
            if (vi > best_iou) {
                best_iou = vi;
                result.best_epoch = epoch;
                save_checkpoint(model, ckpt_path, epoch, vi);
            }
        }
        record.val_loss = last_val_loss;
        record.val_iou = last_val_iou;
        result.history.push_back(record);
    }
    result.best_val_iou = best_iou;
    trainer_detail::write_history_csv((fs::path(config.run_dir) / "history.csv").string(), result.history);
    return result;
}

} // namespace styleseg
