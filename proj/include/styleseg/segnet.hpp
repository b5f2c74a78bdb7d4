#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleseg/autograd.hpp"
#include "styleseg/container.hpp"
#include "styleseg/nn.hpp"
#include "styleseg/rng.hpp"
#include "styleseg/tensor.hpp"

namespace styleseg {

enum class ForwardMode { Train, Eval, McDropout };

// Compact U-shaped net: three convolutional stages, then token-MLP stages
// in the latent space, mirrored decoder with additive skips, dropout in
// every stage. Downsampling happens 4 times (3 maxpools + 1 strided patch
// embedding); the deepest stage widens channels at constant resolution.
struct SegNetConfig {
    std::array<int, 5> stage_channels{32, 64, 128, 160, 256};
    int mlp_stages = 2;
    Real dropout_rate = 0.10;
    int input_channels = 3;
    int output_channels = 1;
    int mlp_ratio = 2;
    bool shifted_tokens = false;
    std::uint64_t seed = 0;

    static SegNetConfig full(std::uint64_t seed = 0) {
        SegNetConfig c;
        c.stage_channels = {32, 64, 128, 160, 256};
        c.seed = seed;
        return c;
    }

    static SegNetConfig tiny(std::uint64_t seed = 0) {
        SegNetConfig c;
        c.stage_channels = {8, 16, 32, 48, 64};
        c.seed = seed;
        return c;
    }

    void validate() const {
        for (int ch : stage_channels)
            if (ch <= 0) throw std::invalid_argument("SegNetConfig: stage_channels must be positive");
        if (dropout_rate < 0 || dropout_rate >= 1) throw std::invalid_argument("SegNetConfig: dropout_rate must be in [0,1)");
        if (input_channels != 3 || output_channels != 1)
            throw std::invalid_argument("SegNetConfig: only 3-channel input / 1-channel output supported");
        if (mlp_stages != 2) throw std::invalid_argument("SegNetConfig: mlp_stages must be 2");
        if (mlp_ratio < 1) throw std::invalid_argument("SegNetConfig: mlp_ratio must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const SegNetConfig& c) {
    j = {{"stage_channels", c.stage_channels},
         {"mlp_stages", c.mlp_stages},
         {"dropout_rate", c.dropout_rate},
         {"input_channels", c.input_channels},
         {"output_channels", c.output_channels},
         {"mlp_ratio", c.mlp_ratio},
         {"shifted_tokens", c.shifted_tokens},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SegNetConfig& c) {
    j.at("stage_channels").get_to(c.stage_channels);
    c.mlp_stages = j.value("mlp_stages", 2);
    c.dropout_rate = j.value("dropout_rate", 0.10);
    c.input_channels = j.value("input_channels", 3);
    c.output_channels = j.value("output_channels", 1);
    c.mlp_ratio = j.value("mlp_ratio", 2);
    c.shifted_tokens = j.value("shifted_tokens", false);
    c.seed = j.value("seed", std::uint64_t(0));
}

namespace segnet_detail {

struct ConvStage {
    nn::Conv2d conv;
    nn::InstanceNorm norm;

    static ConvStage make(nn::ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, Rng& rng) {
        ConvStage s;
        s.conv = nn::Conv2d::make(ps, prefix + ".conv", in_ch, out_ch, 3, 1, rng);
        s.norm = nn::InstanceNorm::make(ps, prefix + ".norm", out_ch);
        return s;
    }

    ag::Var operator()(const ag::Var& x, Real drop, bool stochastic, Rng& rng) const {
        auto h = ag::relu(norm(conv(x)));
        return stochastic ? ag::dropout(h, drop, rng) : h;
    }
};

struct TokenMlpBlock {
    nn::LayerNorm norm;
    nn::Linear fc1, fc2;
    int channels = 0;
    bool shifted = false;

    static TokenMlpBlock make(nn::ParamStore& ps, const std::string& prefix, int ch, int ratio, bool shifted, Rng& rng) {
        TokenMlpBlock b;
        b.channels = ch;
        b.shifted = shifted;
        b.norm = nn::LayerNorm::make(ps, prefix + ".norm", ch);
        b.fc1 = nn::Linear::make(ps, prefix + ".fc1", ch, ch * ratio, rng);
        b.fc2 = nn::Linear::make(ps, prefix + ".fc2", ch * ratio, ch, rng);
        return b;
    }

    static std::vector<std::pair<int, int>> shift_pattern(int ch, bool horizontal) {
        std::vector<std::pair<int, int>> shifts(static_cast<std::size_t>(ch));
        for (int c = 0; c < ch; ++c) {
            const int s = c % 5 - 2;
            shifts[static_cast<std::size_t>(c)] = horizontal ? std::make_pair(0, s) : std::make_pair(s, 0);
        }
        return shifts;
    }

    ag::Var operator()(const ag::Var& x, Real drop, bool stochastic, Rng& rng) const {
        auto t = norm(x);
        if (shifted) t = ag::spatial_shift(t, shift_pattern(channels, /*horizontal=*/true));
        auto h = ag::gelu(fc1.tokens(t));
        if (stochastic) h = ag::dropout(h, drop, rng);
        if (shifted) h = ag::spatial_shift(h, shift_pattern(h.value().dim(1), /*horizontal=*/false));
        h = fc2.tokens(h);
        if (stochastic) h = ag::dropout(h, drop, rng);
        return ag::add(x, h);
    }
};

} // namespace segnet_detail

class Model {
public:
    explicit Model(const SegNetConfig& config) : config_(config) {
        config.validate();
        Rng rng(Rng::mix(config.seed, 0x5e67'ee71'c0de'0001ULL));
        const auto& c = config.stage_channels;
        enc1_ = segnet_detail::ConvStage::make(ps_, "enc1", config.input_channels, c[0], rng);
        enc2_ = segnet_detail::ConvStage::make(ps_, "enc2", c[0], c[1], rng);
        enc3_ = segnet_detail::ConvStage::make(ps_, "enc3", c[1], c[2], rng);
        patch4_ = nn::Conv2d::make(ps_, "patch4", c[2], c[3], 3, 2, rng);
        patch4_norm_ = nn::LayerNorm::make(ps_, "patch4.norm", c[3]);
        tok4_ = segnet_detail::TokenMlpBlock::make(ps_, "tok4", c[3], config.mlp_ratio, config.shifted_tokens, rng);
        patch5_ = nn::Conv2d::make(ps_, "patch5", c[3], c[4], 3, 1, rng);
        patch5_norm_ = nn::LayerNorm::make(ps_, "patch5.norm", c[4]);
        tok5_ = segnet_detail::TokenMlpBlock::make(ps_, "tok5", c[4], config.mlp_ratio, config.shifted_tokens, rng);
        dec4_conv_ = nn::Conv2d::make(ps_, "dec4.conv", c[4], c[3], 3, 1, rng);
        dec4_tok_ = segnet_detail::TokenMlpBlock::make(ps_, "dec4.tok", c[3], config.mlp_ratio, config.shifted_tokens, rng);
        dec3_ = segnet_detail::ConvStage::make(ps_, "dec3", c[3], c[2], rng);
        dec2_ = segnet_detail::ConvStage::make(ps_, "dec2", c[2], c[1], rng);
        dec1_ = segnet_detail::ConvStage::make(ps_, "dec1", c[1], c[0], rng);
        head_ = nn::Conv2d::make(ps_, "head", c[0], config.output_channels, 1, 1, rng);
    }

    static constexpr int kDownsamplings = 4;
    static constexpr int kSizeMultiple = 16; // 2^kDownsamplings

    const SegNetConfig& config() const { return config_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    ag::Var forward_var(const ag::Var& x, ForwardMode mode, Rng& rng) const {
        const Tensor& xv = x.value();
        if (xv.rank() != 4 || xv.dim(1) != config_.input_channels)
            throw std::invalid_argument("forward: expects NxCxHxW input with C=" + std::to_string(config_.input_channels));
        if (xv.dim(2) % kSizeMultiple || xv.dim(3) % kSizeMultiple)
            throw std::invalid_argument("forward: H and W must be multiples of " + std::to_string(kSizeMultiple));
        const bool stochastic = (mode != ForwardMode::Eval) && config_.dropout_rate > 0;
        const Real dr = config_.dropout_rate;

        auto e1 = ag::maxpool2(enc1_(x, dr, stochastic, rng));                  // H/2, c0
        auto e2 = ag::maxpool2(enc2_(e1, dr, stochastic, rng));                 // H/4, c1
        auto e3 = ag::maxpool2(enc3_(e2, dr, stochastic, rng));                 // H/8, c2
        auto e4 = tok4_(patch4_norm_(patch4_(e3)), dr, stochastic, rng);        // H/16, c3
        auto e5 = tok5_(patch5_norm_(patch5_(e4)), dr, stochastic, rng);        // H/16, c4

        auto d4 = dec4_tok_(dec4_conv_(e5), dr, stochastic, rng);               // H/16, c3
        d4 = ag::add(d4, e4);
        auto d3 = dec3_(ag::upsample_nearest2(d4), dr, stochastic, rng);        // H/8, c2
        d3 = ag::add(d3, e3);
        auto d2 = dec2_(ag::upsample_nearest2(d3), dr, stochastic, rng);        // H/4, c1
        d2 = ag::add(d2, e2);
        auto d1 = dec1_(ag::upsample_nearest2(d2), dr, stochastic, rng);        // H/2, c0
        d1 = ag::add(d1, e1);
        return head_(ag::upsample_nearest2(d1));                                // H, 1
    }

    // Inference entry point; no graph is recorded.
    Tensor forward(const Tensor& images, ForwardMode mode, Rng& rng) const {
        ag::NoGradGuard guard;
        return forward_var(ag::Var::leaf(images), mode, rng).value();
    }

private:
    SegNetConfig config_;
    nn::ParamStore ps_;
    segnet_detail::ConvStage enc1_, enc2_, enc3_, dec3_, dec2_, dec1_;
    nn::Conv2d patch4_, patch5_, dec4_conv_, head_;
    nn::LayerNorm patch4_norm_, patch5_norm_;
    segnet_detail::TokenMlpBlock tok4_, tok5_, dec4_tok_;
};

inline Model build_model(const SegNetConfig& config) { return Model(config); }

inline std::int64_t count_parameters(const Model& model) { return model.params().total_elements(); }

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

struct Checkpoint {
    SegNetConfig config;
    int epoch = 0;
    Real best_val_iou = 0;
};

inline void save_checkpoint(const Model& model, const std::string& path, int epoch, Real best_val_iou) {
    TensorContainer c;
    c.kind = "segnet-checkpoint";
    c.meta["config"] = model.config();
    c.meta["epoch"] = epoch;
    c.meta["best_val_iou"] = best_val_iou;
    c.meta["param_count"] = count_parameters(model);
    store_params(c, model.params());
    c.save(path);
}

inline std::pair<std::unique_ptr<Model>, Checkpoint> load_checkpoint(const std::string& path) {
    TensorContainer c = TensorContainer::load(path);
    if (c.kind != "segnet-checkpoint") throw DataError("not a segnet checkpoint: " + path);
    Checkpoint info;
    info.config = c.meta.at("config").get<SegNetConfig>();
    info.epoch = c.meta.value("epoch", 0);
    info.best_val_iou = c.meta.value("best_val_iou", 0.0);
    auto model = std::make_unique<Model>(info.config);
    restore_params(c, model->params());
    return {std::move(model), info};
}

} // namespace styleseg
