#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleseg/autograd.hpp"
#include "styleseg/container.hpp"
#include "styleseg/errors.hpp"
#include "styleseg/image.hpp"
#include "styleseg/nn.hpp"
#include "styleseg/rng.hpp"

namespace styleseg {

struct StyleEmbedding {
    std::vector<Real> values;

    int dim() const { return static_cast<int>(values.size()); }
};

// Gaussian prior over style embeddings. The Cholesky factor is computed on
// construction, which doubles as the PSD validation; zero pivots (singular
// directions) are allowed.
class StylePrior {
public:
    StylePrior(std::vector<Real> mean, std::vector<Real> covariance)
        : dim_(static_cast<int>(mean.size())), mean_(std::move(mean)), cov_(std::move(covariance)) {
        if (cov_.size() != static_cast<std::size_t>(dim_) * dim_)
            throw ConfigError("StylePrior: covariance must be dim x dim");
        Real scale = 1.0;
        for (int i = 0; i < dim_; ++i) scale = std::max(scale, std::abs(cov_[idx(i, i)]));
        const Real tol = 1e-9 * scale;
        for (int i = 0; i < dim_; ++i)
            for (int j = i + 1; j < dim_; ++j)
                if (std::abs(cov_[idx(i, j)] - cov_[idx(j, i)]) > tol)
                    throw ConfigError("StylePrior: covariance is not symmetric");
        chol_.assign(cov_.size(), 0.0);
        for (int j = 0; j < dim_; ++j) {
            Real d = cov_[idx(j, j)];
            for (int k = 0; k < j; ++k) d -= chol_[idx(j, k)] * chol_[idx(j, k)];
            if (d < -tol) throw ConfigError("StylePrior: covariance is not positive semi-definite");
            if (d <= tol) {
                // singular direction: zero column
                continue;
            }
            const Real root = std::sqrt(d);
            chol_[idx(j, j)] = root;
            for (int i = j + 1; i < dim_; ++i) {
                Real s = cov_[idx(i, j)];
                for (int k = 0; k < j; ++k) s -= chol_[idx(i, k)] * chol_[idx(j, k)];
                chol_[idx(i, j)] = s / root;
            }
        }
    }

    int dim() const { return dim_; }
    const std::vector<Real>& mean() const { return mean_; }
    const std::vector<Real>& covariance() const { return cov_; }

    StyleEmbedding sample(Rng& rng) const {
        std::vector<Real> u(static_cast<std::size_t>(dim_));
        for (auto& v : u) v = rng.normal();
        StyleEmbedding z;
        z.values = mean_;
        for (int i = 0; i < dim_; ++i) {
            Real acc = 0;
            for (int k = 0; k <= i; ++k) acc += chol_[idx(i, k)] * u[static_cast<std::size_t>(k)];
            z.values[static_cast<std::size_t>(i)] += acc;
        }
        return z;
    }

    void save_json(const std::string& path) const {
        nlohmann::json j;
        j["dim"] = dim_;
        j["mean"] = mean_;
        auto rows = nlohmann::json::array();
        for (int i = 0; i < dim_; ++i)
            rows.push_back(std::vector<Real>(cov_.begin() + static_cast<std::ptrdiff_t>(i) * dim_,
                                             cov_.begin() + static_cast<std::ptrdiff_t>(i + 1) * dim_));
        j["covariance"] = rows;
        std::ofstream out(path);
        if (!out) throw DataError("cannot write prior file " + path);
        out << j.dump(2) << "\n";
    }

    static StylePrior load_json(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open prior file " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad prior JSON in " + path + ": " + e.what());
        }
        const int d = j.at("dim").get<int>();
        auto mean = j.at("mean").get<std::vector<Real>>();
        if (static_cast<int>(mean.size()) != d) throw ConfigError("prior mean length != dim in " + path);
        std::vector<Real> cov;
        cov.reserve(static_cast<std::size_t>(d) * d);
        const auto& rows = j.at("covariance");
        if (static_cast<int>(rows.size()) != d) throw ConfigError("prior covariance must be dim x dim in " + path);
        for (const auto& row : rows) {
            auto r = row.get<std::vector<Real>>();
            if (static_cast<int>(r.size()) != d) throw ConfigError("prior covariance must be dim x dim in " + path);
            cov.insert(cov.end(), r.begin(), r.end());
        }
        return StylePrior(std::move(mean), std::move(cov));
    }

private:
    std::size_t idx(int i, int j) const { return static_cast<std::size_t>(i) * dim_ + j; }

    int dim_;
    std::vector<Real> mean_, cov_, chol_;
};

inline StyleEmbedding sample_style_embedding(const StylePrior& prior, Rng& rng) { return prior.sample(rng); }

inline StyleEmbedding blend_embeddings(const StyleEmbedding& content, const StyleEmbedding& style, Real alpha) {
    if (content.dim() != style.dim()) throw std::invalid_argument("blend_embeddings: dimension mismatch");
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("blend_embeddings: alpha must be in [0,1]");
    StyleEmbedding out;
    out.values.resize(content.values.size());
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = alpha * style.values[i] + (1 - alpha) * content.values[i];
    return out;
}

// ---------------------------------------------------------------------------
// Stylizer: predictor (image -> embedding) + renderer (image + embedding ->
// image) with conditional instance normalization. The renderer is fully
// stride-1 so any input size >= 8 round-trips at identical shape.
// ---------------------------------------------------------------------------

struct StylizerConfig {
    int embedding_dim = 100;
    int predictor_channels = 16;
    int renderer_channels = 16;
    std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const StylizerConfig& c) {
    j = {{"embedding_dim", c.embedding_dim},
         {"predictor_channels", c.predictor_channels},
         {"renderer_channels", c.renderer_channels},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, StylizerConfig& c) {
    c.embedding_dim = j.value("embedding_dim", 100);
    c.predictor_channels = j.value("predictor_channels", 16);
    c.renderer_channels = j.value("renderer_channels", 16);
    c.seed = j.value("seed", std::uint64_t(0));
}

class Stylizer {
public:
    static constexpr int kMinSize = 8;

    explicit Stylizer(const StylizerConfig& cfg) : cfg_(cfg) {
        if (cfg.embedding_dim < 1) throw ConfigError("Stylizer: embedding_dim must be >= 1");
        Rng rng(Rng::mix(cfg.seed, 0x57a1'11ce'0000'0001ULL));
        const int p = cfg.predictor_channels;
        const int r = cfg.renderer_channels;
        const int d = cfg.embedding_dim;
        pred1_ = nn::Conv2d::make(ps_, "pred1", 3, p, 3, 2, rng);
        pred2_ = nn::Conv2d::make(ps_, "pred2", p, 2 * p, 3, 2, rng);
        pred3_ = nn::Conv2d::make(ps_, "pred3", 2 * p, 2 * p, 3, 2, rng);
        pred_head_ = nn::Linear::make(ps_, "pred_head", 2 * p, d, rng);
        rend1_ = nn::Conv2d::make(ps_, "rend1", 3, r, 3, 1, rng);
        rend2_ = nn::Conv2d::make(ps_, "rend2", r, r, 3, 1, rng);
        rend3_ = nn::Conv2d::make(ps_, "rend3", r, 3, 3, 1, rng);
        cin1_gain_ = zero_linear("cin1_gain", d, r);
        cin1_bias_ = zero_linear("cin1_bias", d, r);
        cin2_gain_ = zero_linear("cin2_gain", d, r);
        cin2_bias_ = zero_linear("cin2_bias", d, r);
    }

    const StylizerConfig& config() const { return cfg_; }
    int embedding_dim() const { return cfg_.embedding_dim; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    ag::Var predict_var(const ag::Var& x) const {
        auto h = ag::relu(pred1_(x));
        h = ag::relu(pred2_(h));
        h = ag::relu(pred3_(h));
        return pred_head_(ag::global_avg_pool(h));
    }

    ag::Var render_var(const ag::Var& x, const ag::Var& z) const {
        auto h = ag::relu(ag::cond_instance_norm(rend1_(x), cin1_gain_(z), cin1_bias_(z)));
        h = ag::relu(ag::cond_instance_norm(rend2_(h), cin2_gain_(z), cin2_bias_(z)));
        return ag::sigmoid(rend3_(h));
    }

private:
    nn::Linear zero_linear(const std::string& name, int in_dim, int out_dim) {
        nn::Linear l;
        l.w = ps_.add(name + ".w", nn::constant_init({out_dim, in_dim}, 0));
        l.b = ps_.add(name + ".b", nn::constant_init({out_dim}, 0));
        return l;
    }

    StylizerConfig cfg_;
    nn::ParamStore ps_;
    nn::Conv2d pred1_, pred2_, pred3_, rend1_, rend2_, rend3_;
    nn::Linear pred_head_, cin1_gain_, cin1_bias_, cin2_gain_, cin2_bias_;
};

inline StyleEmbedding predict_style_embedding(const Stylizer& stylizer, const Image& image) {
    if (image.height < Stylizer::kMinSize || image.width < Stylizer::kMinSize)
        throw std::invalid_argument("predict_style_embedding: image must be at least 8x8");
    ag::NoGradGuard guard;
    auto e = stylizer.predict_var(ag::Var::leaf(image_to_tensor(image)));
    StyleEmbedding z;
    z.values = e.value().data;
    return z;
}

inline Image stylize_image(const Stylizer& stylizer, const Image& image, const StyleEmbedding& embedding) {
    if (embedding.dim() != stylizer.embedding_dim())
        throw std::invalid_argument("stylize_image: embedding dimension mismatch");
    if (image.height < Stylizer::kMinSize || image.width < Stylizer::kMinSize)
        throw std::invalid_argument("stylize_image: image must be at least 8x8");
    ag::NoGradGuard guard;
    Tensor zt({1, embedding.dim()}, embedding.values);
    auto out = stylizer.render_var(ag::Var::leaf(image_to_tensor(image)), ag::Var::leaf(zt));
    return tensor_to_image(out.value());
}

// ---------------------------------------------------------------------------
// Calibration: joint self-reconstruction training of predictor + renderer.
// ---------------------------------------------------------------------------

struct CalibrationConfig {
    int steps = 400;
    int batch = 4;
    Real learning_rate = 1e-3;
    std::uint64_t seed = 0;
    StylizerConfig stylizer;
};

struct CalibrationResult {
    std::unique_ptr<Stylizer> stylizer;
    std::vector<Real> loss_history;
};

inline CalibrationResult calibrate_stylizer(const std::vector<Image>& images, const CalibrationConfig& config) {
    if (images.empty()) throw std::invalid_argument("calibrate_stylizer: needs at least one image");
    StylizerConfig scfg = config.stylizer;
    scfg.seed = config.seed;
    CalibrationResult result;
    result.stylizer = std::make_unique<Stylizer>(scfg);
    if (config.steps == 0) return result;

    nn::AdamOptimizer opt(result.stylizer->params(), config.learning_rate);
    Rng rng(Rng::mix(config.seed, 0xca11'b4a7'0000'0002ULL));
    std::vector<int> order(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t cursor = order.size();

    for (int step = 0; step < config.steps; ++step) {
        std::vector<const Image*> batch;
        for (int k = 0; k < config.batch; ++k) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(&images[static_cast<std::size_t>(order[cursor++])]);
        }
        Tensor x = images_to_tensor(batch);
        auto xv = ag::Var::leaf(x);
        auto z = result.stylizer->predict_var(xv);
        auto recon = result.stylizer->render_var(xv, z);
        auto loss = ag::mse_loss(recon, x);
        opt.zero_grad();
        ag::backward(loss);
        opt.step();
        result.loss_history.push_back(loss.value().data[0]);
    }
    return result;
}

// Default prior: empirical embedding distribution over the given images
// with covariance inflated to reach styles outside the training spread.
inline StylePrior fit_style_prior(const Stylizer& stylizer, const std::vector<Image>& images,
                                  Real inflation = 4.0) {
    if (images.empty()) throw std::invalid_argument("fit_style_prior: needs at least one image");
    const int d = stylizer.embedding_dim();
    std::vector<std::vector<Real>> embs;
    embs.reserve(images.size());
    for (const auto& img : images) embs.push_back(predict_style_embedding(stylizer, img).values);
    std::vector<Real> mean(static_cast<std::size_t>(d), 0.0);
    for (const auto& e : embs)
        for (int i = 0; i < d; ++i) mean[static_cast<std::size_t>(i)] += e[static_cast<std::size_t>(i)];
    for (auto& v : mean) v /= static_cast<Real>(embs.size());
    std::vector<Real> cov(static_cast<std::size_t>(d) * d, 0.0);
    for (const auto& e : embs)
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                cov[static_cast<std::size_t>(i) * d + j] +=
                    (e[static_cast<std::size_t>(i)] - mean[static_cast<std::size_t>(i)]) *
                    (e[static_cast<std::size_t>(j)] - mean[static_cast<std::size_t>(j)]);
    Real trace = 0;
    for (int i = 0; i < d; ++i) trace += cov[static_cast<std::size_t>(i) * d + i];
    const Real ridge = std::max(Real(1e-8), 1e-6 * trace / static_cast<Real>(d));
    for (auto& v : cov) v *= inflation / static_cast<Real>(embs.size());
    for (int i = 0; i < d; ++i) cov[static_cast<std::size_t>(i) * d + i] += ridge;
    return StylePrior(std::move(mean), std::move(cov));
}

// ---------------------------------------------------------------------------
// Weights container
// ---------------------------------------------------------------------------

inline void save_stylizer(const Stylizer& stylizer, const std::string& path) {
    TensorContainer c;
    c.kind = "stylizer-weights";
    c.meta["config"] = stylizer.config();
    c.meta["embedding_dim"] = stylizer.embedding_dim();
    store_params(c, stylizer.params());
    c.save(path);
}

inline std::unique_ptr<Stylizer> load_stylizer(const std::string& path) {
    TensorContainer c = TensorContainer::load(path);
    if (c.kind != "stylizer-weights") throw DataError("not a stylizer weights file: " + path);
    auto cfg = c.meta.at("config").get<StylizerConfig>();
    auto stylizer = std::make_unique<Stylizer>(cfg);
    restore_params(c, stylizer->params());
    return stylizer;
}

} // namespace styleseg
