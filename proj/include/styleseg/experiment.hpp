#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "styleseg/chart.hpp"
#include "styleseg/dataset.hpp"
#include "styleseg/errors.hpp"
#include "styleseg/metrics.hpp"
#include "styleseg/segnet.hpp"
#include "styleseg/stylizer.hpp"
#include "styleseg/trainer.hpp"

namespace styleseg {

// Published full-scale MoNuSeg results for the same architecture, embedded
// so desk-scale numbers are never mistaken for them.
struct ReferenceScores {
    static constexpr Real iou_no_style = 0.6072;
    static constexpr Real iou_style = 0.6656;
    static constexpr Real dice_no_style = 0.7533;
    static constexpr Real dice_style = 0.7991;
};

inline nlohmann::json reference_block() {
    return {{"label",
             "published full-scale MoNuSeg results (UNeXt, 512x512, 2000 epochs); "
             "reported for context, not produced by this run"},
            {"iou", {{"no_style", ReferenceScores::iou_no_style}, {"style", ReferenceScores::iou_style}}},
            {"dice", {{"no_style", ReferenceScores::dice_no_style}, {"style", ReferenceScores::dice_style}}}};
}

struct EvalSettings {
    int n_instances = 20;
    Real threshold = 0.5;
    bool dump_masks = true;
    bool ensemble_mode = false;
};

inline void to_json(nlohmann::json& j, const EvalSettings& e) {
    j = {{"n_instances", e.n_instances},
         {"threshold", e.threshold},
         {"dump_masks", e.dump_masks},
         {"ensemble_mode", e.ensemble_mode}};
}

inline void from_json(const nlohmann::json& j, EvalSettings& e) {
    e.n_instances = j.value("n_instances", 20);
    e.threshold = j.value("threshold", 0.5);
    e.dump_masks = j.value("dump_masks", true);
    e.ensemble_mode = j.value("ensemble_mode", false);
}

// Data comes either from a generator spec or from a processed root on disk.
struct DataSource {
    std::optional<SyntheticSpec> synthetic;
    std::string root;
    int n_val = 5;
    int target = 512;

    void validate() const {
        if (!synthetic.has_value() && root.empty())
            throw ConfigError("data source: provide either \"synthetic\" or \"root\"");
        if (synthetic.has_value() && !root.empty())
            throw ConfigError("data source: \"synthetic\" and \"root\" are mutually exclusive");
    }
};

inline void to_json(nlohmann::json& j, const DataSource& d) {
    j = nlohmann::json::object();
    if (d.synthetic.has_value()) j["synthetic"] = *d.synthetic;
    if (!d.root.empty()) {
        j["root"] = d.root;
        j["n_val"] = d.n_val;
        j["target"] = d.target;
    }
}

inline void from_json(const nlohmann::json& j, DataSource& d) {
    if (j.contains("synthetic")) d.synthetic = j.at("synthetic").get<SyntheticSpec>();
    d.root = j.value("root", "");
    d.n_val = j.value("n_val", 5);
    d.target = j.value("target", 512);
}

struct ExperimentConfig {
    std::string name = "experiment";
    std::string out = "runs";
    std::vector<std::uint64_t> seeds{1, 2, 3};
    DataSource data;
    SegNetConfig model = SegNetConfig::tiny();
    TrainConfig train; // run_dir, seed, policy.style_enabled filled per run
    EvalSettings eval;
    std::string stylizer_weights;
    std::string prior_file;
    CalibrationConfig calibration;
    Real prior_inflation = 4.0;
    bool parallel = true;

    void validate() const {
        if (seeds.empty()) throw ConfigError("experiment: needs at least one seed");
        if (name.empty() || out.empty()) throw ConfigError("experiment: name and out are required");
        data.validate();
        model.validate();
        if (train.batch_size < 1 || train.epochs < 1) throw ConfigError("experiment: bad train config");
    }
};

inline void to_json(nlohmann::json& j, const CalibrationConfig& c) {
    j = {{"steps", c.steps},
         {"batch", c.batch},
         {"learning_rate", c.learning_rate},
         {"seed", c.seed},
         {"stylizer", c.stylizer}};
}

inline void from_json(const nlohmann::json& j, CalibrationConfig& c) {
    c.steps = j.value("steps", 400);
    c.batch = j.value("batch", 4);
    c.learning_rate = j.value("learning_rate", 1e-3);
    c.seed = j.value("seed", std::uint64_t(0));
    if (j.contains("stylizer")) j.at("stylizer").get_to(c.stylizer);
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    TrainConfig train_echo = c.train;
    train_echo.run_dir.clear();
    nlohmann::json train_j = train_echo;
    j = {{"schema", 1},
         {"name", c.name},
         {"out", c.out},
         {"seeds", c.seeds},
         {"data", c.data},
         {"model", c.model},
         {"train", train_j},
         {"eval", c.eval},
         {"stylizer_weights", c.stylizer_weights},
         {"prior_file", c.prior_file},
         {"calibration", c.calibration},
         {"prior_inflation", c.prior_inflation},
         {"parallel", c.parallel}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    const int schema = j.value("schema", 1);
    if (schema != 1) throw ConfigError("unsupported config schema version " + std::to_string(schema));
    c.name = j.value("name", "experiment");
    c.out = j.value("out", "runs");
    if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
    if (j.contains("data")) j.at("data").get_to(c.data);
    if (j.contains("model")) j.at("model").get_to(c.model);
    if (j.contains("train")) {
        TrainConfig t;
        j.at("train").get_to(t);
        c.train = t;
    }
    if (j.contains("eval")) j.at("eval").get_to(c.eval);
    c.stylizer_weights = j.value("stylizer_weights", "");
    c.prior_file = j.value("prior_file", "");
    if (j.contains("calibration")) j.at("calibration").get_to(c.calibration);
    c.prior_inflation = j.value("prior_inflation", 4.0);
    c.parallel = j.value("parallel", true);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad JSON in " + path + ": " + e.what());
    }
    ExperimentConfig c = j.get<ExperimentConfig>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Committed desk-scale benchmark: 64x64 synthetic texture-shift data, tiny
// preset, 200 epochs, batch 4, 3 seeds.
// ---------------------------------------------------------------------------

inline SyntheticSpec benchmark_synthetic_spec() {
    SyntheticSpec spec;
    spec.image_size = 64;
    spec.n_train = 16;
    spec.n_val = 8;
    spec.n_test = 16;
    spec.shapes_min = 2;
    spec.shapes_max = 5;
    spec.radius_lo = 7;
    spec.radius_hi = 14;
    // identical frequency bands: region identity is carried by shape/edges
    // plus per-image color statistics, not by a global frequency rule
    spec.background = TextureBand{4, 10, 0, 3.1, 0.05};
    spec.foreground = TextureBand{4, 10, 0, 3.1, 0.05};
    spec.texture_shift = true;
    spec.seed = 2024;
    return spec;
}

inline ExperimentConfig benchmark_config() {
    ExperimentConfig c;
    c.name = "synthetic-benchmark";
    c.seeds = {1, 2, 3};
    c.data.synthetic = benchmark_synthetic_spec();
    c.model = SegNetConfig::tiny();
    c.train.batch_size = 4;
    c.train.epochs = 200;
    c.train.learning_rate = 1e-3;
    c.train.policy.geometric_enabled = true;
    c.train.policy.alpha = 0.5;
    c.train.run_dir = "<set per run>";
    c.eval.n_instances = 20;
    c.eval.threshold = 0.5;
    c.calibration.steps = 400;
    c.calibration.batch = 4;
    c.calibration.learning_rate = 1e-3;
    c.calibration.stylizer.embedding_dim = 32;
    return c;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct LossCurveStats {
    Real min_val_loss = 0;
    int min_val_loss_epoch = 0;
    Real final_val_loss = 0;
    Real final_to_min_ratio = 0;
    Real min_train_loss = 0;
    int min_train_loss_epoch = 0;
    int epochs = 0;
};

inline LossCurveStats loss_curve_stats(const std::vector<EpochRecord>& history) {
    LossCurveStats s;
    s.epochs = static_cast<int>(history.size());
    s.min_val_loss = history.front().val_loss;
    s.min_val_loss_epoch = history.front().epoch;
    s.min_train_loss = history.front().train_loss;
    s.min_train_loss_epoch = history.front().epoch;
    for (const auto& r : history) {
        if (r.val_loss < s.min_val_loss) {
            s.min_val_loss = r.val_loss;
            s.min_val_loss_epoch = r.epoch;
        }
        if (r.train_loss < s.min_train_loss) {
            s.min_train_loss = r.train_loss;
            s.min_train_loss_epoch = r.epoch;
        }
    }
    s.final_val_loss = history.back().val_loss;
    s.final_to_min_ratio = s.min_val_loss > 0 ? s.final_val_loss / s.min_val_loss : 1.0;
    return s;
}

inline void to_json(nlohmann::json& j, const LossCurveStats& s) {
    j = {{"min_val_loss", s.min_val_loss},
         {"min_val_loss_epoch", s.min_val_loss_epoch},
         {"final_val_loss", s.final_val_loss},
         {"final_to_min_ratio", s.final_to_min_ratio},
         {"min_train_loss", s.min_train_loss},
         {"min_train_loss_epoch", s.min_train_loss_epoch},
         {"epochs", s.epochs}};
}

struct ArmResult {
    std::string arm; // "no_style" or "style"
    std::string run_dir;
    TrainResult train;
    MetricsReport metrics;
    LossCurveStats curve;
};

struct SeedResult {
    std::uint64_t seed = 0;
    ArmResult no_style;
    ArmResult style;
    bool pairing_verified = false; // same splits and same initial parameters
    std::string failure; // nonempty if a training arm aborted
};

struct ExperimentReport {
    ExperimentConfig config;
    std::vector<SeedResult> per_seed;
    Real median_test_iou_no_style = 0, median_test_iou_style = 0;
    Real median_test_dice_no_style = 0, median_test_dice_style = 0;
    std::uint64_t median_seed = 0; // seed at the median no-style test IoU
    Real wall_time_sec = 0;
    bool any_failure = false;
};

namespace experiment_detail {

struct SeedData {
    Dataset train, val, test;
};

inline SeedData resolve_data(const ExperimentConfig& config, std::uint64_t seed) {
    SeedData d;
    if (config.data.synthetic.has_value()) {
        SyntheticSpec spec = *config.data.synthetic;
        spec.seed = Rng::mix(spec.seed, seed);
        auto gen = generate_synthetic(spec);
        d.train = std::move(gen.train);
        d.val = std::move(gen.val);
        d.test = std::move(gen.test);
        return d;
    }
    namespace fs = std::filesystem;
    const fs::path root(config.data.root);
    Dataset train_all = load_dataset(config.data.root, "train", config.data.target);
    if (fs::exists(root / "val" / "images")) {
        d.train = std::move(train_all);
        d.val = load_dataset(config.data.root, "val", config.data.target);
    } else {
        auto [tr, va] = split_train_val(train_all, config.data.n_val, seed);
        d.train = std::move(tr);
        d.val = std::move(va);
    }
    d.test = load_dataset(config.data.root, "test", config.data.target);
    return d;
}

inline Real median(std::vector<Real> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    if (n == 0) return 0;
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline ArmResult run_arm(const ExperimentConfig& config, const SeedData& data, std::uint64_t seed,
                         bool style_enabled, const Stylizer* stylizer, const StylePrior* prior) {
    namespace fs = std::filesystem;
    ArmResult arm;
    arm.arm = style_enabled ? "style" : "no_style";
    arm.run_dir = (fs::path(config.out) / config.name / ("seed-" + std::to_string(seed)) / arm.arm).string();

    SegNetConfig mcfg = config.model;
    mcfg.seed = seed;
    Model model(mcfg);

    TrainConfig tcfg = config.train;
    tcfg.seed = seed;
    tcfg.run_dir = arm.run_dir;
    tcfg.policy.style_enabled = style_enabled;

    arm.train = styleseg::train(model, data.train, data.val, tcfg,
                                style_enabled ? stylizer : nullptr, style_enabled ? prior : nullptr);
    arm.curve = loss_curve_stats(arm.train.history);

    auto [best_model, ckpt] = load_checkpoint(arm.train.checkpoint_path);
    std::vector<BinaryMask> first_masks;
    arm.metrics = mc_dropout_evaluate(*best_model, data.test, config.eval.n_instances, config.eval.threshold,
                                      Rng::mix(seed, 0xe7a1'0000'0000'0001ULL), config.eval.ensemble_mode,
                                      config.eval.dump_masks ? &first_masks : nullptr);

    nlohmann::json mj = arm.metrics;
    mj["checkpoint"] = {{"path", arm.train.checkpoint_path},
                        {"epoch", ckpt.epoch},
                        {"best_val_iou", ckpt.best_val_iou}};
    mj["n_test_images"] = data.test.size();
    std::ofstream mout(fs::path(arm.run_dir) / "metrics.json");
    mout << mj.dump(2) << "\n";

    if (config.eval.dump_masks) {
        const fs::path mask_dir = fs::path(arm.run_dir) / "masks";
        fs::create_directories(mask_dir);
        for (std::size_t i = 0; i < first_masks.size(); ++i)
            write_png_gray((mask_dir / (data.test.samples[i].id + ".png")).string(), first_masks[i]);
    }
    return arm;
}

inline SeedResult run_seed(const ExperimentConfig& config, std::uint64_t seed, const Stylizer* stylizer,
                           const StylePrior* prior) {
    SeedResult result;
    result.seed = seed;
    SeedData data = resolve_data(config, seed);
    try {
        result.no_style = run_arm(config, data, seed, false, stylizer, prior);
        result.style = run_arm(config, data, seed, true, stylizer, prior);
        // paired arms must have consumed identical splits and identical
        // initialization; check the recorded run metadata, not intent
        auto run_meta = [](const std::string& run_dir) {
            std::ifstream in(std::filesystem::path(run_dir) / "config.json");
            nlohmann::json j;
            in >> j;
            return std::make_pair(j.value("init_param_hash", std::uint64_t(0)),
                                  std::make_pair(j.value("train_ids", nlohmann::json::array()),
                                                 j.value("val_ids", nlohmann::json::array())));
        };
        const auto ns_meta = run_meta(result.no_style.run_dir);
        const auto st_meta = run_meta(result.style.run_dir);
        result.pairing_verified = ns_meta == st_meta && ns_meta.first != 0;
    } catch (const TrainingDivergence& e) {
        result.failure = e.what();
    }
    return result;
}

} // namespace experiment_detail

struct StyleResources {
    std::unique_ptr<Stylizer> stylizer;
    std::unique_ptr<StylePrior> prior;
};

// Loads stylizer weights / prior when paths are given, otherwise calibrates
// on the first seed's training images and fits the inflated empirical prior.
inline StyleResources prepare_style_resources(const ExperimentConfig& config) {
    StyleResources res;
    if (!config.stylizer_weights.empty()) {
        res.stylizer = load_stylizer(config.stylizer_weights);
    } else {
        auto data = experiment_detail::resolve_data(config, config.seeds.front());
        std::vector<Image> images;
        for (const auto& s : data.train.samples) images.push_back(s.image);
        CalibrationConfig ccfg = config.calibration;
        auto calib = calibrate_stylizer(images, ccfg);
        res.stylizer = std::move(calib.stylizer);
    }
    if (!config.prior_file.empty()) {
        res.prior = std::make_unique<StylePrior>(StylePrior::load_json(config.prior_file));
    } else {
        auto data = experiment_detail::resolve_data(config, config.seeds.front());
        std::vector<Image> images;
        for (const auto& s : data.train.samples) images.push_back(s.image);
        res.prior = std::make_unique<StylePrior>(fit_style_prior(*res.stylizer, images, config.prior_inflation));
    }
    return res;
}

inline nlohmann::json report_to_json(const ExperimentReport& report) {
    nlohmann::json j;
    j["schema"] = 1;
    j["config"] = report.config;
    j["reference"] = reference_block();
    auto seeds = nlohmann::json::array();
    for (const auto& s : report.per_seed) {
        nlohmann::json sj;
        sj["seed"] = s.seed;
        sj["pairing_verified"] = s.pairing_verified;
        if (!s.failure.empty()) {
            sj["failure"] = s.failure;
        } else {
            for (const ArmResult* arm : {&s.no_style, &s.style}) {
                nlohmann::json aj;
                aj["run_dir"] = arm->run_dir;
                aj["metrics"] = arm->metrics;
                aj["curve"] = arm->curve;
                aj["best_epoch"] = arm->train.best_epoch;
                aj["best_val_iou"] = arm->train.best_val_iou;
                aj["init_param_hash"] = arm->train.init_param_hash;
                sj[arm->arm] = aj;
            }
        }
        seeds.push_back(sj);
    }
    j["per_seed"] = seeds;
    j["medians"] = {{"test_iou", {{"no_style", report.median_test_iou_no_style}, {"style", report.median_test_iou_style}}},
                    {"test_dice", {{"no_style", report.median_test_dice_no_style}, {"style", report.median_test_dice_style}}}};
    j["median_seed"] = report.median_seed;
    // wall time goes to timing.txt, keeping report.json bit-identical across
    // reruns of the same config
    j["any_failure"] = report.any_failure;
    return j;
}

inline std::string render_table(const ExperimentReport& report) {
    char buf[512];
    std::string out;
    out += "              No Style Aug.   Style Aug.\n";
    std::snprintf(buf, sizeof(buf), "IoU  (median)     %.4f         %.4f\n", report.median_test_iou_no_style,
                  report.median_test_iou_style);
    out += buf;
    std::snprintf(buf, sizeof(buf), "Dice (median)     %.4f         %.4f\n", report.median_test_dice_no_style,
                  report.median_test_dice_style);
    out += buf;
    out += "\n";
    std::snprintf(buf, sizeof(buf),
                  "reference (published, full scale): IoU %.4f / %.4f, Dice %.4f / %.4f\n",
                  ReferenceScores::iou_no_style, ReferenceScores::iou_style, ReferenceScores::dice_no_style,
                  ReferenceScores::dice_style);
    out += buf;
    return out;
}

inline ExperimentReport run_experiment(const ExperimentConfig& config, const Stylizer* stylizer,
                                       const StylePrior* prior) {
    config.validate();
    if (!stylizer || !prior) throw ConfigError("run_experiment: stylizer and prior are required for the style arm");
    const auto t0 = std::chrono::steady_clock::now();

    ExperimentReport report;
    report.config = config;
    report.per_seed.resize(config.seeds.size());

    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const unsigned n_workers = config.parallel ? std::min<unsigned>(hw, static_cast<unsigned>(config.seeds.size())) : 1;
    if (n_workers <= 1) {
        for (std::size_t i = 0; i < config.seeds.size(); ++i)
            report.per_seed[i] = experiment_detail::run_seed(config, config.seeds[i], stylizer, prior);
    } else {
        std::vector<std::thread> workers;
        std::atomic<std::size_t> next{0};
        for (unsigned w = 0; w < n_workers; ++w)
            workers.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= config.seeds.size()) return;
                    report.per_seed[i] = experiment_detail::run_seed(config, config.seeds[i], stylizer, prior);
                }
            });
        for (auto& w : workers) w.join();
    }

    std::vector<Real> iou_ns, iou_st, dice_ns, dice_st;
    for (const auto& s : report.per_seed) {
        if (!s.failure.empty()) {
            report.any_failure = true;
            continue;
        }
        iou_ns.push_back(s.no_style.metrics.mean_iou);
        iou_st.push_back(s.style.metrics.mean_iou);
        dice_ns.push_back(s.no_style.metrics.mean_dice);
        dice_st.push_back(s.style.metrics.mean_dice);
    }
    report.median_test_iou_no_style = experiment_detail::median(iou_ns);
    report.median_test_iou_style = experiment_detail::median(iou_st);
    report.median_test_dice_no_style = experiment_detail::median(dice_ns);
    report.median_test_dice_style = experiment_detail::median(dice_st);

    // median seed: the seed whose no-style test IoU sits at the (lower) median
    std::vector<std::pair<Real, std::uint64_t>> ranked;
    for (const auto& s : report.per_seed)
        if (s.failure.empty()) ranked.emplace_back(s.no_style.metrics.mean_iou, s.seed);
    std::sort(ranked.begin(), ranked.end());
    if (!ranked.empty()) report.median_seed = ranked[(ranked.size() - 1) / 2].second;

    report.wall_time_sec =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();

    namespace fs = std::filesystem;
    const fs::path exp_dir = fs::path(config.out) / config.name;
    fs::create_directories(exp_dir);
    {
        std::ofstream out(exp_dir / "report.json");
        out << report_to_json(report).dump(2) << "\n";
    }
    {
        std::ofstream out(exp_dir / "table.txt");
        out << render_table(report);
    }
    {
        std::ofstream out(exp_dir / "timing.txt");
        out << "wall_time_sec " << report.wall_time_sec << "\n";
    }
    return report;
}

// ---------------------------------------------------------------------------
// Figure analogs
// ---------------------------------------------------------------------------

// Plot (train = blue, val = orange) plus a JSON summary next to it.
inline void emit_loss_curves(const std::string& history_path, const std::string& out_path) {
    auto history = trainer_detail::read_history_csv(history_path);
    Chart chart;
    std::vector<Real> train_ys, val_ys;
    for (const auto& r : history) {
        train_ys.push_back(r.train_loss);
        val_ys.push_back(r.val_loss);
    }
    chart.add_series(std::move(train_ys), 0.12, 0.35, 0.80);
    chart.add_series(std::move(val_ys), 0.95, 0.55, 0.10);
    write_png_rgb(out_path, chart.render());

    const LossCurveStats stats = loss_curve_stats(history);
    nlohmann::json j = stats;
    std::filesystem::path summary_path(out_path);
    summary_path.replace_extension(".json");
    std::ofstream out(summary_path);
    if (!out) throw DataError("cannot write " + summary_path.string());
    out << j.dump(2) << "\n";
}

// Original plus n stylized variants, side by side with a 2px gutter.
inline void preview_stylization(const std::string& image_path, int n_styles, Real alpha, std::uint64_t seed,
                                const std::string& out_path, const Stylizer& stylizer, const StylePrior& prior) {
    if (n_styles < 1) throw ConfigError("preview_stylization: n_styles must be >= 1");
    Image original = read_image(image_path);
    const StyleEmbedding content = predict_style_embedding(stylizer, original);
    Rng rng(Rng::mix(seed, 0x9e33'0000'0000'0007ULL));

    std::vector<Image> panels{original};
    for (int i = 0; i < n_styles; ++i) {
        const StyleEmbedding style = sample_style_embedding(prior, rng);
        panels.push_back(stylize_image(stylizer, original, blend_embeddings(content, style, alpha)));
    }
    const int gutter = 2;
    const int W = original.width * static_cast<int>(panels.size()) + gutter * (static_cast<int>(panels.size()) - 1);
    Image grid(original.height, W);
    for (auto& v : grid.pixels) v = 1.0;
    int x0 = 0;
    for (const auto& p : panels) {
        for (int y = 0; y < p.height; ++y)
            for (int x = 0; x < p.width; ++x)
                for (int c = 0; c < 3; ++c) grid.at(y, x0 + x, c) = p.at(y, x, c);
        x0 += p.width + gutter;
    }
    write_png_rgb(out_path, grid);
}

} // namespace styleseg
