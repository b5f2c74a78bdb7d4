// styleseg: segmentation training with randomized-style augmentation.
//
// Subcommands: ingest, synth, calibrate-stylizer, train, eval, compare,
// stylize, plot. All outputs are deterministic for a given seed.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "styleseg/styleseg.hpp"

namespace fs = std::filesystem;
using namespace styleseg;

namespace {

ExperimentConfig config_from_flags(const std::string& config_path, const std::string& out,
                                   const std::string& name, const std::vector<std::uint64_t>& seeds,
                                   bool deterministic) {
    ExperimentConfig cfg = config_path.empty() ? benchmark_config() : load_experiment_config(config_path);
    if (!out.empty()) cfg.out = out;
    if (!name.empty()) cfg.name = name;
    if (!seeds.empty()) cfg.seeds = seeds;
    if (deterministic) cfg.parallel = false;
    return cfg;
}

int cmd_ingest(const std::string& root, const std::string& out, const std::string& split, int target) {
    Dataset ds = load_dataset(root, split, target);
    write_dataset(ds, (fs::path(out) / split).string());
    std::printf("ingested %zu samples into %s/%s (images %dx%d)\n", ds.size(), out.c_str(), split.c_str(), target,
                target);
    return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
    SyntheticSpec spec;
    if (spec_path.empty()) {
        spec = benchmark_synthetic_spec();
    } else {
        std::ifstream in(spec_path);
        if (!in) throw ConfigError("cannot open spec file " + spec_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("bad JSON in " + spec_path + ": " + e.what());
        }
        spec = j.get<SyntheticSpec>();
    }
    if (seed) spec.seed = *seed;
    auto data = generate_synthetic(spec);
    write_synthetic(data, spec, out);
    std::printf("synthetic dataset written to %s (train %zu / val %zu / test %zu, %dx%d)\n", out.c_str(),
                data.train.size(), data.val.size(), data.test.size(), spec.image_size, spec.image_size);
    return 0;
}

std::vector<Image> train_images_for(const ExperimentConfig& cfg) {
    auto data = experiment_detail::resolve_data(cfg, cfg.seeds.front());
    std::vector<Image> images;
    for (const auto& s : data.train.samples) images.push_back(s.image);
    return images;
}

int cmd_calibrate(const std::string& config_path, const std::string& weights_out, const std::string& prior_out,
                  int steps, int batch, double lr, std::uint64_t seed, int dim, double inflation) {
    ExperimentConfig cfg = config_path.empty() ? benchmark_config() : load_experiment_config(config_path);
    CalibrationConfig ccfg = cfg.calibration;
    if (steps >= 0) ccfg.steps = steps;
    if (batch > 0) ccfg.batch = batch;
    if (lr > 0) ccfg.learning_rate = lr;
    ccfg.seed = seed;
    if (dim > 0) ccfg.stylizer.embedding_dim = dim;

    auto images = train_images_for(cfg);
    auto result = calibrate_stylizer(images, ccfg);
    save_stylizer(*result.stylizer, weights_out);
    if (!prior_out.empty()) {
        StylePrior prior = fit_style_prior(*result.stylizer, images, inflation);
        prior.save_json(prior_out);
    }
    const double first = result.loss_history.empty() ? 0 : result.loss_history.front();
    const double last = result.loss_history.empty() ? 0 : result.loss_history.back();
    std::printf("calibrated stylizer on %zu images (%d steps): loss %.6f -> %.6f; weights %s\n", images.size(),
                ccfg.steps, first, last, weights_out.c_str());
    return 0;
}

StyleResources style_resources_for(const ExperimentConfig& cfg, const std::string& weights,
                                   const std::string& prior_file) {
    ExperimentConfig with_paths = cfg;
    if (!weights.empty()) with_paths.stylizer_weights = weights;
    if (!prior_file.empty()) with_paths.prior_file = prior_file;
    return prepare_style_resources(with_paths);
}

int cmd_train(const std::string& config_path, const std::string& arm, std::optional<std::uint64_t> seed_flag,
              const std::string& out, const std::string& name, const std::string& weights,
              const std::string& prior_file) {
    if (arm != "style" && arm != "no_style") throw ConfigError("--arm must be style or no_style");
    ExperimentConfig cfg = config_from_flags(config_path, out, name, {}, false);
    const std::uint64_t seed = seed_flag.value_or(cfg.seeds.front());
    auto data = experiment_detail::resolve_data(cfg, seed);

    StyleResources res;
    if (arm == "style") res = style_resources_for(cfg, weights, prior_file);
    ArmResult result = experiment_detail::run_arm(cfg, data, seed, arm == "style", res.stylizer.get(), res.prior.get());
    std::printf("trained %s arm, seed %llu: best val IoU %.4f at epoch %d; test IoU %.4f, Dice %.4f\n", arm.c_str(),
                static_cast<unsigned long long>(seed), result.train.best_val_iou, result.train.best_epoch,
                result.metrics.mean_iou, result.metrics.mean_dice);
    std::printf("run dir: %s\n", result.run_dir.c_str());
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, std::optional<std::uint64_t> seed_flag,
             int n_instances, double threshold, bool dump_masks, bool ensemble, const std::string& out_json) {
    ExperimentConfig cfg = config_path.empty() ? benchmark_config() : load_experiment_config(config_path);
    const std::uint64_t seed = seed_flag.value_or(cfg.seeds.front());
    auto data = experiment_detail::resolve_data(cfg, seed);
    auto [model, ckpt] = load_checkpoint(checkpoint);

    std::vector<BinaryMask> masks;
    MetricsReport report = mc_dropout_evaluate(*model, data.test, n_instances, threshold,
                                               Rng::mix(seed, 0xe7a1'0000'0000'0001ULL), ensemble,
                                               dump_masks ? &masks : nullptr);
    nlohmann::json j = report;
    j["checkpoint"] = {{"path", checkpoint}, {"epoch", ckpt.epoch}, {"best_val_iou", ckpt.best_val_iou}};
    if (!out_json.empty()) {
        std::ofstream o(out_json);
        if (!o) throw DataError("cannot write " + out_json);
        o << j.dump(2) << "\n";
    }
    if (dump_masks) {
        const fs::path mask_dir = fs::path(out_json.empty() ? std::string("masks") : (fs::path(out_json).parent_path() / "masks").string());
        fs::create_directories(mask_dir);
        for (std::size_t i = 0; i < masks.size(); ++i)
            write_png_gray((mask_dir / (data.test.samples[i].id + ".png")).string(), masks[i]);
    }
    std::printf("eval: mean IoU %.4f (std %.4f), mean Dice %.4f (std %.4f), %d instances\n", report.mean_iou,
                report.std_iou, report.mean_dice, report.std_dice, report.n_instances);
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& out, const std::string& name,
                const std::vector<std::uint64_t>& seeds, bool deterministic, const std::string& weights,
                const std::string& prior_file) {
    ExperimentConfig cfg = config_from_flags(config_path, out, name, seeds, deterministic);
    StyleResources res = style_resources_for(cfg, weights, prior_file);
    ExperimentReport report = run_experiment(cfg, res.stylizer.get(), res.prior.get());
    std::printf("%s", render_table(report).c_str());
    std::printf("report: %s\n", (fs::path(cfg.out) / cfg.name / "report.json").string().c_str());
    if (report.any_failure) {
        std::fprintf(stderr, "warning: at least one arm failed; see report.json\n");
        return 3;
    }
    return 0;
}

int cmd_stylize(const std::string& image, const std::string& weights, const std::string& prior_file, int n,
                double alpha, std::uint64_t seed, const std::string& out) {
    if (weights.empty()) throw ConfigError("stylize: --weights is required");
    if (prior_file.empty()) throw ConfigError("stylize: --prior is required");
    auto stylizer = load_stylizer(weights);
    StylePrior prior = StylePrior::load_json(prior_file);
    preview_stylization(image, n, alpha, seed, out, *stylizer, prior);
    std::printf("stylization preview written to %s\n", out.c_str());
    return 0;
}

int cmd_plot(const std::string& history, const std::string& out) {
    emit_loss_curves(history, out);
    fs::path summary(out);
    summary.replace_extension(".json");
    std::printf("plot written to %s (summary %s)\n", out.c_str(), summary.string().c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"segmentation training with randomized-style augmentation"};
    app.require_subcommand(1);

    std::string config_path, root, out, name, split = "train", arm = "no_style";
    std::string checkpoint, weights, prior_file, image, history, out_json;
    std::vector<std::uint64_t> seeds;
    std::optional<std::uint64_t> seed_flag;
    std::uint64_t seed_value = 0;
    int target = 512, steps = -1, batch = 0, n_instances = 20, n_styles = 3, dim = 0;
    double lr = 0, threshold = 0.5, alpha = 0.5, inflation = 4.0;
    bool deterministic = false, dump_masks = false, ensemble = false;

    auto* ingest = app.add_subcommand("ingest", "rasterize annotations and resize a raw dataset root");
    ingest->add_option("--root", root, "raw root with images/ + annotations/ or masks/")->required();
    ingest->add_option("--out", out, "output root")->required();
    ingest->add_option("--split", split, "split tag to write (train/val/test)");
    ingest->add_option("--target", target, "output image size (default 512)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic texture-shift dataset");
    synth->add_option("--spec", config_path, "SyntheticSpec JSON (default: committed benchmark spec)");
    synth->add_option("--out", out, "output root")->required();
    auto* synth_seed = synth->add_option("--seed", seed_value, "override generator seed");

    auto* calib = app.add_subcommand("calibrate-stylizer", "self-reconstruction calibration of the stylizer");
    calib->add_option("--config", config_path, "experiment config JSON (for the data source)");
    calib->add_option("--weights-out", weights, "output weights file")->required();
    calib->add_option("--prior-out", prior_file, "output prior JSON");
    calib->add_option("--steps", steps, "training steps");
    calib->add_option("--batch", batch, "batch size");
    calib->add_option("--lr", lr, "learning rate");
    calib->add_option("--seed", seed_value, "calibration seed");
    calib->add_option("--dim", dim, "embedding dimension");
    calib->add_option("--inflation", inflation, "prior covariance inflation factor");

    auto* train_cmd = app.add_subcommand("train", "train a single arm");
    train_cmd->add_option("--config", config_path, "experiment config JSON (default: committed benchmark)");
    train_cmd->add_option("--arm", arm, "style or no_style");
    auto* train_seed = train_cmd->add_option("--seed", seed_value, "run seed");
    train_cmd->add_option("--out", out, "output root override");
    train_cmd->add_option("--name", name, "experiment name override");
    train_cmd->add_option("--weights", weights, "stylizer weights (style arm)");
    train_cmd->add_option("--prior", prior_file, "style prior JSON (style arm)");

    auto* eval_cmd = app.add_subcommand("eval", "MC-dropout evaluation of a checkpoint");
    eval_cmd->add_option("--config", config_path, "experiment config JSON (for the data source)");
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
    auto* eval_seed = eval_cmd->add_option("--seed", seed_value, "evaluation seed");
    eval_cmd->add_option("--n-instances", n_instances, "stochastic instances (default 20)");
    eval_cmd->add_option("--threshold", threshold, "binarization threshold (default 0.5)");
    eval_cmd->add_flag("--dump-masks", dump_masks, "write first-instance predicted masks");
    eval_cmd->add_flag("--ensemble", ensemble, "also report prediction-ensemble metrics");
    eval_cmd->add_option("--out", out_json, "metrics JSON output path");

    auto* compare = app.add_subcommand("compare", "train and evaluate both arms across seeds");
    compare->add_option("--config", config_path, "experiment config JSON (default: committed benchmark)");
    compare->add_option("--out", out, "output root override");
    compare->add_option("--name", name, "experiment name override");
    compare->add_option("--seeds", seeds, "seed list override");
    compare->add_flag("--deterministic", deterministic, "run seeds sequentially");
    compare->add_option("--weights", weights, "stylizer weights (skip calibration)");
    compare->add_option("--prior", prior_file, "style prior JSON");

    auto* stylize = app.add_subcommand("stylize", "stylization preview grid for one image");
    stylize->add_option("--image", image, "input image")->required();
    stylize->add_option("--weights", weights, "stylizer weights")->required();
    stylize->add_option("--prior", prior_file, "style prior JSON")->required();
    stylize->add_option("--n", n_styles, "number of stylized variants");
    stylize->add_option("--alpha", alpha, "stylization strength in [0,1]");
    stylize->add_option("--seed", seed_value, "style sampling seed");
    stylize->add_option("--out", out, "output PNG")->required();

    auto* plot = app.add_subcommand("plot", "loss curves and summary from a history CSV");
    plot->add_option("--history", history, "history.csv path")->required();
    plot->add_option("--out", out, "output PNG")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) return cmd_ingest(root, out, split, target);
        if (*synth) {
            if (!synth_seed->empty()) seed_flag = seed_value;
            return cmd_synth(config_path, out, seed_flag);
        }
        if (*calib) return cmd_calibrate(config_path, weights, prior_file, steps, batch, lr, seed_value, dim, inflation);
        if (*train_cmd) {
            if (!train_seed->empty()) seed_flag = seed_value;
            return cmd_train(config_path, arm, seed_flag, out, name, weights, prior_file);
        }
        if (*eval_cmd) {
            if (!eval_seed->empty()) seed_flag = seed_value;
            return cmd_eval(config_path, checkpoint, seed_flag, n_instances, threshold, dump_masks, ensemble, out_json);
        }
        if (*compare) return cmd_compare(config_path, out, name, seeds, deterministic, weights, prior_file);
        if (*stylize) return cmd_stylize(image, weights, prior_file, n_styles, alpha, seed_value, out);
        if (*plot) return cmd_plot(history, out);
    } catch (const TrainingDivergence& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
