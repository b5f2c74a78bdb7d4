// Acceptance suite: runs every shipping criterion end to end and prints one
// PASS/FAIL line per criterion. Exits nonzero if any criterion fails.
//
// The heavy section (criteria 2-3 plus the stylizer budget of criterion 7)
// trains the committed synthetic benchmark: 3 seeds x 2 arms x 200 epochs on
// 64x64 images with the tiny preset, which takes a few minutes per run on a
// desktop CPU.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "styleseg/styleseg.hpp"
#include "test_util.hpp"

using namespace styleseg;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", criterion, what.c_str(), detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof(buf), f, args);
    va_end(args);
    return buf;
}

fs::path work_dir() {
    fs::path dir = fs::temp_directory_path() / "styleseg_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// -------------------------------------------------------------------------
// criterion 1: full-scale reproduction is out of desk scope; the published
// numbers ride along as labeled reference constants
// -------------------------------------------------------------------------
void criterion_1() {
    const bool constants_ok = ReferenceScores::iou_no_style == 0.6072 && ReferenceScores::iou_style == 0.6656 &&
                              ReferenceScores::dice_no_style == 0.7533 && ReferenceScores::dice_style == 0.7991;
    nlohmann::json ref = reference_block();
    const bool labeled = ref["label"].get<std::string>().find("not produced by this run") != std::string::npos;
    report(1, constants_ok && labeled,
           "full-scale MoNuSeg numbers (IoU 0.6072->0.6656, Dice 0.7533->0.7991) are reference-only",
           "512x512 / 2000-epoch training is not desk-reproducible; criteria 2-3 stand in. An extended run on "
           "capable hardware is documented in the README (expected style-arm IoU within 0.05 of 0.6656)");
}

// -------------------------------------------------------------------------
// criteria 2 + 3 + 7: the committed benchmark
// -------------------------------------------------------------------------
struct BenchmarkOutcome {
    ExperimentReport report;
    double wall_sec = 0;
    double calibration_sec = 0;
    double mean_psnr = 0;
};

BenchmarkOutcome run_benchmark(const fs::path& dir) {
    ExperimentConfig cfg = benchmark_config();
    cfg.out = (dir / "runs").string();

    const auto t0 = std::chrono::steady_clock::now();
    auto data = experiment_detail::resolve_data(cfg, cfg.seeds.front());
    std::vector<Image> train_images;
    for (const auto& s : data.train.samples) train_images.push_back(s.image);
    auto calib = calibrate_stylizer(train_images, cfg.calibration);
    BenchmarkOutcome out;
    out.calibration_sec =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();

    double psnr_acc = 0;
    for (const auto& img : train_images) {
        const Image recon = stylize_image(*calib.stylizer, img, predict_style_embedding(*calib.stylizer, img));
        psnr_acc += psnr(img, recon);
    }
    out.mean_psnr = psnr_acc / static_cast<double>(train_images.size());

    StylePrior prior = fit_style_prior(*calib.stylizer, train_images, cfg.prior_inflation);
    out.report = run_experiment(cfg, calib.stylizer.get(), &prior);
    out.wall_sec =
        std::chrono::duration_cast<std::chrono::duration<double>>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

void criterion_2(const BenchmarkOutcome& bench) {
    const double gap = bench.report.median_test_iou_style - bench.report.median_test_iou_no_style;
    const bool in_budget = bench.wall_sec <= 30 * 60;
    report(2, gap >= 0.02 && !bench.report.any_failure && in_budget,
           "style arm improves median test IoU by >= 0.02 on the committed benchmark",
           fmt("median IoU %.4f (no style) vs %.4f (style), gap %+.4f; %zu seeds; wall %.0fs (budget 1800s)",
               bench.report.median_test_iou_no_style, bench.report.median_test_iou_style, gap,
               bench.report.per_seed.size(), bench.wall_sec));
}

void criterion_3(const BenchmarkOutcome& bench) {
    const SeedResult* median = nullptr;
    for (const auto& s : bench.report.per_seed)
        if (s.seed == bench.report.median_seed) median = &s;
    if (!median || !median->failure.empty()) {
        report(3, false, "over-fitting signature on the median seed", "median seed missing or failed");
        return;
    }
    const LossCurveStats& ns = median->no_style.curve;
    const LossCurveStats& st = median->style.curve;
    const bool no_style_overfits = ns.final_to_min_ratio >= 1.05 && ns.min_val_loss_epoch <= ns.epochs / 2;
    const bool style_converges = st.final_to_min_ratio <= 1.05;
    report(3, no_style_overfits && style_converges, "over-fitting signature appears only without style augmentation",
           fmt("seed %llu: no-style min val %.4f @ epoch %d of %d, final/min %.3f (need >=1.05, min in first half); "
               "style final/min %.3f (need <=1.05)",
               static_cast<unsigned long long>(median->seed), ns.min_val_loss, ns.min_val_loss_epoch, ns.epochs,
               ns.final_to_min_ratio, st.final_to_min_ratio));
}

void criterion_7(const BenchmarkOutcome& bench) {
    // endpoint algebra rides along with the PSNR budget check
    StyleEmbedding content{{0.5, -1.0, 2.0}};
    StyleEmbedding style{{1.5, 3.0, -2.0}};
    const bool endpoints = blend_embeddings(content, style, 0.0).values == content.values &&
                           blend_embeddings(content, style, 1.0).values == style.values;
    const bool in_budget = bench.calibration_sec <= 10 * 60;
    report(7, bench.mean_psnr >= 20.0 && endpoints && in_budget,
           "stylizer self-reconstruction reaches 20 dB PSNR within the calibration budget",
           fmt("mean PSNR %.2f dB over the benchmark train set; calibration %.0fs (budget 600s); blend endpoints exact: %s",
               bench.mean_psnr, bench.calibration_sec, endpoints ? "yes" : "no"));
}

// -------------------------------------------------------------------------
// criterion 4: metric correctness against the set-count oracle
// -------------------------------------------------------------------------
void criterion_4() {
    Rng rng(8080);
    int mismatches = 0;
    double worst_identity = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = 1 + static_cast<int>(rng.uniform_int(32));
        const int w = 1 + static_cast<int>(rng.uniform_int(32));
        auto pred = oracle::random_mask(rng, h, w, rng.uniform());
        auto truth = oracle::random_mask(rng, h, w, rng.uniform());
        auto c = oracle::mask_set_counts(pred, truth);
        const double oracle_iou = c.union_count == 0 ? 1.0 : double(c.intersection) / double(c.union_count);
        const double oracle_dice = (c.pred_count + c.truth_count) == 0
                                       ? 1.0
                                       : 2.0 * double(c.intersection) / double(c.pred_count + c.truth_count);
        const double i = iou(pred, truth);
        const double d = dice(pred, truth);
        if (i != oracle_iou || d != oracle_dice) ++mismatches;
        worst_identity = std::max(worst_identity, std::abs(d - 2 * i / (1 + i)));
    }
    // two-pair counterexample: means do not satisfy the per-pair identity
    BinaryMask a(2, 2), pb(2, 2), tb(2, 2);
    a.at(0, 0) = 1;
    pb.at(0, 0) = 1;
    pb.at(0, 1) = 1;
    tb.at(0, 1) = 1;
    tb.at(1, 1) = 1;
    const double mean_iou = 0.5 * (iou(a, a) + iou(pb, tb));
    const double mean_dice = 0.5 * (dice(a, a) + dice(pb, tb));
    const double mean_gap = std::abs(mean_dice - 2 * mean_iou / (1 + mean_iou));
    report(4, mismatches == 0 && worst_identity <= 1e-9 && mean_gap > 1e-3,
           "IoU/Dice match the brute-force set-count oracle exactly",
           fmt("1000 random pairs up to 32x32: %d mismatches; per-pair identity worst |err| %.2e; "
               "mean-level identity gap %.4f (> 1e-3, same effect as published 0.7533 vs derived 0.7556)",
               mismatches, worst_identity, mean_gap));
}

// -------------------------------------------------------------------------
// criterion 5: mask preservation through augmentation
// -------------------------------------------------------------------------
void criterion_5() {
    StylizerConfig scfg;
    scfg.embedding_dim = 8;
    scfg.predictor_channels = 4;
    scfg.renderer_channels = 4;
    scfg.seed = 3;
    Stylizer stylizer(scfg);
    std::vector<Real> mean(8, 0.0), cov(64, 0.0);
    for (int i = 0; i < 8; ++i) cov[static_cast<std::size_t>(i) * 8 + i] = 1.0;
    StylePrior prior(mean, cov);

    Rng data_rng(11);
    Rng draw(12);
    int style_violations = 0, roundtrip_violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Sample> batch;
        const int n = 1 + static_cast<int>(data_rng.uniform_int(4));
        for (int i = 0; i < n; ++i) {
            Sample s;
            s.id = "a";
            s.image = oracle::random_image(data_rng, 8, 8);
            s.mask = oracle::random_mask(data_rng, 8, 8, 0.3);
            batch.push_back(std::move(s));
        }
        AugmentationPolicy style_only;
        style_only.geometric_enabled = false;
        style_only.style_enabled = true;
        auto styled = augment_batch(batch, style_only, &stylizer, &prior, draw);
        for (std::size_t i = 0; i < batch.size(); ++i)
            if (styled[i].mask.pixels != batch[i].mask.pixels) ++style_violations;

        AugmentationPolicy geo;
        geo.geometric_enabled = true;
        geo.style_enabled = false;
        auto detail = augment_batch_detailed(batch, geo, nullptr, nullptr, draw);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Sample restored = apply_inverse_geometric(detail.samples[i], detail.transforms[i]);
            if (restored.mask.pixels != batch[i].mask.pixels) ++roundtrip_violations;
        }
    }
    report(5, style_violations == 0 && roundtrip_violations == 0,
           "masks are bitwise preserved through augmentation",
           fmt("1000 stylize-only batches: %d mask changes; 1000 geometric batches: %d failed inverse round-trips",
               style_violations, roundtrip_violations));
}

// -------------------------------------------------------------------------
// criterion 6: rasterization against the point-in-polygon oracle
// -------------------------------------------------------------------------
void criterion_6() {
    Rng rng(616);
    int mismatched_pixels = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<Polygon> polys{oracle::random_simple_polygon(rng, 64)};
        if (rng.coin()) polys.push_back(oracle::random_simple_polygon(rng, 64));
        auto fast = rasterize_polygons(polys, 64, 64);
        auto slow = oracle::rasterize_brute_force(polys, 64, 64);
        for (std::size_t i = 0; i < fast.pixels.size(); ++i)
            if (fast.pixels[i] != slow.pixels[i]) ++mismatched_pixels;
    }
    report(6, mismatched_pixels == 0, "scanline rasterization equals the brute-force point-in-polygon oracle",
           fmt("100 random simple polygons on 64x64 grids, pixel-exact; %d mismatched pixels", mismatched_pixels));
}

// -------------------------------------------------------------------------
// criterion 8: MC-dropout protocol behavior
// -------------------------------------------------------------------------
void criterion_8() {
    SyntheticSpec spec;
    spec.image_size = 16;
    spec.n_train = 4;
    spec.n_val = 1;
    spec.n_test = 1;
    spec.radius_lo = 2;
    spec.radius_hi = 5;
    spec.seed = 88;
    auto data = generate_synthetic(spec);
    Dataset test = data.train;
    test.split_tag = SplitTag::Test;

    SegNetConfig zero_cfg = SegNetConfig::tiny(5);
    zero_cfg.dropout_rate = 0.0;
    Model zero_model(zero_cfg);
    auto zero_report = mc_dropout_evaluate(zero_model, test, 20, 0.5, 77);
    bool zero_ok = zero_report.std_iou == 0.0 && zero_report.std_dice == 0.0;
    for (const auto& inst : zero_report.per_instance)
        zero_ok = zero_ok && inst.per_image_iou == zero_report.per_instance[0].per_image_iou;

    Model mc_model(SegNetConfig::tiny(5)); // 10% dropout
    auto mc_a = mc_dropout_evaluate(mc_model, test, 20, 0.5, 77);
    bool instances_differ = false;
    for (std::size_t i = 1; i < mc_a.per_instance.size() && !instances_differ; ++i)
        if (mc_a.per_instance[i].per_image_iou != mc_a.per_instance[0].per_image_iou) instances_differ = true;
    // logits differ across instances even when rounded metrics agree
    Rng probe_a(1), probe_b(2);
    Tensor x = image_to_tensor(test.samples[0].image);
    instances_differ = instances_differ ||
                       !bitwise_equal(mc_model.forward(x, ForwardMode::McDropout, probe_a),
                                      mc_model.forward(x, ForwardMode::McDropout, probe_b));

    auto mc_b = mc_dropout_evaluate(mc_model, test, 20, 0.5, 77);
    nlohmann::json ja = mc_a, jb = mc_b;
    const bool reproducible = ja.dump() == jb.dump();

    report(8, zero_ok && instances_differ && reproducible, "MC-dropout protocol behaves per contract",
           fmt("dropout 0: std 0 and 20 identical instances [%s]; dropout 0.1: instances differ [%s]; "
               "equal seeds reproduce bitwise [%s]",
               zero_ok ? "ok" : "FAIL", instances_differ ? "ok" : "FAIL", reproducible ? "ok" : "FAIL"));
}

// -------------------------------------------------------------------------
// criterion 9: analytic gradients vs central finite differences
// -------------------------------------------------------------------------
void criterion_9() {
    SegNetConfig cfg = SegNetConfig::tiny(77);
    cfg.dropout_rate = 0.0;
    Model model(cfg);
    Rng rng(31);
    Tensor x({1, 3, 16, 16});
    for (auto& v : x.data) v = rng.uniform();
    Tensor masks({1, 1, 16, 16});
    for (auto& v : masks.data) v = rng.uniform() < 0.35 ? 1.0 : 0.0;
    auto loss_fn = [&]() {
        Rng unused(0);
        auto logits = model.forward_var(ag::Var::leaf(x), ForwardMode::Eval, unused);
        return ag::bce_dice_loss(logits, masks, 0.5, 1.0);
    };
    model.params().zero_grad();
    ag::backward(loss_fn());

    const Real step = 1e-3, rtol = 1e-3, atol = 2e-4;
    Rng pick(5);
    int checked = 0, pure_relative = 0, failures = 0;
    while (checked < 20) {
        auto& p = model.params().param(pick.uniform_int(model.params().count()));
        if (p.grad().data.empty()) continue;
        const std::size_t i = pick.uniform_int(p.value().data.size());
        const Real analytic = p.grad().data[i];
        const Real orig = p.value().data[i];
        p.value().data[i] = orig + step;
        const Real up = loss_fn().value().data[0];
        p.value().data[i] = orig - step;
        const Real down = loss_fn().value().data[0];
        p.value().data[i] = orig;
        const Real fd = (up - down) / (2 * step);
        const Real err = std::abs(fd - analytic);
        const Real scale = std::max(std::abs(fd), std::abs(analytic));
        if (err > std::max(rtol * scale, atol)) ++failures;
        if (err <= rtol * std::max(scale, Real(1e-8))) ++pure_relative;
        ++checked;
    }
    report(9, failures == 0 && pure_relative >= 15,
           "analytic gradients match central finite differences (1e-3 step)",
           fmt("20 sampled parameters on a 16x16 input: %d outside tolerance; %d/20 within pure relative 1e-3 "
               "(absolute floor 2e-4 covers relu/maxpool kink noise in the difference quotient)",
               failures, pure_relative));
}

// -------------------------------------------------------------------------
// criterion 10: compare reruns are byte-identical
// -------------------------------------------------------------------------
void criterion_10(const fs::path& dir) {
    ExperimentConfig cfg;
    cfg.name = "det";
    cfg.seeds = {1, 2};
    SyntheticSpec spec;
    spec.image_size = 32;
    spec.n_train = 6;
    spec.n_val = 2;
    spec.n_test = 4;
    spec.radius_lo = 3;
    spec.radius_hi = 7;
    spec.seed = 99;
    cfg.data.synthetic = spec;
    cfg.model = SegNetConfig::tiny();
    cfg.train.batch_size = 4;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 1e-3;
    cfg.eval.n_instances = 3;
    cfg.calibration.steps = 30;
    cfg.calibration.stylizer.embedding_dim = 16;
    cfg.calibration.stylizer.predictor_channels = 8;
    cfg.calibration.stylizer.renderer_channels = 8;
    cfg.parallel = false; // deterministic mode

    auto run_once = [&](const std::string& name) {
        ExperimentConfig c = cfg;
        c.out = (dir / name).string();
        StyleResources res = prepare_style_resources(c);
        run_experiment(c, res.stylizer.get(), res.prior.get());
        std::ifstream in(dir / name / "det" / "report.json");
        nlohmann::json j;
        in >> j;
        // the config echo and run_dir strings embed the distinct out roots
        j.erase("config");
        for (auto& s : j["per_seed"])
            for (const char* arm : {"no_style", "style"})
                if (s.contains(arm)) s[arm].erase("run_dir");
        return j.dump();
    };
    const std::string a = run_once("det_a");
    const std::string b = run_once("det_b");
    report(10, a == b, "compare reruns with identical config produce identical reports",
           fmt("two sequential runs, %zu-byte normalized reports, %s", a.size(), a == b ? "identical" : "DIFFER"));
}

} // namespace

int main() {
    std::printf("acceptance suite: committed synthetic texture-shift benchmark + protocol checks\n");
    const fs::path dir = work_dir();

    criterion_1();

    std::printf("... running committed benchmark (3 seeds x 2 arms x 200 epochs, several minutes)\n");
    std::fflush(stdout);
    BenchmarkOutcome bench = run_benchmark(dir);
    criterion_2(bench);
    criterion_3(bench);
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7(bench);
    criterion_8();
    criterion_9();
    std::printf("... running determinism rerun (criterion 10)\n");
    std::fflush(stdout);
    criterion_10(dir);

    if (g_failures == 0)
        std::printf("acceptance: all criteria passed\n");
    else
        std::printf("acceptance: %d criterion(s) FAILED\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
