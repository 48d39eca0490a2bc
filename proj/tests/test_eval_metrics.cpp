#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "drc/eval_metrics.hpp"
#include "drc/image_io.hpp"

using namespace drc;
namespace fs = std::filesystem;

TEST_CASE("binarize: degenerate thresholds") {
    auto p1 = Tensor::full({1, 1, 2, 2}, 1.0);
    auto m1 = binarize(p1, 0.5);
    for (auto v : m1) CHECK(v == 1);

    auto ph = Tensor::full({1, 1, 2, 2}, 0.5);
    auto mh = binarize(ph, 0.5);  // strict inequality
    for (auto v : mh) CHECK(v == 0);

    auto pe = Tensor::full({1, 1, 2, 2}, 1e-9);
    auto me = binarize(pe, 0.0);
    for (auto v : me) CHECK(v == 1);
}

TEST_CASE("iou and dice: hand values and conventions") {
    BinaryMask a = {1, 1, 1, 1, 0, 0, 0, 0};
    BinaryMask b = a;
    CHECK(iou(a, b) == 1.0);
    CHECK(dice(a, b) == 1.0);

    BinaryMask c = {0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(iou(a, c) == 0.0);
    CHECK(dice(a, c) == 0.0);

    // |A|=|B|=4, |A∩B|=2
    BinaryMask d = {0, 0, 1, 1, 1, 1, 0, 0};
    CHECK(iou(a, d) == doctest::Approx(2.0 / 6.0).epsilon(1e-15));
    CHECK(dice(a, d) == doctest::Approx(0.5).epsilon(1e-15));

    BinaryMask empty(8, 0);
    CHECK(iou(empty, empty) == 1.0);
    CHECK(dice(empty, empty) == 1.0);

    CHECK_THROWS_AS(iou(a, BinaryMask{1, 0}), ConfigError);
    CHECK_THROWS_AS(dice(a, BinaryMask{1, 0}), ConfigError);
}

TEST_CASE("dice equals 2 IoU / (1 + IoU) on random masks; symmetry; ordering") {
    Rng rng(101);
    for (int trial = 0; trial < 1000; ++trial) {
        BinaryMask a(64), b(64);
        for (auto& v : a) v = rng.uniform() < 0.4 ? 1 : 0;
        for (auto& v : b) v = rng.uniform() < 0.4 ? 1 : 0;
        const double i = iou(a, b);
        const double d = dice(a, b);
        CHECK(std::abs(d - 2.0 * i / (1.0 + i)) < 1e-12);
        CHECK(iou(b, a) == i);
        CHECK(dice(b, a) == d);
        CHECK(i <= d + 1e-15);
        CHECK(i >= 0.0);
        CHECK(d <= 1.0);
    }
}

TEST_CASE("best permutation score") {
    BinaryMask gt = {1, 1, 0, 0};
    BinaryMask inv = {0, 0, 1, 1};
    auto [s0, i0] = best_permutation_score(gt, inv, gt);
    CHECK(s0 == 1.0);
    CHECK(i0 == 0);
    auto [s1, i1] = best_permutation_score(inv, gt, gt);
    CHECK(s1 == 1.0);
    CHECK(i1 == 1);

    Rng rng(103);
    BinaryMask pa(16), pb(16), g(16);
    for (auto* m : {&pa, &pb, &g})
        for (auto& v : *m) v = rng.uniform() < 0.5 ? 1 : 0;
    auto [sa, ia] = best_permutation_score(pa, pb, g);
    auto [sb, ib] = best_permutation_score(pb, pa, g);
    CHECK(sa == sb);
    if (iou(pa, g) != iou(pb, g)) CHECK(ia == 1 - ib);
}

namespace {

// A dataset of all-foreground masks plus a model stub whose gate saturates.
struct StubWorld {
    std::string dir;
    ArchConfig arch;
    DrcModel model;

    explicit StubWorld(double fg_logit_bias) {
        arch.image_size = 8;
        arch.base_channels = 8;
        arch.block_channels = {8};
        arch.classifier_channels = {8};
        arch.z_fg = 4;
        arch.z_bg = 4;
        arch.z_pix = 4;
        arch.k_fg = 3;
        arch.k_bg = 2;
        arch.ebm_hidden_layers = 1;
        arch.ebm_hidden_width = 8;
        Rng rng(7);
        model = DrcModel(arch, rng);
        Tensor fb = model.gen_fg.parameters().back();
        fb.data()[3] = fg_logit_bias;

        fs::path p = fs::temp_directory_path() / "drc_tests" / "stub_eval";
        fs::remove_all(p);
        fs::create_directories(p / "images");
        fs::create_directories(p / "masks");
        std::ofstream mf(p / "manifest.json");
        mf << R"({"version":1,"n":4,"files":[)";
        for (int i = 0; i < 4; ++i) {
            ImageU8 img;
            img.width = 8;
            img.height = 8;
            img.channels = 3;
            img.pixels.assign(8 * 8 * 3, static_cast<std::uint8_t>(40 * i + 10));
            write_png((p / ("images/" + std::to_string(i) + ".png")).string(), img);
            ImageU8 mask;
            mask.width = 8;
            mask.height = 8;
            mask.channels = 1;
            mask.pixels.assign(64, 255);  // everything is foreground
            write_png((p / ("masks/" + std::to_string(i) + ".png")).string(), mask);
            mf << (i ? "," : "") << R"({"image":"images/)" << i << R"(.png","mask":"masks/)"
               << i << R"(.png","seed":0})";
        }
        mf << "]}";
        mf.close();
        dir = p.string();
    }
};

}  // namespace

TEST_CASE("evaluate_run with saturated stubs and determinism") {
    StubWorld world(+300.0);
    auto data = ImageFolderDataset::ingest_folder(world.dir);
    EvalConfig cfg;
    cfg.steps_override = 0;  // masks from the initialized latents
    cfg.seed = 3;

    ScoreReport r = evaluate_run(world.model, data, cfg);
    CHECK(r.samples.size() == 4);
    CHECK(r.mean_iou == 1.0);
    CHECK(r.mean_dice == 1.0);

    // inverted stub: zero without permutation, one with it
    StubWorld inv(-300.0);
    auto data2 = ImageFolderDataset::ingest_folder(inv.dir);
    ScoreReport r2 = evaluate_run(inv.model, data2, cfg);
    CHECK(r2.mean_iou == 0.0);
    EvalConfig perm = cfg;
    perm.permute = true;
    ScoreReport r3 = evaluate_run(inv.model, data2, perm);
    CHECK(r3.mean_iou == 1.0);

    // deterministic reports
    EvalConfig live = cfg;
    live.steps_override = 3;
    ScoreReport a = evaluate_run(world.model, data, live);
    ScoreReport b = evaluate_run(world.model, data, live);
    REQUIRE(a.samples.size() == b.samples.size());
    for (size_t i = 0; i < a.samples.size(); ++i) {
        CHECK(a.samples[i].iou == b.samples[i].iou);
        CHECK(a.samples[i].dice == b.samples[i].dice);
    }

    // means equal arithmetic means of the per-sample scores
    double acc = 0;
    for (const auto& s : a.samples) acc += s.iou;
    CHECK(std::abs(a.mean_iou - acc / static_cast<double>(a.samples.size())) < 1e-9);

    // report serializations carry one row per sample
    const std::string csv = a.to_csv();
    i64 lines = std::count(csv.begin(), csv.end(), '\n');
    CHECK(lines == 1 + static_cast<i64>(a.samples.size()));
    CHECK(a.to_json().find("mean_iou") != std::string::npos);
}
