#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "drc/checkpoint.hpp"
#include "drc/config.hpp"

using namespace drc;
namespace fs = std::filesystem;

namespace {

RunConfig mini_run_config() {
    RunConfig cfg;
    cfg.arch.image_size = 8;
    cfg.arch.base_channels = 8;
    cfg.arch.block_channels = {8};
    cfg.arch.classifier_channels = {8};
    cfg.arch.z_fg = 4;
    cfg.arch.z_bg = 4;
    cfg.arch.z_pix = 4;
    cfg.arch.k_fg = 3;
    cfg.arch.k_bg = 2;
    cfg.arch.ebm_hidden_layers = 1;
    cfg.arch.ebm_hidden_width = 8;
    cfg.langevin.k0 = 3;
    cfg.langevin.k1 = 3;
    cfg.train.batch = 4;
    cfg.train.iterations = 4;
    cfg.dataset.resolution = 8;
    cfg.dataset.scale_min = 0.15;
    cfg.dataset.scale_max = 0.3;
    cfg.eval_batch = 4;
    return cfg;
}

Trainer make_trainer(const RunConfig& cfg, i64 n_examples) {
    return Trainer(cfg.arch, cfg.train, cfg.langevin, cfg.recon, n_examples, cfg.hash(),
                   cfg.to_json_text());
}

Tensor toy_batch(i64 n, i64 size, u64 seed) {
    Rng rng(seed);
    return Tensor::randn({n, 3, size, size}, rng, 0.5);
}

std::vector<double> flat_params(DrcModel& m) {
    std::vector<double> out;
    for (auto& p : m.all_parameters())
        out.insert(out.end(), p.data(), p.data() + p.numel());
    return out;
}

}  // namespace

TEST_CASE("pseudo label loss: analytic values, Gibbs inequality, validation") {
    CHECK(pseudo_label_loss({1.0, 0.0}, {0.0, 0.0}) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // softmax(Q) == P -> loss = entropy(P)
    CHECK(pseudo_label_loss({0.5, 0.5}, {1.7, 1.7}) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p(4), q(4);
        double sum = 0;
        for (auto& v : p) {
            v = rng.uniform(0.01, 1.0);
            sum += v;
        }
        for (auto& v : p) v /= sum;
        for (auto& v : q) v = rng.normal();
        double entropy = 0;
        for (double v : p) entropy -= v * std::log(v);
        CHECK(pseudo_label_loss(p, q) >= entropy - 1e-12);
    }

    CHECK_THROWS_AS(pseudo_label_loss({0.7, 0.7}, {0.0, 0.0}), ConfigError);
}

TEST_CASE("orthogonal regularizer: hand values") {
    auto eye = Tensor::from_data({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
    CHECK(orthogonal_reg(eye).item() == 0.0);

    auto ones = Tensor::from_data({2, 2}, {1, 1, 1, 1});
    CHECK(orthogonal_reg(ones).item() == doctest::Approx(std::sqrt(8.0)).epsilon(1e-14));

    auto row = Tensor::from_data({1, 5}, {1, 2, 3, 4, 5});
    CHECK(orthogonal_reg(row).item() == 0.0);

    // zero iff rows pairwise orthogonal
    auto nearly = Tensor::from_data({2, 2}, {1, 0, 1e-3, 1});
    CHECK(orthogonal_reg(nearly).item() > 0.0);

    // and it differentiates
    Rng rng(11);
    auto w = Tensor::randn({3, 7}, rng);
    w.set_requires_grad(true);
    orthogonal_reg(w).backward();
    const double h = 1e-6;
    for (i64 i = 0; i < 5; ++i) {
        const double orig = w.data()[i];
        w.data()[i] = orig + h;
        const double fp = orthogonal_reg(w).item();
        w.data()[i] = orig - h;
        const double fm = orthogonal_reg(w).item();
        w.data()[i] = orig;
        const double fd = (fp - fm) / (2 * h);
        CHECK(std::abs(fd - w.grad()[i]) < 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("tv norm: homogeneity and triangle inequality") {
    auto img = Tensor::from_data({1, 1, 2, 2}, {0, 1, 0, 1});
    CHECK(tv_norm(img).data()[0] == 2.0);
    CHECK(tv_norm(mul_scalar(img, -3.0)).data()[0] == doctest::Approx(6.0).epsilon(1e-15));

    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        auto a = Tensor::randn({1, 2, 5, 5}, rng);
        auto b = Tensor::randn({1, 2, 5, 5}, rng);
        const double c = rng.normal();
        CHECK(tv_norm(mul_scalar(a, c)).data()[0] ==
              doctest::Approx(std::abs(c) * tv_norm(a).data()[0]).epsilon(1e-10));
        CHECK(tv_norm(add(a, b)).data()[0] <=
              tv_norm(a).data()[0] + tv_norm(b).data()[0] + 1e-10);
    }
}

TEST_CASE("generator loss: synthetic mixture outputs satisfy the formula") {
    TrainConfig cfg;
    cfg.weight_pseudo = 0;
    cfg.weight_tv = 0;
    cfg.weight_ortho = 0;
    ArchConfig arch;
    arch.image_size = 8;
    arch.block_channels = {8};
    arch.classifier_channels = {8};
    Rng rng(17);
    DrcModel model(arch, rng);

    const i64 hw = 4;
    MixtureOutput mix;
    Tensor x = Tensor::randn({1, 3, 2, 2}, rng);
    mix.pi_f = Tensor::full({1, 1, 2, 2}, 1.0 - 1e-9);
    mix.pi_b = Tensor::full({1, 1, 2, 2}, 1e-9);
    mix.loglik_f = Tensor::zeros({1, 1, 2, 2});  // perfect fit
    mix.loglik_b = Tensor::full({1, 1, 2, 2}, -3.0);
    mix.gamma_f = Tensor::full({1, 1, 2, 2}, 1.0);
    mix.bg_rgb_re = x;
    auto parts = generator_loss(model, mix, x, Tensor(), Tensor(), cfg);
    CHECK(std::abs(parts.total.item()) < 1e-6);

    // identical experts at gamma one half: loss = -(log 1/2 + ll)
    MixtureOutput mix2;
    const double ll = -1.7;
    mix2.pi_f = Tensor::full({1, 1, 2, 2}, 0.5);
    mix2.pi_b = Tensor::full({1, 1, 2, 2}, 0.5);
    mix2.loglik_f = Tensor::full({1, 1, 2, 2}, ll);
    mix2.loglik_b = Tensor::full({1, 1, 2, 2}, ll);
    mix2.gamma_f = Tensor::full({1, 1, 2, 2}, 0.5);
    mix2.bg_rgb_re = x;
    auto parts2 = generator_loss(model, mix2, x, Tensor(), Tensor(), cfg);
    CHECK(parts2.total.item() ==
          doctest::Approx(-(std::log(0.5 + 1e-8) + ll)).epsilon(1e-9));
    (void)hw;
}

TEST_CASE("full generator loss gradient matches finite differences on the miniature") {
    RunConfig rc = mini_run_config();
    Rng rng(23);
    DrcModel m(rc.arch, rng);
    TrainConfig tc = rc.train;
    ReconConfig recon = rc.recon;
    // move off the orthogonal initialization: the ortho penalty is kinked at
    // its minimum, so the check runs at a generic point
    for (auto& p : m.all_parameters())
        for (i64 i = 0; i < p.numel(); ++i) p.data()[i] += 0.05 * rng.normal();

    Tensor zf = Tensor::randn({2, rc.arch.z_fg}, rng);
    Tensor zb = Tensor::randn({2, rc.arch.z_bg}, rng);
    Tensor zp = Tensor::randn({2, rc.arch.z_pix}, rng);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng, 0.5);

    MixtureOutput base = mixture_forward(m, zf, zb, zp, &x, recon);
    Tensor gamma0 = base.gamma_f.clone();
    Tensor feat0 = base.bg_feat.clone();
    Tensor p_fg, p_bg;
    {
        ParamGradGuard guard(false);
        p_fg = softmax_rows(m.ebm_fg.symbolic_logits_batch(zf)).detach();
        p_bg = softmax_rows(m.ebm_bg.symbolic_logits_batch(zb)).detach();
    }

    // the loss with the stop-gradients (gamma, detached feature) pinned
    auto loss_value = [&]() {
        auto [fg_rgb, fg_logit] = generate_foreground(m.gen_fg, zf);
        auto bg = m.gen_bg.region_forward(zb);
        Tensor grid = m.gen_pix.grid_forward(zp, feat0);
        MixtureOutput mix;
        mix.fg_rgb = fg_rgb;
        mix.fg_logit = fg_logit;
        mix.bg_rgb = bg.rgb;
        mix.bg_logit = bg.logit;
        mix.bg_feat = bg.feat;
        mix.grid = grid;
        mix.bg_rgb_re = grid_sample(bg.rgb, grid);
        mix.bg_logit_re = grid_sample(bg.logit, grid);
        auto [pf, pb] = gating(mix.fg_logit, mix.bg_logit_re);
        mix.pi_f = pf;
        mix.pi_b = pb;
        mix.loglik_f = region_loglik(mix.fg_rgb, x, recon);
        mix.loglik_b = region_loglik(mix.bg_rgb_re, x, recon);
        mix.gamma_f = gamma0;
        return generator_loss(m, mix, x, p_fg, p_bg, tc);
    };

    for (auto& p : m.all_parameters()) p.zero_grad();
    loss_value().total.backward();

    Rng pick(29);
    const double h = 1e-5;
    auto groups = m.parameter_groups();
    for (size_t g = 3; g < groups.size(); ++g) {
        for (auto& p : groups[g]) {
            for (int trial = 0; trial < 2; ++trial) {
                const i64 i = pick.uniform_int(p.numel());
                const double orig = p.data()[i];
                p.data()[i] = orig + h;
                const double fp = loss_value().total.item();
                p.data()[i] = orig - h;
                const double fm = loss_value().total.item();
                p.data()[i] = orig;
                const double fd = (fp - fm) / (2 * h);
                const double ad = p.has_grad() ? p.grad()[i] : 0.0;
                CHECK(std::abs(fd - ad) <=
                      1e-4 * std::max({std::abs(fd), std::abs(ad), 1e-2}));
            }
        }
    }
}

TEST_CASE("em iteration: zero rates freeze parameters; zero steps freeze everything") {
    RunConfig rc = mini_run_config();
    rc.train.lr_gen = 0.0;
    rc.train.lr_ebm = 0.0;
    Trainer t = make_trainer(rc, 8);
    Tensor x = toy_batch(4, 8, 3);
    auto before = flat_params(t.model());
    t.em_iteration({0, 1, 2, 3}, x);
    auto after = flat_params(t.model());
    CHECK(before == after);

    RunConfig rc2 = mini_run_config();
    rc2.train.lr_gen = 0.0;
    rc2.train.lr_ebm = 0.0;
    rc2.langevin.k0 = 0;
    rc2.langevin.k1 = 0;
    Trainer t2 = make_trainer(rc2, 8);
    auto chains_before = t2.chains().gather(ChainTarget::posterior, {0, 1, 2, 3}, t2.rng());
    auto params_before = flat_params(t2.model());
    t2.em_iteration({0, 1, 2, 3}, x);
    auto chains_after = t2.chains().gather(ChainTarget::posterior, {0, 1, 2, 3}, t2.rng());
    CHECK(params_before == flat_params(t2.model()));
    for (i64 i = 0; i < chains_before.fg.numel(); ++i)
        CHECK(chains_before.fg.data()[i] == chains_after.fg.data()[i]);
}

TEST_CASE("em iteration: deterministic traces over 100 iterations") {
    auto run_trace = [] {
        RunConfig rc = mini_run_config();
        rc.train.iterations = 100;
        rc.langevin.k0 = 2;
        rc.langevin.k1 = 2;
        Trainer t = make_trainer(rc, 8);
        Tensor x = toy_batch(8, 8, 3);
        std::vector<double> losses;
        for (int it = 0; it < 100; ++it) {
            std::vector<i64> idx = {it % 5, (it + 1) % 5, (it + 2) % 5, (it + 3) % 5};
            Tensor batch = Tensor::zeros({4, 3, 8, 8});
            for (size_t r = 0; r < idx.size(); ++r)
                std::copy(x.data() + idx[r] * 3 * 64, x.data() + (idx[r] + 1) * 3 * 64,
                          batch.data() + static_cast<i64>(r) * 3 * 64);
            MetricsRecord rec = t.em_iteration(idx, batch);
            losses.push_back(rec.loss_total);
            losses.push_back(rec.energy_pos_mean);
        }
        return losses;
    };
    auto a = run_trace();
    auto b = run_trace();
    CHECK(a == b);
}

TEST_CASE("metrics record serializes all fields") {
    MetricsRecord rec;
    rec.iter = 3;
    rec.loss_total = 1.5;
    const std::string j = rec.to_json();
    for (const char* key :
         {"iter", "loss_total", "loss_partition", "loss_recon", "loss_tv", "loss_pseudo",
          "loss_ortho", "energy_pos_mean", "energy_neg_mean", "seconds"})
        CHECK(j.find(key) != std::string::npos);
}

TEST_CASE("train driver: record count, dataset immutability, ablation diagnostics") {
    RunConfig rc = mini_run_config();
    rc.train.iterations = 1;
    rc.train.batch = 2;
    rc.train.disable_reassignment = true;
    rc.langevin.k0 = 1;
    rc.langevin.k1 = 1;

    fs::path dir = fs::temp_directory_path() / "drc_tests" / "train_driver";
    fs::remove_all(dir);
    write_dataset(4, (dir / "data").string(), rc.dataset, 5);
    auto data = ImageFolderDataset::ingest_folder((dir / "data").string());

    Tensor before = data.image_batch({0, 1, 2, 3});
    Trainer t = make_trainer(rc, data.size());
    std::ostringstream metrics;
    t.train(data, (dir / "out").string(), metrics);
    Tensor after = data.image_batch({0, 1, 2, 3});
    for (i64 i = 0; i < before.numel(); ++i) CHECK(before.data()[i] == after.data()[i]);

    std::string lines = metrics.str();
    CHECK(std::count(lines.begin(), lines.end(), '\n') == 1);
    CHECK(lines.find("\"grid_displacement\":0.0") != std::string::npos);
}

TEST_CASE("checkpoint: resume reproduces the unbroken trace bit-exactly") {
    fs::path dir = fs::temp_directory_path() / "drc_tests" / "resume";
    fs::remove_all(dir);
    fs::create_directories(dir);

    RunConfig rc = mini_run_config();
    rc.langevin.k0 = 2;
    rc.langevin.k1 = 2;
    Tensor x = toy_batch(4, 8, 3);
    const std::vector<i64> idx = {0, 1, 2, 3};

    // unbroken: two iterations
    Trainer t1 = make_trainer(rc, 4);
    t1.em_iteration(idx, x);
    MetricsRecord unbroken = t1.em_iteration(idx, x);

    // broken: one iteration, checkpoint, reload, one more
    Trainer t2 = make_trainer(rc, 4);
    t2.em_iteration(idx, x);
    const std::string ckpt = (dir / "ckpt.drc").string();
    t2.save_checkpoint(ckpt);
    Trainer t3 = Trainer::load_checkpoint(ckpt);
    MetricsRecord resumed = t3.em_iteration(idx, x);

    CHECK(resumed.loss_total == unbroken.loss_total);
    CHECK(resumed.loss_partition == unbroken.loss_partition);
    CHECK(resumed.loss_recon == unbroken.loss_recon);
    CHECK(resumed.energy_pos_mean == unbroken.energy_pos_mean);
    CHECK(resumed.energy_neg_mean == unbroken.energy_neg_mean);
    auto pa = flat_params(t1.model());
    auto pb = flat_params(t3.model());
    CHECK(pa == pb);

    // a checkpoint saved after reload is byte-identical to one saved fresh
    const std::string c1 = (dir / "c1.drc").string();
    const std::string c2 = (dir / "c2.drc").string();
    t1.save_checkpoint(c1);
    t3.save_checkpoint(c2);
    std::ifstream f1(c1, std::ios::binary), f2(c2, std::ios::binary);
    std::vector<char> b1((std::istreambuf_iterator<char>(f1)), {});
    std::vector<char> b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
}

TEST_CASE("config: defaults, strict keys, hash stability") {
    RunConfig cfg = RunConfig::from_json_text("{}");
    CHECK(cfg.train.iterations == 10000);
    CHECK(cfg.train.lr_gen == 1e-4);
    CHECK(cfg.train.lr_ebm == 2e-5);
    CHECK(cfg.langevin.k0 == 60);
    CHECK(cfg.langevin.k1 == 40);
    CHECK(cfg.langevin.delta0 == 0.4);
    CHECK(cfg.langevin.delta1 == 0.1);
    CHECK(cfg.langevin.test_steps == 500);
    CHECK(cfg.recon.sigma == 0.3);
    CHECK(cfg.train.weight_pseudo == 0.1);
    CHECK(cfg.train.weight_tv == 0.01);
    CHECK(cfg.train.weight_ortho == 1.0);
    CHECK(cfg.dataset.n_textures == 20);
    CHECK(cfg.dataset.sprite_min == 2);
    CHECK(cfg.dataset.sprite_max == 3);

    try {
        RunConfig::from_json_text(R"({"train":{"lr_gne":0.1}})");
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("lr_gne") != std::string::npos);
    }
    CHECK_THROWS_AS(RunConfig::from_json_text(R"({"unknown_section":{}})"), ConfigError);

    RunConfig a = RunConfig::from_json_text(R"({"seed": 5})");
    RunConfig b = RunConfig::from_json_text(R"({"seed": 5})");
    CHECK(a.hash() == b.hash());
    RunConfig c = RunConfig::from_json_text(R"({"seed": 6})");
    CHECK(a.hash() != c.hash());

    // parse of the canonical text round-trips
    RunConfig d = RunConfig::from_json_text(a.to_json_text());
    CHECK(d.hash() == a.hash());
}
