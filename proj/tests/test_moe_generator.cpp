#include <doctest.h>

#include <cmath>

#include "drc/moe_generator.hpp"

using namespace drc;

namespace {

ArchConfig mini_arch(i64 image_size = 8) {
    ArchConfig a;
    a.image_size = image_size;
    a.base_channels = 8;
    a.block_channels.clear();
    a.classifier_channels.clear();
    for (i64 s = 4; s < image_size; s *= 2) a.block_channels.push_back(8);
    for (i64 s = image_size; s > 4; s /= 2) a.classifier_channels.push_back(8);
    a.z_fg = 4;
    a.z_bg = 4;
    a.z_pix = 4;
    a.k_fg = 3;
    a.k_bg = 2;
    a.ebm_hidden_layers = 1;
    a.ebm_hidden_width = 8;
    return a;
}

void zero_tensor(Tensor t) { std::fill(t.data(), t.data() + t.numel(), 0.0); }

}  // namespace

TEST_CASE("foreground generator: determinism, constant output with zero final conv, shapes") {
    for (i64 size : {32, 64, 128}) {
        ArchConfig a = mini_arch(size);
        Rng rng(11);
        DrcModel m(a, rng);
        Tensor z = Tensor::randn({2, a.z_fg}, rng);
        auto [rgb, logit] = generate_foreground(m.gen_fg, z);
        CHECK(rgb.shape() == std::vector<i64>{2, 3, size, size});
        CHECK(logit.shape() == std::vector<i64>{2, 1, size, size});
    }

    ArchConfig a = mini_arch();
    Rng r1(13), r2(13);
    DrcModel m1(a, r1), m2(a, r2);
    Tensor z = Tensor::from_data({1, 4}, {0.3, -0.5, 1.0, 0.2});
    auto [rgb1, l1] = generate_foreground(m1.gen_fg, z);
    auto [rgb2, l2] = generate_foreground(m2.gen_fg, z);
    for (i64 i = 0; i < rgb1.numel(); ++i) CHECK(rgb1.data()[i] == rgb2.data()[i]);

    // zero final conv -> rgb = tanh(bias), spatially constant
    auto params = m1.gen_fg.parameters();
    Tensor fw = params[params.size() - 2];
    Tensor fb = params[params.size() - 1];
    zero_tensor(fw);
    std::fill(fb.data(), fb.data() + fb.numel(), 0.0);
    fb.data()[0] = 0.7;
    auto [rgb3, l3] = generate_foreground(m1.gen_fg, z);
    const double want = std::tanh(0.7);
    for (i64 p = 0; p < 64; ++p) {
        CHECK(rgb3.data()[p] == doctest::Approx(want).epsilon(1e-15));
        CHECK(rgb3.data()[64 + p] == 0.0);
    }
}

TEST_CASE("background with reassignment: identity grid, shared grid, gradient block") {
    ArchConfig a = mini_arch();
    Rng rng(17);
    DrcModel m(a, rng);
    Tensor z2 = Tensor::randn({2, a.z_bg}, rng);
    Tensor zp = Tensor::randn({2, a.z_pix}, rng);

    // force the reassignment head to emit zero displacement
    auto pix_params = m.gen_pix.parameters();
    zero_tensor(pix_params[pix_params.size() - 2]);
    zero_tensor(pix_params[pix_params.size() - 1]);
    auto out = generate_background(m.gen_bg, m.gen_pix, z2, zp);
    for (i64 i = 0; i < out.rgb.numel(); ++i) CHECK(out.rgb_re.data()[i] == out.rgb.data()[i]);

    // the same grid resamples both rgb and logit
    Rng rng2(19);
    DrcModel m2(a, rng2);
    auto out2 = generate_background(m2.gen_bg, m2.gen_pix, z2, zp);
    Tensor relogit = resample(out2.logit, out2.grid);
    for (i64 i = 0; i < relogit.numel(); ++i)
        CHECK(relogit.data()[i] == out2.logit_re.data()[i]);

    // a loss on the grid alone sends no gradient into the background net
    for (auto& p : m2.gen_bg.parameters()) p.zero_grad();
    auto out3 = generate_background(m2.gen_bg, m2.gen_pix, z2, zp);
    Tensor grid_loss = sum(square(out3.grid));
    grid_loss.backward();
    for (auto& p : m2.gen_bg.parameters()) {
        if (!p.has_grad()) continue;
        for (i64 i = 0; i < p.numel(); ++i) CHECK(p.grad()[i] == 0.0);
    }
    // while the reassignment net does receive gradient
    bool any = false;
    for (auto& p : m2.gen_pix.parameters())
        if (p.has_grad())
            for (i64 i = 0; i < p.numel(); ++i) any = any || p.grad()[i] != 0.0;
    CHECK(any);
}

TEST_CASE("resample: center-pin grid and half-pixel shift") {
    Rng rng(23);
    auto img = Tensor::randn({1, 1, 5, 5}, rng);
    auto grid = Tensor::zeros({1, 2, 5, 5});  // all (0,0) -> center pixel
    auto out = grid_sample(img, grid);
    const double center = img.data()[2 * 5 + 2];
    for (i64 i = 0; i < 25; ++i) CHECK(out.data()[i] == center);

    auto two = Tensor::from_data({1, 1, 1, 2}, {0.0, 1.0});
    auto g2 = Tensor::zeros({1, 2, 1, 2});  // u=0 -> px=0.5 midpoint
    auto mid = grid_sample(two, g2);
    CHECK(mid.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

    // linearity in the image argument
    auto x = Tensor::randn({1, 2, 6, 6}, rng);
    auto y = Tensor::randn({1, 2, 6, 6}, rng);
    auto gr = Tensor::randn({1, 2, 6, 6}, rng, 0.5);
    auto lhs = grid_sample(add(mul_scalar(x, 1.7), mul_scalar(y, -0.4)), gr);
    auto rhs = add(mul_scalar(grid_sample(x, gr), 1.7), mul_scalar(grid_sample(y, gr), -0.4));
    for (i64 i = 0; i < lhs.numel(); ++i)
        CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-9);
}

TEST_CASE("gating: analytic values, shift invariance, partition of unity") {
    auto lf = Tensor::from_data({1, 1, 1, 2}, {0.0, std::log(3.0)});
    auto lb = Tensor::from_data({1, 1, 1, 2}, {0.0, 0.0});
    auto [pf, pb] = gating(lf, lb);
    CHECK(pf.data()[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(pb.data()[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(pf.data()[1] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(pb.data()[1] == doctest::Approx(0.25).epsilon(1e-12));

    auto lf2 = add_scalar(lf, 4.2);
    auto lb2 = add_scalar(lb, 4.2);
    auto [pf2, pb2] = gating(lf2, lb2);
    for (i64 i = 0; i < 2; ++i) {
        CHECK(std::abs(pf2.data()[i] - pf.data()[i]) < 1e-9);
        CHECK(std::abs(pf.data()[i] + pb.data()[i] - 1.0) < 1e-6);
        CHECK(pf.data()[i] > 0.0);
        CHECK(pf.data()[i] < 1.0);
    }
}

TEST_CASE("region log-likelihood: exact fit and hand values") {
    ReconConfig cfg;
    cfg.sigma = 0.3;
    Rng rng(29);
    auto x = Tensor::randn({1, 3, 4, 4}, rng);
    auto ll = region_loglik(x, x, cfg);
    for (i64 i = 0; i < ll.numel(); ++i) CHECK(ll.data()[i] == 0.0);

    auto a = Tensor::from_data({1, 1, 1, 1}, {0.18});
    auto b = Tensor::from_data({1, 1, 1, 1}, {0.0});
    CHECK(region_loglik(a, b, cfg).data()[0] == doctest::Approx(-1.0).epsilon(1e-12));

    ReconConfig l2 = cfg;
    l2.norm = ReconConfig::Norm::squared_l2;
    auto c = Tensor::from_data({1, 1, 1, 1}, {0.3});
    CHECK(region_loglik(c, b, l2).data()[0] == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("responsibilities: analytic cases and the Bayes-rule oracle") {
    auto mk = [](double v) { return Tensor::from_data({1, 1, 1, 1}, {v}); };
    auto g1 = responsibilities(mk(0.8), mk(0.2), mk(-1.3), mk(-1.3), 1e-8);
    CHECK(std::abs(g1.data()[0] - 0.8) < 1e-6);

    auto g2 = responsibilities(mk(0.5), mk(0.5), mk(std::log(0.9)), mk(std::log(0.1)), 1e-8);
    CHECK(g2.data()[0] == doctest::Approx(0.9).epsilon(1e-6));

    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
        const double pf = rng.uniform(0.01, 0.99);
        const double pb = 1.0 - pf;
        const double lf = -rng.uniform(0.0, 30.0);
        const double lb = -rng.uniform(0.0, 30.0);
        auto g = responsibilities(mk(pf), mk(pb), mk(lf), mk(lb), 0.0);
        const double direct = pf * std::exp(lf) / (pf * std::exp(lf) + pb * std::exp(lb));
        CHECK(std::abs(g.data()[0] - direct) < 1e-9);
    }
}

TEST_CASE("compose: degenerate gates and identical experts") {
    Rng rng(37);
    auto fg = Tensor::randn({1, 3, 4, 4}, rng);
    auto bg = Tensor::randn({1, 3, 4, 4}, rng);
    auto ones = Tensor::full({1, 1, 4, 4}, 1.0);
    auto zeros = Tensor::zeros({1, 1, 4, 4});
    auto c1 = compose(fg, bg, ones, zeros);
    for (i64 i = 0; i < fg.numel(); ++i) CHECK(c1.data()[i] == fg.data()[i]);
    auto c2 = compose(fg, bg, zeros, ones);
    for (i64 i = 0; i < bg.numel(); ++i) CHECK(c2.data()[i] == bg.data()[i]);

    auto lf = Tensor::randn({1, 1, 4, 4}, rng);
    auto lb = Tensor::randn({1, 1, 4, 4}, rng);
    auto [pf, pb] = gating(lf, lb);
    auto c3 = compose(fg, fg, pf, pb);
    for (i64 i = 0; i < fg.numel(); ++i)
        CHECK(std::abs(c3.data()[i] - fg.data()[i]) < 1e-12);
}

TEST_CASE("mixture forward: deterministic, pi partition, gamma is constant") {
    ArchConfig a = mini_arch();
    Rng rng(41);
    DrcModel m(a, rng);
    ReconConfig recon;
    Tensor zf = Tensor::randn({2, a.z_fg}, rng);
    Tensor zb = Tensor::randn({2, a.z_bg}, rng);
    Tensor zp = Tensor::randn({2, a.z_pix}, rng);
    Tensor x = Tensor::randn({2, 3, 8, 8}, rng);

    MixtureOutput m1 = mixture_forward(m, zf, zb, zp, &x, recon);
    MixtureOutput m2 = mixture_forward(m, zf, zb, zp, &x, recon);
    for (i64 i = 0; i < m1.composed.numel(); ++i)
        CHECK(m1.composed.data()[i] == m2.composed.data()[i]);
    for (i64 i = 0; i < m1.pi_f.numel(); ++i) {
        CHECK(std::abs(m1.pi_f.data()[i] + m1.pi_b.data()[i] - 1.0) < 1e-6);
        CHECK(m1.gamma_f.data()[i] >= 0.0);
        CHECK(m1.gamma_f.data()[i] <= 1.0);
    }
    CHECK_FALSE(m1.gamma_f.requires_grad());
}

TEST_CASE("generator pipeline gradients match finite differences on the miniature config") {
    ArchConfig a = mini_arch();
    Rng rng(43);
    DrcModel m(a, rng);
    ReconConfig recon;
    Tensor zf = Tensor::randn({1, a.z_fg}, rng);
    Tensor zb = Tensor::randn({1, a.z_bg}, rng);
    Tensor zp = Tensor::randn({1, a.z_pix}, rng);
    Tensor x = Tensor::randn({1, 3, 8, 8}, rng, 0.5);

    // The stop-gradients define the objective: gamma and the detached
    // background feature feeding the grid are pinned at their base values,
    // exactly what the blocked gradient differentiates.
    MixtureOutput base = mixture_forward(m, zf, zb, zp, &x, recon);
    Tensor gamma0 = base.gamma_f;
    Tensor feat0 = base.bg_feat.clone();
    auto frozen_objective = [&]() {
        auto [fg_rgb, fg_logit] = generate_foreground(m.gen_fg, zf);
        auto bg = m.gen_bg.region_forward(zb);
        Tensor grid = m.gen_pix.grid_forward(zp, feat0);
        Tensor bg_rgb_re = grid_sample(bg.rgb, grid);
        Tensor bg_logit_re = grid_sample(bg.logit, grid);
        auto [pi_f, pi_b] = gating(fg_logit, bg_logit_re);
        Tensor llf = region_loglik(fg_rgb, x, recon);
        Tensor llb = region_loglik(bg_rgb_re, x, recon);
        return sum(add(mul(gamma0, add(log(add_scalar(pi_f, 1e-8)), llf)),
                       mul(sub(Tensor::full(gamma0.shape(), 1.0), gamma0),
                           add(log(add_scalar(pi_b, 1e-8)), llb))));
    };

    for (auto& p : m.all_parameters()) p.zero_grad();
    Tensor obj = frozen_objective();
    obj.backward();

    Rng pick(47);
    const double h = 1e-5;
    for (auto* gen : {&m.gen_fg, &m.gen_bg, &m.gen_pix}) {
        for (auto& p : gen->parameters()) {
            for (int trial = 0; trial < 3; ++trial) {
                const i64 i = pick.uniform_int(p.numel());
                const double orig = p.data()[i];
                p.data()[i] = orig + h;
                const double fp = frozen_objective().item();
                p.data()[i] = orig - h;
                const double fm = frozen_objective().item();
                p.data()[i] = orig;
                const double fd = (fp - fm) / (2 * h);
                const double ad = p.has_grad() ? p.grad()[i] : 0.0;
                CHECK(std::abs(fd - ad) <=
                      1e-4 * std::max({std::abs(fd), std::abs(ad), 1e-2}));
            }
        }
    }
}
