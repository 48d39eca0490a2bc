#include <doctest.h>

#include <cmath>
#include <vector>

#include "drc/latent_prior.hpp"

using namespace drc;

namespace {

void zero_params(EnergyHead& head) {
    for (auto& p : head.parameters())
        std::fill(p.data(), p.data() + p.numel(), 0.0);
}

LatentVector make_latent(std::vector<double> v, LatentRole role) {
    return LatentVector{std::move(v), role};
}

}  // namespace

TEST_CASE("zero-initialized heads: symbolic energy is -log K, reassignment is 0") {
    Rng rng(1);
    EnergyHead sym(LatentRole::foreground, 4, 5, 3, 16, rng);
    zero_params(sym);
    CHECK(energy(sym, make_latent({0.3, -1.0, 0.2, 2.0}, LatentRole::foreground)) ==
          doctest::Approx(-std::log(5.0)).epsilon(1e-14));

    EnergyHead re(LatentRole::reassignment, 4, 1, 3, 16, rng);
    zero_params(re);
    CHECK(energy(re, make_latent({0.3, -1.0, 0.2, 2.0}, LatentRole::reassignment)) == 0.0);
}

TEST_CASE("K=2 head with zero logits gives energy -ln 2") {
    Rng rng(2);
    EnergyHead head(LatentRole::background, 3, 2, 2, 8, rng);
    zero_params(head);
    CHECK(energy(head, make_latent({1.0, 2.0, 3.0}, LatentRole::background)) ==
          doctest::Approx(-std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("energy against an independent forward-pass re-implementation") {
    Rng rng(3);
    const i64 d = 1, k = 3, hidden = 7, layers = 2;
    EnergyHead head(LatentRole::foreground, d, k, layers, hidden, rng);
    auto params = head.parameters();

    // hand-rolled forward pass over the same weights
    auto manual_energy = [&](double z) {
        std::vector<double> h{z};
        for (size_t li = 0; li + 1 < params.size() / 2; ++li) {
            const Tensor& w = params[2 * li];
            const Tensor& b = params[2 * li + 1];
            std::vector<double> next(static_cast<size_t>(w.dim(0)));
            for (i64 o = 0; o < w.dim(0); ++o) {
                double acc = b.data()[o];
                for (i64 i = 0; i < w.dim(1); ++i)
                    acc += w.data()[o * w.dim(1) + i] * h[static_cast<size_t>(i)];
                next[static_cast<size_t>(o)] = acc > 0 ? acc : 0.2 * acc;
            }
            h = next;
        }
        const Tensor& w = params[params.size() - 2];
        const Tensor& b = params[params.size() - 1];
        std::vector<double> logits(static_cast<size_t>(k));
        double m = -1e300;
        for (i64 o = 0; o < k; ++o) {
            double acc = b.data()[o];
            for (i64 i = 0; i < w.dim(1); ++i)
                acc += w.data()[o * w.dim(1) + i] * h[static_cast<size_t>(i)];
            logits[static_cast<size_t>(o)] = acc;
            m = std::max(m, acc);
        }
        double lse = 0;
        for (double l : logits) lse += std::exp(l - m);
        return -(m + std::log(lse));
    };

    for (double z = -2.0; z <= 2.0; z += 0.25) {
        const double mine = energy(head, make_latent({z}, LatentRole::foreground));
        const double want = manual_energy(z);
        CHECK(std::abs(mine - want) <= 1e-10 * std::max(1.0, std::abs(want)));
    }
}

TEST_CASE("symbolic logits: uniform softmax at zero init, analytic case, determinism") {
    Rng rng(4);
    EnergyHead head(LatentRole::foreground, 2, 4, 2, 8, rng);
    zero_params(head);
    auto logits = symbolic_logits(head, make_latent({0.5, -0.5}, LatentRole::foreground));
    Tensor sm = softmax_rows(Tensor::from_data({1, 4}, logits));
    for (i64 i = 0; i < 4; ++i) CHECK(sm.data()[i] == doctest::Approx(0.25).epsilon(1e-12));

    // pin logits (ln 3, 0) through the output bias
    EnergyHead head2(LatentRole::foreground, 2, 2, 1, 4, rng);
    zero_params(head2);
    head2.parameters()[3].data()[0] = std::log(3.0);
    auto l2 = symbolic_logits(head2, make_latent({1.0, 1.0}, LatentRole::foreground));
    Tensor sm2 = softmax_rows(Tensor::from_data({1, 2}, l2));
    CHECK(sm2.data()[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(sm2.data()[1] == doctest::Approx(0.25).epsilon(1e-12));

    // bit-identical logits across identically seeded constructions
    Rng ra(77), rb(77);
    EnergyHead ha(LatentRole::background, 3, 5, 3, 16, ra);
    EnergyHead hb(LatentRole::background, 3, 5, 3, 16, rb);
    auto la = symbolic_logits(ha, make_latent({0.1, 0.2, 0.3}, LatentRole::background));
    auto lb = symbolic_logits(hb, make_latent({0.1, 0.2, 0.3}, LatentRole::background));
    for (size_t i = 0; i < la.size(); ++i) CHECK(la[i] == lb[i]);
}

TEST_CASE("symbolic_logits on the reassignment role is a usage error") {
    Rng rng(5);
    EnergyHead re(LatentRole::reassignment, 4, 1, 2, 8, rng);
    CHECK_THROWS_AS(symbolic_logits(re, make_latent({1, 2, 3, 4}, LatentRole::reassignment)),
                    ConfigError);
    EnergyHead sym(LatentRole::foreground, 4, 3, 2, 8, rng);
    CHECK_THROWS_AS(energy(sym, make_latent({1, 2}, LatentRole::foreground)), ConfigError);
}

TEST_CASE("prior log-density gradient: Gaussian-only cases and finite differences") {
    Rng rng(6);
    EnergyHead head(LatentRole::reassignment, 3, 1, 2, 8, rng);
    zero_params(head);
    auto g = prior_logdensity_grad(head, make_latent({0.5, -2.0, 1.5}, LatentRole::reassignment));
    CHECK(g[0] == doctest::Approx(-0.5).epsilon(1e-14));
    CHECK(g[1] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(g[2] == doctest::Approx(-1.5).epsilon(1e-14));

    auto g0 = prior_logdensity_grad(head, make_latent({0, 0, 0}, LatentRole::reassignment));
    for (double v : g0) CHECK(v == 0.0);

    // FD oracle at 10 random points, h = 1e-5
    EnergyHead live(LatentRole::foreground, 3, 4, 2, 16, rng);
    const double h = 1e-5;
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> z(3);
        for (auto& v : z) v = rng.normal();
        auto grad = prior_logdensity_grad(live, make_latent(z, LatentRole::foreground));
        for (size_t i = 0; i < z.size(); ++i) {
            auto obj = [&](double delta) {
                std::vector<double> zp = z;
                zp[i] += delta;
                double nsq = 0;
                for (double v : zp) nsq += v * v;
                return -energy(live, make_latent(zp, LatentRole::foreground)) - 0.5 * nsq;
            };
            const double fd = (obj(h) - obj(-h)) / (2 * h);
            CHECK(std::abs(fd - grad[i]) <=
                  1e-6 * std::max({std::abs(fd), std::abs(grad[i]), 1e-3}));
        }
    }
}

TEST_CASE("ebm_param_grad: zero for identical batches, antisymmetric, analytic linear case") {
    Rng rng(7);
    EnergyHead head(LatentRole::foreground, 2, 3, 2, 8, rng);
    Tensor z = Tensor::randn({5, 2}, rng);
    auto gz = ebm_param_grad(head, z, z.clone());
    for (double v : gz) CHECK(v == 0.0);

    Tensor za = Tensor::randn({4, 2}, rng);
    Tensor zb = Tensor::randn({6, 2}, rng);
    auto gab = ebm_param_grad(head, za, zb);
    auto gba = ebm_param_grad(head, zb, za);
    REQUIRE(gab.size() == gba.size());
    for (size_t i = 0; i < gab.size(); ++i) CHECK(gab[i] == -gba[i]);

    CHECK_THROWS_AS(ebm_param_grad(head, Tensor::zeros({0, 2}), zb), ConfigError);

    // d=1 linear energy e = W z (+0 bias): f = alpha z with alpha = -W.
    // Posterior ~ N(1.5, 0.5^2), prior drawn exactly from the tilted prior
    // N(alpha, 1). Analytic gradient in alpha: 1.5 - alpha.
    Rng rs(8);
    EnergyHead lin(LatentRole::reassignment, 1, 1, 0, 1, rs);
    lin.parameters()[0].data()[0] = -0.7;  // alpha = 0.7
    lin.parameters()[1].data()[0] = 0.0;
    const i64 n = 100000;
    Tensor zpos = Tensor::zeros({n, 1});
    Tensor zneg = Tensor::zeros({n, 1});
    for (i64 i = 0; i < n; ++i) {
        zpos.data()[i] = 1.5 + 0.5 * rs.normal();
        zneg.data()[i] = 0.7 + rs.normal();
    }
    auto grad = ebm_param_grad(lin, zpos, zneg);
    const double alpha_grad = -grad[0];
    CHECK(std::abs(alpha_grad - 0.8) < 0.02 * 0.8 + 0.01);

    // single-sample direct substitution: z+=(1), z-=(0) -> d/dalpha = 1
    Tensor one = Tensor::from_data({1, 1}, {1.0});
    Tensor zero = Tensor::from_data({1, 1}, {0.0});
    auto g1 = ebm_param_grad(lin, one, zero);
    CHECK(-g1[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("logit shift: softmax invariant, energy shifts by the constant") {
    Rng rng(9);
    EnergyHead head(LatentRole::foreground, 3, 4, 2, 16, rng);
    LatentVector z = make_latent({0.4, -0.2, 1.1}, LatentRole::foreground);
    auto logits = symbolic_logits(head, z);
    const double e0 = energy(head, z);
    Tensor sm0 = softmax_rows(Tensor::from_data({1, 4}, logits));

    const double c = 1.37;
    head.parameters().back();  // output bias is the last parameter
    auto params = head.parameters();
    Tensor out_bias = params.back();
    for (i64 i = 0; i < out_bias.numel(); ++i) out_bias.data()[i] += c;

    auto logits2 = symbolic_logits(head, z);
    const double e1 = energy(head, z);
    Tensor sm1 = softmax_rows(Tensor::from_data({1, 4}, logits2));
    for (i64 i = 0; i < 4; ++i) {
        CHECK(std::abs(sm1.data()[i] - sm0.data()[i]) < 1e-9);
        CHECK(sm0.data()[i] > 0.0);
        CHECK(sm0.data()[i] < 1.0);
    }
    CHECK(std::abs((e1 - e0) + c) < 1e-9);

    double total = 0;
    for (i64 i = 0; i < 4; ++i) total += sm0.data()[i];
    CHECK(std::abs(total - 1.0) < 1e-9);
}
