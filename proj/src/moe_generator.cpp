#include "drc/moe_generator.hpp"

#include <cmath>

namespace drc {

std::pair<Tensor, Tensor> generate_foreground(const GeneratorNet& gen, const Tensor& z1) {
    auto out = gen.region_forward(z1);
    return {out.rgb, out.logit};
}

BackgroundOut generate_background(const GeneratorNet& gen_bg, const GeneratorNet& gen_pix,
                                  const Tensor& z2, const Tensor& z_pix,
                                  bool disable_reassignment) {
    BackgroundOut out;
    auto bg = gen_bg.region_forward(z2);
    out.rgb = bg.rgb;
    out.logit = bg.logit;
    out.feat = bg.feat;
    if (disable_reassignment) {
        out.grid = identity_grid(z2.dim(0), bg.rgb.dim(2), bg.rgb.dim(3));
        out.rgb_re = bg.rgb;
        out.logit_re = bg.logit;
        return out;
    }
    out.grid = gen_pix.grid_forward(z_pix, bg.feat.detach());
    out.rgb_re = grid_sample(bg.rgb, out.grid);
    out.logit_re = grid_sample(bg.logit, out.grid);
    return out;
}

std::pair<Tensor, Tensor> gating(const Tensor& fg_logit, const Tensor& bg_logit_re) {
    if (fg_logit.shape() != bg_logit_re.shape())
        throw ConfigError("gating: logit shapes differ");
    Tensor pi_f = sigmoid(sub(fg_logit, bg_logit_re));
    Tensor pi_b = sigmoid(sub(bg_logit_re, fg_logit));
    return {pi_f, pi_b};
}

Tensor region_loglik(const Tensor& region_rgb, const Tensor& x, const ReconConfig& cfg) {
    if (region_rgb.shape() != x.shape())
        throw ConfigError("region_loglik: shapes differ");
    cfg.validate();
    Tensor diff = sub(region_rgb, x);
    Tensor d = cfg.norm == ReconConfig::Norm::l1 ? sum_channels_keepdim(abs(diff))
                                                 : sum_channels_keepdim(square(diff));
    return mul_scalar(d, -1.0 / (2.0 * cfg.sigma * cfg.sigma));
}

Tensor responsibilities(const Tensor& pi_f, const Tensor& pi_b, const Tensor& loglik_f,
                        const Tensor& loglik_b, double epsilon) {
    if (pi_f.shape() != pi_b.shape() || pi_f.shape() != loglik_f.shape() ||
        pi_f.shape() != loglik_b.shape())
        throw ConfigError("responsibilities: inputs must be aligned per pixel");
    Tensor out = Tensor::zeros(pi_f.shape());
    const double* pf = pi_f.data();
    const double* pb = pi_b.data();
    const double* lf = loglik_f.data();
    const double* lb = loglik_b.data();
    double* g = out.data();
    for (i64 i = 0, n = out.numel(); i < n; ++i) {
        const double m = std::max(lf[i], lb[i]);
        const double ef = pf[i] * std::exp(lf[i] - m);
        const double eb = pb[i] * std::exp(lb[i] - m);
        // epsilon guards the unscaled formula; e^{-m} saturates rather than
        // overflowing when both likelihoods are far below zero
        const double eps_m = epsilon == 0.0 ? 0.0 : epsilon * std::exp(std::min(-m, 700.0));
        g[i] = ef / (ef + eb + eps_m);
    }
    return out;
}

Tensor compose(const Tensor& fg_rgb, const Tensor& bg_rgb_re, const Tensor& pi_f,
               const Tensor& pi_b) {
    return add(bcast_mul(fg_rgb, pi_f), bcast_mul(bg_rgb_re, pi_b));
}

MixtureOutput mixture_forward(const DrcModel& model, const Tensor& z_fg,
                              const Tensor& z_bg, const Tensor& z_pix,
                              const Tensor* x, const ReconConfig& cfg,
                              bool disable_reassignment) {
    MixtureOutput mix;
    auto [fg_rgb, fg_logit] = generate_foreground(model.gen_fg, z_fg);
    mix.fg_rgb = fg_rgb;
    mix.fg_logit = fg_logit;
    auto bg = generate_background(model.gen_bg, model.gen_pix, z_bg, z_pix,
                                  disable_reassignment);
    mix.bg_rgb = bg.rgb;
    mix.bg_logit = bg.logit;
    mix.bg_feat = bg.feat;
    mix.grid = bg.grid;
    mix.bg_rgb_re = bg.rgb_re;
    mix.bg_logit_re = bg.logit_re;
    auto [pi_f, pi_b] = gating(mix.fg_logit, mix.bg_logit_re);
    mix.pi_f = pi_f;
    mix.pi_b = pi_b;
    mix.composed = compose(mix.fg_rgb, mix.bg_rgb_re, pi_f, pi_b);
    if (x) {
        mix.loglik_f = region_loglik(mix.fg_rgb, *x, cfg);
        mix.loglik_b = region_loglik(mix.bg_rgb_re, *x, cfg);
        mix.gamma_f = responsibilities(pi_f.detach(), pi_b.detach(),
                                       mix.loglik_f.detach(), mix.loglik_b.detach(),
                                       cfg.epsilon);
    }
    return mix;
}

}  // namespace drc
