#pragma once

#include "drc/model.hpp"
#include "drc/tensor.hpp"

namespace drc {

struct ReconConfig {
    enum class Norm { l1, squared_l2 };
    double sigma = 0.3;
    Norm norm = Norm::l1;
    double epsilon = 1e-8;

    void validate() const {
        if (sigma <= 0) throw ConfigError("ReconConfig: sigma must be > 0");
        if (epsilon < 0) throw ConfigError("ReconConfig: epsilon must be >= 0");
    }
};

// Everything one pass of the two-expert model produces. Log-likelihood maps
// and responsibilities are present only when an observation was supplied.
struct MixtureOutput {
    Tensor fg_rgb, fg_logit;
    Tensor bg_rgb, bg_logit, bg_feat;
    Tensor grid;
    Tensor bg_rgb_re, bg_logit_re;
    Tensor pi_f, pi_b;          // [N,1,H,W]
    Tensor loglik_f, loglik_b;  // [N,1,H,W]
    Tensor gamma_f;             // [N,1,H,W], constant (stop-gradient)
    Tensor composed;
};

// fg generator head
std::pair<Tensor, Tensor> generate_foreground(const GeneratorNet& gen, const Tensor& z1);

struct BackgroundOut {
    Tensor rgb, logit, feat, grid, rgb_re, logit_re;
};
// Background with learned pixel re-assignment. The grid is produced from
// z_pix and the gradient-blocked background feature; rgb and logit are
// resampled through the same grid. disable_reassignment pins the identity
// grid.
BackgroundOut generate_background(const GeneratorNet& gen_bg, const GeneratorNet& gen_pix,
                                  const Tensor& z2, const Tensor& z_pix,
                                  bool disable_reassignment = false);

// Bilinear re-sampling at normalized source coordinates.
inline Tensor resample(const Tensor& image, const Tensor& grid) {
    return grid_sample(image, grid);
}

// Per-pixel two-way softmax over the foreground and re-assigned background
// logits.
std::pair<Tensor, Tensor> gating(const Tensor& fg_logit, const Tensor& bg_logit_re);

// -d(region, x) / (2 sigma^2), d = channel-summed L1 or squared L2.
Tensor region_loglik(const Tensor& region_rgb, const Tensor& x, const ReconConfig& cfg);

// Two-component Bayes posterior for the foreground expert, computed outside
// the graph (stop-gradient) in max-subtracted form.
Tensor responsibilities(const Tensor& pi_f, const Tensor& pi_b, const Tensor& loglik_f,
                        const Tensor& loglik_b, double epsilon);

// Per-pixel convex combination of the two region images.
Tensor compose(const Tensor& fg_rgb, const Tensor& bg_rgb_re, const Tensor& pi_f,
               const Tensor& pi_b);

// Full pass: generate both regions, gate, and, when x is given, attach
// likelihoods and responsibilities.
MixtureOutput mixture_forward(const DrcModel& model, const Tensor& z_fg,
                              const Tensor& z_bg, const Tensor& z_pix,
                              const Tensor* x, const ReconConfig& cfg,
                              bool disable_reassignment = false);

}  // namespace drc
