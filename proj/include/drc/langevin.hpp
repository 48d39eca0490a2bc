#pragma once

#include <istream>
#include <ostream>
#include <vector>

#include "drc/moe_generator.hpp"

namespace drc {

// Step sizes follow the delta convention of the reference pseudocode:
// z' = z - (delta^2/2) * grad(-log Q) + delta * noise, i.e. Eq-style
// s = delta^2 / 2.
struct LangevinConfig {
    i64 k0 = 60;            // prior steps
    i64 k1 = 40;            // posterior steps
    double delta0 = 0.4;    // prior step size
    double delta1 = 0.1;    // posterior step size
    i64 test_steps = 500;   // posterior steps at inference
    bool noise_on = true;
    double divergence_bound = 1e3;  // on ||z||_inf
    bool short_run = false;

    void validate() const {
        if (k0 < 0 || k1 < 0 || test_steps < 0)
            throw ConfigError("LangevinConfig: step counts must be >= 0");
        if (delta0 <= 0 || delta1 <= 0)
            throw ConfigError("LangevinConfig: step sizes must be > 0");
    }
};

struct LatentTriple {
    Tensor fg, bg, pix;  // each [N, D_role]
};

enum class ChainTarget { prior, posterior };

// Per-example persistent latents for both chains, initialized from the unit
// Gaussian. In short-run mode the store re-draws fresh latents on every
// gather instead of reading back.
class ChainStore {
public:
    ChainStore() = default;
    ChainStore(i64 n_examples, i64 d_fg, i64 d_bg, i64 d_pix, bool short_run, Rng& rng);

    i64 size() const { return n_; }
    bool short_run() const { return short_run_; }

    LatentTriple gather(ChainTarget target, const std::vector<i64>& idx, Rng& rng);
    void scatter(ChainTarget target, const std::vector<i64>& idx, const LatentTriple& z);

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    i64 n_ = 0, d_fg_ = 0, d_bg_ = 0, d_pix_ = 0;
    bool short_run_ = false;
    // [n, d] row-major per role, prior (z-) then posterior (z+)
    std::vector<double> minus_fg_, minus_bg_, minus_pix_;
    std::vector<double> plus_fg_, plus_bg_, plus_pix_;
};

// One Langevin update, Eq-form z' = z + s*grad + sqrt(2s)*noise.
Tensor langevin_step(const Tensor& z, const Tensor& grad_logq, double s,
                     const Tensor* noise);

// Gradient of the unnormalized log prior for each role; the joint prior
// factorizes over roles.
LatentTriple prior_target_grad(const DrcModel& model, const LatentTriple& z);

struct PosteriorGrad {
    LatentTriple grad;
    // term magnitudes of the surrogate objective, for diagnostics
    double partition_recon = 0, tv = 0, prior_energy = 0;
};

// Gradient of the surrogate posterior target
//   log p(z) + sum_i [ gamma_i (log pi_f + ll_f) + (1-gamma_i)(log pi_b + ll_b) ]
//   - tv_weight * TV(reassigned background)
// with the responsibilities frozen at their current value.
PosteriorGrad posterior_target_grad(const DrcModel& model, const LatentTriple& z,
                                    const Tensor& x, const ReconConfig& recon,
                                    double tv_weight, bool disable_reassignment);

struct ChainRunConfig {
    ReconConfig recon;
    double tv_weight = 0.01;
    bool disable_reassignment = false;
    i64 steps_override = -1;  // >= 0 replaces k0/k1
};

// Advances the chains of the given examples; persistent mode writes results
// back to the store. For the posterior target x must hold the matching batch.
LatentTriple run_chain(const DrcModel& model, ChainStore& store, ChainTarget target,
                       const std::vector<i64>& idx, const Tensor* x,
                       const LangevinConfig& cfg, const ChainRunConfig& run, Rng& rng);

}  // namespace drc
