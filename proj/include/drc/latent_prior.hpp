#pragma once

#include <vector>

#include "drc/nn.hpp"
#include "drc/tensor.hpp"

namespace drc {

enum class LatentRole { foreground, background, reassignment };

const char* role_name(LatentRole role);

// One latent vector with its role tag.
struct LatentVector {
    std::vector<double> values;
    LatentRole role = LatentRole::foreground;
};

struct PriorConfig {
    i64 k_fg = 30;
    i64 k_bg = 10;
    i64 hidden_layers = 3;
    i64 hidden_width = 200;
    // reference prior is the isotropic unit Gaussian
};

// Energy head of a latent-space energy-based prior. Symbolic roles emit K
// logits and their energy is -logsumexp(logits); the reassignment role emits
// the scalar energy directly. The model density is
//   p(z) ∝ exp(-energy(z)) · N(z; 0, I).
class EnergyHead {
public:
    EnergyHead() = default;
    EnergyHead(LatentRole role, i64 z_dim, i64 out_width, i64 hidden_layers,
               i64 hidden_width, Rng& rng);

    LatentRole role() const { return role_; }
    i64 z_dim() const { return z_dim_; }
    i64 out_width() const { return out_width_; }

    // [N, z_dim] -> [N, out_width]
    Tensor raw_output(const Tensor& z) const;
    // symbolic roles only: [N, z_dim] -> [N, K]
    Tensor symbolic_logits_batch(const Tensor& z) const;
    // [N, z_dim] -> [N]
    Tensor energy_batch(const Tensor& z) const;

    std::vector<Tensor> parameters();
    std::vector<Tensor> parameters() const;

private:
    LatentRole role_ = LatentRole::foreground;
    i64 z_dim_ = 0;
    i64 out_width_ = 0;
    std::vector<Linear> layers_;
    double slope_ = 0.2;
};

// Spec surface on single latent vectors.
double energy(const EnergyHead& head, const LatentVector& z);
std::vector<double> symbolic_logits(const EnergyHead& head, const LatentVector& z);
std::vector<double> prior_logdensity_grad(const EnergyHead& head, const LatentVector& z);

// Batched gradient of the unnormalized log prior, d/dz [-energy(z) - ||z||^2/2].
Tensor prior_logdensity_grad_batch(const EnergyHead& head, const Tensor& z);

// Monte-Carlo MLE gradient for the head parameters,
// mean[d f(z+)/da] - mean[d f(z-)/da] with f = -energy, flattened in
// parameter order. The ascent direction for maximum likelihood.
std::vector<double> ebm_param_grad(EnergyHead& head, const Tensor& z_posterior,
                                   const Tensor& z_prior);

}  // namespace drc
