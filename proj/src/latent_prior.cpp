#include "drc/latent_prior.hpp"

#include <cmath>
#include <sstream>

namespace drc {

const char* role_name(LatentRole role) {
    switch (role) {
        case LatentRole::foreground: return "foreground";
        case LatentRole::background: return "background";
        case LatentRole::reassignment: return "reassignment";
    }
    return "?";
}

EnergyHead::EnergyHead(LatentRole role, i64 z_dim, i64 out_width,
                       i64 hidden_layers, i64 hidden_width, Rng& rng)
    : role_(role), z_dim_(z_dim), out_width_(out_width) {
    if (role != LatentRole::reassignment && out_width < 2)
        throw ConfigError("EnergyHead: symbolic roles need K >= 2");
    if (role == LatentRole::reassignment && out_width != 1)
        throw ConfigError("EnergyHead: reassignment head output width must be 1");
    i64 in = z_dim;
    for (i64 i = 0; i < hidden_layers; ++i) {
        layers_.emplace_back(in, hidden_width, rng);
        in = hidden_width;
    }
    layers_.emplace_back(in, out_width, rng);
}

Tensor EnergyHead::raw_output(const Tensor& z) const {
    if (z.shape().size() != 2 || z.dim(1) != z_dim_)
        throw ConfigError("EnergyHead: latent dimension mismatch (expected " +
                          std::to_string(z_dim_) + ", got " +
                          std::to_string(z.shape().size() == 2 ? z.dim(1) : -1) + ")");
    Tensor h = z;
    for (size_t i = 0; i + 1 < layers_.size(); ++i)
        h = leaky_relu(layers_[i].forward(h), slope_);
    return layers_.back().forward(h);
}

Tensor EnergyHead::symbolic_logits_batch(const Tensor& z) const {
    if (role_ == LatentRole::reassignment)
        throw ConfigError("symbolic_logits: reassignment role has no symbolic head");
    return raw_output(z);
}

Tensor EnergyHead::energy_batch(const Tensor& z) const {
    Tensor out = raw_output(z);
    if (role_ == LatentRole::reassignment) return reshape(out, {z.dim(0)});
    return neg(logsumexp_rows(out));
}

std::vector<Tensor> EnergyHead::parameters() {
    std::vector<Tensor> ps;
    for (auto& l : layers_) {
        ps.push_back(l.w);
        ps.push_back(l.b);
    }
    return ps;
}

std::vector<Tensor> EnergyHead::parameters() const {
    return const_cast<EnergyHead*>(this)->parameters();
}

namespace {

Tensor as_row(const EnergyHead& head, const LatentVector& z) {
    if (z.role != head.role())
        throw ConfigError(std::string("EnergyHead: latent role ") + role_name(z.role) +
                          " does not match head role " + role_name(head.role()));
    return Tensor::from_data({1, static_cast<i64>(z.values.size())}, z.values);
}

}  // namespace

double energy(const EnergyHead& head, const LatentVector& z) {
    return head.energy_batch(as_row(head, z)).item();
}

std::vector<double> symbolic_logits(const EnergyHead& head, const LatentVector& z) {
    Tensor logits = head.symbolic_logits_batch(as_row(head, z));
    return {logits.data(), logits.data() + logits.numel()};
}

Tensor prior_logdensity_grad_batch(const EnergyHead& head, const Tensor& z) {
    if (!all_finite(z)) throw NumericalError("prior_logdensity_grad: non-finite latent input");
    Tensor leaf = z.clone();
    leaf.set_requires_grad(true);
    {
        ParamGradGuard no_params(false);
        Tensor obj = sum(head.energy_batch(leaf));
        obj.backward();
    }
    Tensor out = Tensor::zeros(z.shape());
    const double* ge = leaf.grad();
    const double* zd = z.data();
    double* o = out.data();
    for (i64 i = 0; i < z.numel(); ++i) o[i] = -ge[i] - zd[i];
    if (!all_finite(out)) {
        std::ostringstream ss;
        ss << "prior_logdensity_grad: non-finite gradient for role "
           << role_name(head.role()) << "; |z|max=" << max_abs(z);
        throw NumericalError(ss.str());
    }
    return out;
}

std::vector<double> prior_logdensity_grad(const EnergyHead& head, const LatentVector& z) {
    Tensor g = prior_logdensity_grad_batch(head, as_row(head, z));
    return {g.data(), g.data() + g.numel()};
}

std::vector<double> ebm_param_grad(EnergyHead& head, const Tensor& z_posterior,
                                   const Tensor& z_prior) {
    if (z_posterior.dim(0) == 0 || z_prior.dim(0) == 0)
        throw ConfigError("ebm_param_grad: empty sample batch");
    if (z_posterior.dim(1) != z_prior.dim(1))
        throw ConfigError("ebm_param_grad: latent dimension mismatch between batches");
    auto params = head.parameters();
    // f = -energy; the two Monte-Carlo means are differentiated separately so
    // identical batches cancel exactly.
    auto grads_of = [&](const Tensor& z) {
        for (auto& p : params) p.zero_grad();
        neg(mean(head.energy_batch(z))).backward();
        std::vector<double> flat;
        for (auto& p : params) {
            const double* g = p.grad();
            flat.insert(flat.end(), g, g + p.numel());
        }
        return flat;
    };
    std::vector<double> pos = grads_of(z_posterior);
    std::vector<double> neg_side = grads_of(z_prior);
    for (size_t i = 0; i < pos.size(); ++i) pos[i] -= neg_side[i];
    return pos;
}

}  // namespace drc
