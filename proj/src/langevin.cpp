#include "drc/langevin.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace drc {

namespace {

void fill_normal(std::vector<double>& v, Rng& rng) {
    for (double& x : v) x = rng.normal();
}

Tensor rows_from(const std::vector<double>& store, i64 d, const std::vector<i64>& idx) {
    Tensor out = Tensor::zeros({static_cast<i64>(idx.size()), d});
    double* o = out.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(o + static_cast<i64>(r) * d, store.data() + idx[r] * d,
                    sizeof(double) * static_cast<size_t>(d));
    return out;
}

void rows_to(std::vector<double>& store, i64 d, const std::vector<i64>& idx,
             const Tensor& z) {
    const double* s = z.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(store.data() + idx[r] * d, s + static_cast<i64>(r) * d,
                    sizeof(double) * static_cast<size_t>(d));
}

void write_vec(std::ostream& os, const std::vector<double>& v) {
    const u64 n = v.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
}

void read_vec(std::istream& is, std::vector<double>& v) {
    u64 n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
}

}  // namespace

ChainStore::ChainStore(i64 n_examples, i64 d_fg, i64 d_bg, i64 d_pix, bool short_run,
                       Rng& rng)
    : n_(n_examples), d_fg_(d_fg), d_bg_(d_bg), d_pix_(d_pix), short_run_(short_run) {
    minus_fg_.resize(static_cast<size_t>(n_ * d_fg_));
    minus_bg_.resize(static_cast<size_t>(n_ * d_bg_));
    minus_pix_.resize(static_cast<size_t>(n_ * d_pix_));
    plus_fg_.resize(static_cast<size_t>(n_ * d_fg_));
    plus_bg_.resize(static_cast<size_t>(n_ * d_bg_));
    plus_pix_.resize(static_cast<size_t>(n_ * d_pix_));
    fill_normal(minus_fg_, rng);
    fill_normal(minus_bg_, rng);
    fill_normal(minus_pix_, rng);
    fill_normal(plus_fg_, rng);
    fill_normal(plus_bg_, rng);
    fill_normal(plus_pix_, rng);
}

LatentTriple ChainStore::gather(ChainTarget target, const std::vector<i64>& idx, Rng& rng) {
    for (i64 i : idx)
        if (i < 0 || i >= n_) throw ConfigError("ChainStore: example index out of range");
    LatentTriple z;
    if (short_run_) {
        const i64 n = static_cast<i64>(idx.size());
        z.fg = Tensor::randn({n, d_fg_}, rng);
        z.bg = Tensor::randn({n, d_bg_}, rng);
        z.pix = Tensor::randn({n, d_pix_}, rng);
        return z;
    }
    const bool plus = target == ChainTarget::posterior;
    z.fg = rows_from(plus ? plus_fg_ : minus_fg_, d_fg_, idx);
    z.bg = rows_from(plus ? plus_bg_ : minus_bg_, d_bg_, idx);
    z.pix = rows_from(plus ? plus_pix_ : minus_pix_, d_pix_, idx);
    return z;
}

void ChainStore::scatter(ChainTarget target, const std::vector<i64>& idx,
                         const LatentTriple& z) {
    if (short_run_) return;  // short-run chains are discarded
    const bool plus = target == ChainTarget::posterior;
    rows_to(plus ? plus_fg_ : minus_fg_, d_fg_, idx, z.fg);
    rows_to(plus ? plus_bg_ : minus_bg_, d_bg_, idx, z.bg);
    rows_to(plus ? plus_pix_ : minus_pix_, d_pix_, idx, z.pix);
}

void ChainStore::save(std::ostream& os) const {
    os.write(reinterpret_cast<const char*>(&n_), sizeof(n_));
    os.write(reinterpret_cast<const char*>(&d_fg_), sizeof(d_fg_));
    os.write(reinterpret_cast<const char*>(&d_bg_), sizeof(d_bg_));
    os.write(reinterpret_cast<const char*>(&d_pix_), sizeof(d_pix_));
    const u64 sr = short_run_ ? 1 : 0;
    os.write(reinterpret_cast<const char*>(&sr), sizeof(sr));
    write_vec(os, minus_fg_);
    write_vec(os, minus_bg_);
    write_vec(os, minus_pix_);
    write_vec(os, plus_fg_);
    write_vec(os, plus_bg_);
    write_vec(os, plus_pix_);
}

void ChainStore::load(std::istream& is) {
    is.read(reinterpret_cast<char*>(&n_), sizeof(n_));
    is.read(reinterpret_cast<char*>(&d_fg_), sizeof(d_fg_));
    is.read(reinterpret_cast<char*>(&d_bg_), sizeof(d_bg_));
    is.read(reinterpret_cast<char*>(&d_pix_), sizeof(d_pix_));
    u64 sr = 0;
    is.read(reinterpret_cast<char*>(&sr), sizeof(sr));
    short_run_ = sr != 0;
    read_vec(is, minus_fg_);
    read_vec(is, minus_bg_);
    read_vec(is, minus_pix_);
    read_vec(is, plus_fg_);
    read_vec(is, plus_bg_);
    read_vec(is, plus_pix_);
    if (!is) throw IoError("ChainStore: truncated chain section");
}

Tensor langevin_step(const Tensor& z, const Tensor& grad_logq, double s,
                     const Tensor* noise) {
    if (z.shape() != grad_logq.shape())
        throw ConfigError("langevin_step: shape mismatch");
    if (s <= 0) throw ConfigError("langevin_step: step size must be > 0");
    Tensor out = Tensor::zeros(z.shape());
    const double* zd = z.data();
    const double* g = grad_logq.data();
    const double* nd = noise ? noise->data() : nullptr;
    const double noise_scale = std::sqrt(2.0 * s);
    double* o = out.data();
    for (i64 i = 0, n = z.numel(); i < n; ++i)
        o[i] = zd[i] + s * g[i] + (nd ? noise_scale * nd[i] : 0.0);
    return out;
}

LatentTriple prior_target_grad(const DrcModel& model, const LatentTriple& z) {
    LatentTriple g;
    g.fg = prior_logdensity_grad_batch(model.ebm_fg, z.fg);
    g.bg = prior_logdensity_grad_batch(model.ebm_bg, z.bg);
    g.pix = prior_logdensity_grad_batch(model.ebm_pix, z.pix);
    return g;
}

PosteriorGrad posterior_target_grad(const DrcModel& model, const LatentTriple& z,
                                    const Tensor& x, const ReconConfig& recon,
                                    double tv_weight, bool disable_reassignment) {
    Tensor zf = z.fg.clone();
    Tensor zb = z.bg.clone();
    Tensor zp = z.pix.clone();
    zf.set_requires_grad(true);
    zb.set_requires_grad(true);
    zp.set_requires_grad(true);

    PosteriorGrad res;
    {
        ParamGradGuard no_params(false);
        MixtureOutput mix =
            mixture_forward(model, zf, zb, zp, &x, recon, disable_reassignment);
        const double eps = 1e-8;    // gate-log guard
        Tensor gamma = mix.gamma_f;  // constant
        Tensor one_minus = Tensor::full(gamma.shape(), 1.0);
        {
            const double* g = gamma.data();
            double* o = one_minus.data();
            for (i64 i = 0; i < gamma.numel(); ++i) o[i] = 1.0 - g[i];
        }
        Tensor term_f = mul(gamma, add(log(add_scalar(mix.pi_f, eps)), mix.loglik_f));
        Tensor term_b = mul(one_minus, add(log(add_scalar(mix.pi_b, eps)), mix.loglik_b));
        Tensor obj = sum(add(term_f, term_b));
        res.partition_recon = obj.item();

        if (tv_weight != 0.0) {
            Tensor tv = sum(tv_norm(mix.bg_rgb_re));
            res.tv = tv.item();
            obj = sub(obj, mul_scalar(tv, tv_weight));
        }

        Tensor en = add(add(sum(model.ebm_fg.energy_batch(zf)),
                            sum(model.ebm_bg.energy_batch(zb))),
                        sum(model.ebm_pix.energy_batch(zp)));
        Tensor znorm = mul_scalar(
            add(add(sum(square(zf)), sum(square(zb))), sum(square(zp))), 0.5);
        res.prior_energy = en.item();
        obj = sub(obj, add(en, znorm));
        obj.backward();
    }

    auto grad_of = [](const Tensor& leaf) {
        Tensor g = Tensor::zeros(leaf.shape());
        if (leaf.grad())
            std::memcpy(g.data(), leaf.grad(),
                        sizeof(double) * static_cast<size_t>(leaf.numel()));
        return g;
    };
    res.grad.fg = grad_of(zf);
    res.grad.bg = grad_of(zb);
    res.grad.pix = grad_of(zp);
    for (const Tensor* g : {&res.grad.fg, &res.grad.bg, &res.grad.pix})
        if (!all_finite(*g)) {
            std::ostringstream ss;
            ss << "posterior_target_grad: non-finite gradient"
               << " (partition+recon=" << res.partition_recon << ", tv=" << res.tv
               << ", prior energy=" << res.prior_energy << ")";
            throw NumericalError(ss.str());
        }
    return res;
}

LatentTriple run_chain(const DrcModel& model, ChainStore& store, ChainTarget target,
                       const std::vector<i64>& idx, const Tensor* x,
                       const LangevinConfig& cfg, const ChainRunConfig& run, Rng& rng) {
    cfg.validate();
    if (target == ChainTarget::posterior && !x)
        throw ConfigError("run_chain: posterior target requires the observation batch");

    LatentTriple z = store.gather(target, idx, rng);
    const double delta = target == ChainTarget::prior ? cfg.delta0 : cfg.delta1;
    const double s = 0.5 * delta * delta;
    i64 steps = target == ChainTarget::prior ? cfg.k0 : cfg.k1;
    if (run.steps_override >= 0) steps = run.steps_override;

    for (i64 step = 0; step < steps; ++step) {
        LatentTriple grad;
        if (target == ChainTarget::prior) {
            grad = prior_target_grad(model, z);
        } else {
            try {
                grad = posterior_target_grad(model, z, *x, run.recon, run.tv_weight,
                                             run.disable_reassignment)
                           .grad;
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " at chain step " +
                                     std::to_string(step));
            }
        }
        for (auto [zt, gt] : {std::pair{&z.fg, &grad.fg}, {&z.bg, &grad.bg},
                              {&z.pix, &grad.pix}}) {
            Tensor noise;
            const Tensor* np = nullptr;
            if (cfg.noise_on) {
                noise = Tensor::randn(zt->shape(), rng);
                np = &noise;
            }
            *zt = langevin_step(*zt, *gt, s, np);
            if (!all_finite(*zt))
                throw NumericalError("run_chain: non-finite latent at step " +
                                     std::to_string(step));
            if (max_abs(*zt) > cfg.divergence_bound)
                throw DivergenceError("run_chain: ||z||_inf exceeded " +
                                      std::to_string(cfg.divergence_bound) +
                                      " at step " + std::to_string(step));
        }
    }
    store.scatter(target, idx, z);
    return z;
}

}  // namespace drc
