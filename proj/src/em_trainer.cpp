#include "drc/em_trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "drc/checkpoint.hpp"

namespace fs = std::filesystem;

namespace drc {

std::string MetricsRecord::to_json() const {
    nlohmann::json j = {
        {"iter", iter},
        {"loss_total", loss_total},
        {"loss_partition", loss_partition},
        {"loss_recon", loss_recon},
        {"loss_tv", loss_tv},
        {"loss_pseudo", loss_pseudo},
        {"loss_ortho", loss_ortho},
        {"energy_pos_mean", energy_pos_mean},
        {"energy_neg_mean", energy_neg_mean},
        {"seconds", seconds},
        {"grid_displacement", grid_displacement},
    };
    return j.dump();
}

double pseudo_label_loss(const std::vector<double>& p_target,
                         const std::vector<double>& q_logits) {
    if (p_target.size() != q_logits.size() || p_target.empty())
        throw ConfigError("pseudo_label_loss: P and Q must have the same K >= 1");
    double sum_p = 0;
    for (double p : p_target) {
        if (p < 0) throw ConfigError("pseudo_label_loss: P has negative entries");
        sum_p += p;
    }
    if (std::abs(sum_p - 1.0) > 1e-6)
        throw ConfigError("pseudo_label_loss: P is not normalized (sum = " +
                          std::to_string(sum_p) + ")");
    const i64 k = static_cast<i64>(q_logits.size());
    Tensor p = Tensor::from_data({1, k}, p_target);
    Tensor q = Tensor::from_data({1, k}, q_logits);
    return cross_entropy_mean(p, q).item();
}

GeneratorLossParts generator_loss(DrcModel& model, const MixtureOutput& mix,
                                  const Tensor& x, const Tensor& p_fg,
                                  const Tensor& p_bg, const TrainConfig& cfg) {
    if (!mix.gamma_f.defined())
        throw ConfigError("generator_loss: mixture output carries no responsibilities");
    (void)x;
    const double eps = 1e-8;
    Tensor gamma = mix.gamma_f;  // constant by construction
    Tensor one_minus = Tensor::full(gamma.shape(), 1.0);
    {
        const double* g = gamma.data();
        double* o = one_minus.data();
        for (i64 i = 0; i < gamma.numel(); ++i) o[i] = 1.0 - g[i];
    }

    Tensor part_map = add(mul(gamma, log(add_scalar(mix.pi_f, eps))),
                          mul(one_minus, log(add_scalar(mix.pi_b, eps))));
    Tensor rec_map = add(mul(gamma, mix.loglik_f), mul(one_minus, mix.loglik_b));
    Tensor loss_part = neg(mean(part_map));
    Tensor loss_rec = neg(mean(rec_map));
    GeneratorLossParts parts;
    parts.partition = loss_part.item();
    parts.recon = loss_rec.item();
    Tensor total = add(loss_part, loss_rec);

    const double w_tv = cfg.tv_weight_effective();
    if (w_tv > 0) {
        Tensor tv = mean(tv_norm(mix.bg_rgb_re));
        parts.tv = tv.item() * w_tv;
        total = add(total, mul_scalar(tv, w_tv));
    }

    const double w_pseudo = cfg.pseudo_weight_effective();
    if (w_pseudo > 0) {
        if (!p_fg.defined() || !p_bg.defined())
            throw ConfigError("generator_loss: pseudo-label targets missing");
        // classifiers see the generated regions before masking; the
        // background one sees the un-reassigned image
        Tensor h_fg = cross_entropy_mean(p_fg, model.cls_fg.forward(mix.fg_rgb));
        Tensor h_bg = cross_entropy_mean(p_bg, model.cls_bg.forward(mix.bg_rgb));
        Tensor h = add(h_fg, h_bg);
        parts.pseudo = h.item() * w_pseudo;
        total = add(total, mul_scalar(h, w_pseudo));
    }

    const double w_ortho = cfg.ortho_weight_effective();
    if (w_ortho > 0) {
        Tensor acc;
        for (auto* gen : {&model.gen_fg, &model.gen_bg})
            for (auto& w : gen->conv_weights()) {
                Tensor r = orthogonal_reg(w);
                acc = acc.defined() ? add(acc, r) : r;
            }
        parts.ortho = acc.item() * w_ortho;
        total = add(total, mul_scalar(acc, w_ortho));
    }

    parts.total = total;
    if (!std::isfinite(total.item())) {
        std::ostringstream ss;
        ss << "generator_loss: non-finite loss (partition=" << parts.partition
           << ", recon=" << parts.recon << ", tv=" << parts.tv
           << ", pseudo=" << parts.pseudo << ", ortho=" << parts.ortho << ")";
        throw NumericalError(ss.str());
    }
    return parts;
}

BatchScheduler::BatchScheduler(i64 n, i64 batch, u64 seed)
    : n_(n), batch_(batch), seed_(seed) {
    if (n < batch) throw ConfigError("BatchScheduler: dataset smaller than one batch");
    reshuffle();
}

void BatchScheduler::reshuffle() {
    ++epoch_;
    cursor_ = 0;
    order_.resize(static_cast<size_t>(n_));
    for (i64 i = 0; i < n_; ++i) order_[static_cast<size_t>(i)] = i;
    Rng rng(splitmix64(seed_ ^ 0x5ced0000ULL) + static_cast<u64>(epoch_));
    for (i64 i = n_ - 1; i > 0; --i) {
        const i64 j = rng.uniform_int(i + 1);
        std::swap(order_[static_cast<size_t>(i)], order_[static_cast<size_t>(j)]);
    }
}

std::vector<i64> BatchScheduler::next() {
    if (cursor_ + batch_ > n_) reshuffle();
    std::vector<i64> idx(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
    cursor_ += batch_;
    return idx;
}

void BatchScheduler::restore(i64 epoch, i64 cursor) {
    epoch_ = epoch - 1;
    reshuffle();  // rebuilds the epoch permutation deterministically
    cursor_ = cursor;
}

Trainer::Trainer(const ArchConfig& arch, const TrainConfig& train,
                 const LangevinConfig& lang, const ReconConfig& recon, i64 n_examples,
                 u64 config_hash, const std::string& config_json)
    : arch_(arch),
      train_(train),
      lang_(lang),
      recon_(recon),
      rng_(splitmix64(train.seed ^ 0x7aa1ULL)),
      n_examples_(n_examples),
      config_hash_(config_hash),
      config_json_(config_json) {
    arch_.validate();
    train_.validate();
    lang_.validate();
    recon_.validate();
    lang_.short_run = train_.short_run_chains;
    Rng init_rng(splitmix64(train.seed ^ 0x1417ULL));
    model_ = DrcModel(arch_, init_rng);
    chains_ = ChainStore(n_examples, arch_.z_fg, arch_.z_bg, arch_.z_pix,
                         train_.short_run_chains, init_rng);
    sched_ = BatchScheduler(n_examples, train_.batch, train_.seed);
    build_optimizers();
}

void Trainer::build_optimizers() {
    optimizers_.clear();
    auto groups = model_.parameter_groups();
    for (size_t g = 0; g < groups.size(); ++g) {
        const double lr = g < 3 ? train_.lr_ebm : train_.lr_gen;
        optimizers_.emplace_back(groups[g], lr, train_.adam_beta1, train_.adam_beta2);
    }
}

MetricsRecord Trainer::em_iteration(const std::vector<i64>& idx, const Tensor& x) {
    const auto t0 = std::chrono::steady_clock::now();
    MetricsRecord rec;
    rec.iter = iter_;

    ChainRunConfig run;
    run.recon = recon_;
    run.tv_weight = train_.tv_weight_effective();
    run.disable_reassignment = train_.disable_reassignment;

    LatentTriple z_minus, z_plus;
    try {
        z_minus = run_chain(model_, chains_, ChainTarget::prior, idx, nullptr, lang_, run, rng_);
        z_plus = run_chain(model_, chains_, ChainTarget::posterior, idx, &x, lang_, run, rng_);
    } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (iteration " +
                             std::to_string(iter_) + ")");
    }

    // pseudo-label targets from the pre-update symbolic heads
    Tensor p_fg, p_bg;
    if (train_.pseudo_weight_effective() > 0) {
        ParamGradGuard no_params(false);
        p_fg = softmax_rows(model_.ebm_fg.symbolic_logits_batch(z_plus.fg)).detach();
        p_bg = softmax_rows(model_.ebm_bg.symbolic_logits_batch(z_plus.bg)).detach();
    }

    // LEBM updates, Eq-3 estimator through one Adam step per head
    struct HeadRef {
        EnergyHead* head;
        Tensor zp, zm;
        size_t opt;
    };
    HeadRef heads[3] = {{&model_.ebm_fg, z_plus.fg, z_minus.fg, 0},
                        {&model_.ebm_bg, z_plus.bg, z_minus.bg, 1},
                        {&model_.ebm_pix, z_plus.pix, z_minus.pix, 2}};
    for (auto& h : heads) {
        optimizers_[h.opt].zero_grad();
        Tensor ep = mean(h.head->energy_batch(h.zp));
        Tensor en = mean(h.head->energy_batch(h.zm));
        rec.energy_pos_mean += ep.item();
        rec.energy_neg_mean += en.item();
        Tensor loss_e = sub(ep, en);
        loss_e.backward();
        optimizers_[h.opt].step();
    }

    // generator + classifier update from the posterior latents
    for (size_t g = 3; g < optimizers_.size(); ++g) optimizers_[g].zero_grad();
    MixtureOutput mix = mixture_forward(model_, z_plus.fg, z_plus.bg, z_plus.pix, &x,
                                        recon_, train_.disable_reassignment);
    GeneratorLossParts parts = generator_loss(model_, mix, x, p_fg, p_bg, train_);
    try {
        parts.total.backward();
    } catch (const NumericalError& e) {
        throw NumericalError(std::string(e.what()) + " (iteration " +
                             std::to_string(iter_) + ")");
    }
    optimizers_[3].step();  // gen_fg
    optimizers_[4].step();  // gen_bg
    if (!train_.disable_reassignment) optimizers_[5].step();
    if (train_.pseudo_weight_effective() > 0) {
        optimizers_[6].step();
        optimizers_[7].step();
    }

    rec.loss_total = parts.total.item();
    rec.loss_partition = parts.partition;
    rec.loss_recon = parts.recon;
    rec.loss_tv = parts.tv;
    rec.loss_pseudo = parts.pseudo;
    rec.loss_ortho = parts.ortho;
    {
        Tensor id = identity_grid(mix.grid.dim(0), mix.grid.dim(2), mix.grid.dim(3));
        double acc = 0;
        const double* g = mix.grid.data();
        const double* i0 = id.data();
        for (i64 i = 0; i < mix.grid.numel(); ++i) acc += std::abs(g[i] - i0[i]);
        rec.grid_displacement = acc / static_cast<double>(mix.grid.numel());
    }
    ++iter_;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

void Trainer::train(const ImageFolderDataset& data, const std::string& out_dir,
                    std::ostream& metrics_out,
                    const std::function<void(const MetricsRecord&)>& on_iteration) {
    if (data.size() == 0) throw ConfigError("train: dataset is empty");
    fs::create_directories(out_dir);
    std::vector<std::string> kept;

    auto checkpoint_now = [&] {
        const std::string path =
            (fs::path(out_dir) / ("ckpt_" + std::to_string(iter_) + ".drc")).string();
        save_checkpoint(path);
        kept.push_back(path);
        while (static_cast<i64>(kept.size()) > train_.keep_checkpoints) {
            std::error_code ec;
            fs::remove(kept.front(), ec);
            kept.erase(kept.begin());
        }
    };

    while (iter_ < train_.iterations) {
        const std::vector<i64> idx = sched_.next();
        Tensor x = data.image_batch(idx);
        MetricsRecord rec;
        try {
            rec = em_iteration(idx, x);
        } catch (...) {
            metrics_out.flush();
            throw;
        }
        metrics_out << rec.to_json() << "\n";
        metrics_out.flush();
        if (on_iteration) on_iteration(rec);
        if (train_.checkpoint_interval > 0 && iter_ % train_.checkpoint_interval == 0 &&
            iter_ < train_.iterations)
            checkpoint_now();
    }
    checkpoint_now();
}

void Trainer::override_runtime_config(const TrainConfig& train, const LangevinConfig& lang,
                                      const ReconConfig& recon) {
    train.validate();
    lang.validate();
    recon.validate();
    train_ = train;
    lang_ = lang;
    lang_.short_run = train_.short_run_chains;
    recon_ = recon;
    for (size_t g = 0; g < optimizers_.size(); ++g)
        optimizers_[g].lr = g < 3 ? train_.lr_ebm : train_.lr_gen;
}

void Trainer::save_checkpoint(const std::string& path) const {
    CheckpointCodec::save(path, *this);
}

Trainer Trainer::load_checkpoint(const std::string& path) {
    return CheckpointCodec::load(path);
}

}  // namespace drc
