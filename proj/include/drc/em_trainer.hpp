#pragma once

#include <functional>
#include <string>
#include <vector>

#include "drc/langevin.hpp"
#include "drc/synth_data.hpp"

namespace drc {

struct TrainConfig {
    i64 iterations = 10000;
    i64 batch = 16;
    double lr_gen = 1e-4;
    double lr_ebm = 2e-5;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.999;
    double weight_pseudo = 0.1;
    double weight_tv = 0.01;
    double weight_ortho = 1.0;
    bool disable_reassignment = false;
    bool disable_pseudo = false;
    bool disable_tv = false;
    bool disable_ortho = false;
    bool short_run_chains = false;
    u64 seed = 0;
    i64 checkpoint_interval = 500;
    i64 keep_checkpoints = 3;
    bool strict_determinism = true;

    void validate() const {
        if (iterations < 1 || batch < 1) throw ConfigError("TrainConfig: iterations and batch must be >= 1");
        // exactly-zero rates are allowed for diagnostics runs
        if (lr_gen < 0 || lr_ebm < 0) throw ConfigError("TrainConfig: learning rates must be >= 0");
        if (weight_pseudo < 0 || weight_tv < 0 || weight_ortho < 0)
            throw ConfigError("TrainConfig: regularizer weights must be >= 0");
    }

    double tv_weight_effective() const { return disable_tv ? 0.0 : weight_tv; }
    double pseudo_weight_effective() const { return disable_pseudo ? 0.0 : weight_pseudo; }
    double ortho_weight_effective() const { return disable_ortho ? 0.0 : weight_ortho; }
};

struct MetricsRecord {
    i64 iter = 0;
    double loss_total = 0, loss_partition = 0, loss_recon = 0;
    double loss_tv = 0, loss_pseudo = 0, loss_ortho = 0;
    double energy_pos_mean = 0, energy_neg_mean = 0;
    double seconds = 0;
    double grid_displacement = 0;  // mean |grid - identity|, diagnostics

    std::string to_json() const;
};

// Cross-entropy of the classifier softmax against a fixed target simplex
// vector; the target carries no gradient.
double pseudo_label_loss(const std::vector<double>& p_target,
                         const std::vector<double>& q_logits);

struct GeneratorLossParts {
    Tensor total;  // graph-bearing scalar
    double partition = 0, recon = 0, tv = 0, pseudo = 0, ortho = 0;
};

// Eq-12-style objective with the three regularizers; gamma is consumed as a
// constant. p_fg / p_bg may be undefined when the pseudo-label term is off.
GeneratorLossParts generator_loss(DrcModel& model, const MixtureOutput& mix,
                                  const Tensor& x, const Tensor& p_fg,
                                  const Tensor& p_bg, const TrainConfig& cfg);

// Deterministic minibatch order: one shuffle per epoch derived from the run
// seed, partial tail batches dropped.
class BatchScheduler {
public:
    BatchScheduler() = default;
    BatchScheduler(i64 n, i64 batch, u64 seed);
    std::vector<i64> next();
    i64 epoch() const { return epoch_; }
    i64 cursor() const { return cursor_; }
    void restore(i64 epoch, i64 cursor);

private:
    void reshuffle();
    i64 n_ = 0, batch_ = 0;
    u64 seed_ = 0;
    i64 epoch_ = -1, cursor_ = 0;
    std::vector<i64> order_;
};

// Full Algorithm-1 state: model, per-group Adam optimizers, persistent
// chains, scheduler and RNG stream.
class Trainer {
public:
    Trainer(const ArchConfig& arch, const TrainConfig& train, const LangevinConfig& lang,
            const ReconConfig& recon, i64 n_examples, u64 config_hash,
            const std::string& config_json);

    MetricsRecord em_iteration(const std::vector<i64>& idx, const Tensor& x);

    // Runs up to train.iterations, appending one JSON record per iteration to
    // metrics_out and checkpointing into out_dir.
    void train(const ImageFolderDataset& data, const std::string& out_dir,
               std::ostream& metrics_out,
               const std::function<void(const MetricsRecord&)>& on_iteration = {});

    void save_checkpoint(const std::string& path) const;
    static Trainer load_checkpoint(const std::string& path);

    // Resume-time replacement of loop/runtime settings; optimizer moments
    // survive, only learning rates are updated.
    void override_runtime_config(const TrainConfig& train, const LangevinConfig& lang,
                                 const ReconConfig& recon);

    DrcModel& model() { return model_; }
    const DrcModel& model() const { return model_; }
    const TrainConfig& train_config() const { return train_; }
    const LangevinConfig& langevin_config() const { return lang_; }
    const ReconConfig& recon_config() const { return recon_; }
    const std::string& config_json() const { return config_json_; }
    u64 config_hash() const { return config_hash_; }
    i64 iteration() const { return iter_; }
    ChainStore& chains() { return chains_; }
    Rng& rng() { return rng_; }

private:
    Trainer() = default;
    void build_optimizers();

    ArchConfig arch_;
    TrainConfig train_;
    LangevinConfig lang_;
    ReconConfig recon_;
    DrcModel model_;
    std::vector<Adam> optimizers_;  // fixed group order
    ChainStore chains_;
    BatchScheduler sched_;
    Rng rng_{0};
    i64 iter_ = 0;
    i64 n_examples_ = 0;
    u64 config_hash_ = 0;
    std::string config_json_;

    friend struct CheckpointCodec;
};

}  // namespace drc
