#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drc/langevin.hpp"
#include "drc/synth_data.hpp"

namespace drc {

using BinaryMask = std::vector<std::uint8_t>;  // H*W, 0/1

// pixel true iff pi_f > threshold (strict)
BinaryMask binarize(const Tensor& pi_f, double threshold = 0.5);

// |A∩B| / |A∪B|; both empty -> 1
double iou(const BinaryMask& a, const BinaryMask& b);
// 2|A∩B| / (|A|+|B|); both empty -> 1
double dice(const BinaryMask& a, const BinaryMask& b);

// Identity-agnostic comparison: score the ground truth against each
// prediction, keep the best. Used only for permutation-mode reports.
std::pair<double, int> best_permutation_score(const BinaryMask& pred_a,
                                              const BinaryMask& pred_b,
                                              const BinaryMask& gt,
                                              bool use_dice = false);

struct SampleScore {
    i64 id = 0;
    double iou = 0;
    double dice = 0;
};

struct ScoreReport {
    std::vector<SampleScore> samples;
    double mean_iou = 0;
    double mean_dice = 0;
    bool permuted = false;
    i64 steps = 0;
    double threshold = 0.5;

    std::string to_json() const;
    std::string to_csv() const;
};

struct EvalConfig {
    LangevinConfig langevin;
    ReconConfig recon;
    double tv_weight = 0.01;
    bool disable_reassignment = false;
    double threshold = 0.5;
    bool permute = false;
    u64 seed = 0;
    i64 batch = 16;
    i64 steps_override = -1;  // >=0 replaces langevin.test_steps
};

// For each sample: fresh Gaussian latents, test_steps posterior Langevin
// steps, binarize pi_f, score against the ground-truth mask.
ScoreReport evaluate_run(const DrcModel& model, const ImageFolderDataset& data,
                         const EvalConfig& cfg);

}  // namespace drc
