#include "drc/eval_metrics.hpp"

#include <sstream>

#include <json.hpp>

using nlohmann::json;

namespace drc {

BinaryMask binarize(const Tensor& pi_f, double threshold) {
    if (threshold <= 0.0 || threshold >= 1.0) {
        if (threshold != 0.0)  // threshold 0 is allowed as the degenerate all-true case
            throw ConfigError("binarize: threshold must lie in (0,1)");
    }
    BinaryMask m(static_cast<size_t>(pi_f.numel()));
    const double* d = pi_f.data();
    for (size_t i = 0; i < m.size(); ++i) m[i] = d[i] > threshold ? 1 : 0;
    return m;
}

namespace {

void check_shapes(const BinaryMask& a, const BinaryMask& b, const char* op) {
    if (a.size() != b.size())
        throw ConfigError(std::string(op) + ": mask shapes differ");
}

}  // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
    check_shapes(a, b, "iou");
    i64 inter = 0, uni = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        uni += a[i] || b[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
    check_shapes(a, b, "dice");
    i64 inter = 0, total = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        inter += a[i] && b[i];
        total += a[i] + b[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

std::pair<double, int> best_permutation_score(const BinaryMask& pred_a,
                                              const BinaryMask& pred_b,
                                              const BinaryMask& gt, bool use_dice) {
    check_shapes(pred_a, gt, "best_permutation_score");
    check_shapes(pred_b, gt, "best_permutation_score");
    const double sa = use_dice ? dice(pred_a, gt) : iou(pred_a, gt);
    const double sb = use_dice ? dice(pred_b, gt) : iou(pred_b, gt);
    return sa >= sb ? std::pair{sa, 0} : std::pair{sb, 1};
}

std::string ScoreReport::to_json() const {
    json rows = json::array();
    for (const auto& s : samples)
        rows.push_back({{"id", s.id}, {"iou", s.iou}, {"dice", s.dice}});
    json doc = {
        {"mean_iou", mean_iou},       {"mean_dice", mean_dice},
        {"n", samples.size()},        {"permuted", permuted},
        {"posterior_steps", steps},   {"threshold", threshold},
        {"samples", rows},
    };
    return doc.dump(2) + "\n";
}

std::string ScoreReport::to_csv() const {
    std::ostringstream ss;
    ss << "id,iou,dice\n";
    for (const auto& s : samples) ss << s.id << "," << s.iou << "," << s.dice << "\n";
    return ss.str();
}

ScoreReport evaluate_run(const DrcModel& model, const ImageFolderDataset& data,
                         const EvalConfig& cfg) {
    if (data.size() == 0) throw ConfigError("evaluate_run: dataset is empty");
    if (!data.has_masks())
        throw ConfigError("evaluate_run: dataset has no ground-truth masks");

    LangevinConfig lang = cfg.langevin;
    lang.validate();
    const i64 steps = cfg.steps_override >= 0 ? cfg.steps_override : lang.test_steps;

    Rng rng(cfg.seed ^ 0xe7a1ULL);
    ScoreReport report;
    report.permuted = cfg.permute;
    report.steps = steps;
    report.threshold = cfg.threshold;

    ChainRunConfig run;
    run.recon = cfg.recon;
    run.tv_weight = cfg.tv_weight;
    run.disable_reassignment = cfg.disable_reassignment;
    run.steps_override = steps;

    const i64 n = data.size();
    for (i64 start = 0; start < n; start += cfg.batch) {
        std::vector<i64> idx;
        for (i64 i = start; i < std::min(n, start + cfg.batch); ++i) idx.push_back(i);
        Tensor x = data.image_batch(idx);

        // fresh chains from the unit Gaussian for every evaluation batch
        ChainStore chains(static_cast<i64>(idx.size()), model.arch.z_fg,
                          model.arch.z_bg, model.arch.z_pix, false, rng);
        std::vector<i64> local(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) local[i] = static_cast<i64>(i);
        LatentTriple z;
        try {
            z = run_chain(model, chains, ChainTarget::posterior, local, &x, lang, run, rng);
        } catch (const Error& e) {
            throw NumericalError(std::string(e.what()) + " (evaluating samples starting at " +
                                 std::to_string(start) + ")");
        }

        MixtureOutput mix =
            mixture_forward(model, z.fg, z.bg, z.pix, nullptr, cfg.recon,
                            cfg.disable_reassignment);
        const i64 hw = data.resolution() * data.resolution();
        for (size_t r = 0; r < idx.size(); ++r) {
            Tensor pf = Tensor::zeros({1, 1, data.resolution(), data.resolution()});
            std::copy(mix.pi_f.data() + static_cast<i64>(r) * hw,
                      mix.pi_f.data() + static_cast<i64>(r + 1) * hw, pf.data());
            BinaryMask pred = binarize(pf, cfg.threshold);
            const BinaryMask& gt = data.mask(idx[r]);
            SampleScore s;
            s.id = idx[r];
            if (cfg.permute) {
                BinaryMask inv(pred.size());
                for (size_t i = 0; i < pred.size(); ++i) inv[i] = pred[i] ? 0 : 1;
                s.iou = best_permutation_score(pred, inv, gt, false).first;
                s.dice = best_permutation_score(pred, inv, gt, true).first;
            } else {
                s.iou = iou(pred, gt);
                s.dice = dice(pred, gt);
            }
            report.samples.push_back(s);
        }
    }

    double si = 0, sd = 0;
    for (const auto& s : report.samples) {
        si += s.iou;
        sd += s.dice;
    }
    report.mean_iou = si / static_cast<double>(report.samples.size());
    report.mean_dice = sd / static_cast<double>(report.samples.size());
    return report;
}

}  // namespace drc
