#include <omp.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "drc/checkpoint.hpp"
#include "drc/config.hpp"
#include "drc/eval_metrics.hpp"
#include "drc/image_io.hpp"

namespace fs = std::filesystem;
using namespace drc;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitNumerical = 3;

void apply_thread_cap() {
    if (const char* env = std::getenv("DRC_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) omp_set_num_threads(n);
    }
}

std::string pad5(i64 v) {
    std::string s = std::to_string(v);
    while (s.size() < 5) s.insert(s.begin(), '0');
    return s;
}

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return RunConfig::from_file(path);
}

int cmd_gen_data(const std::string& config_path, const std::string& out, i64 n,
                 i64 seed_flag) {
    RunConfig cfg = load_config_or_default(config_path);
    if (n < 1) throw ConfigError("gen-data: --n must be >= 1");
    const u64 seed = seed_flag >= 0 ? static_cast<u64>(seed_flag) : cfg.seed;
    write_dataset(n, out, cfg.dataset, seed);
    RunConfig echo = cfg;
    echo.seed = seed;
    echo.echo_to(out);
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data,
              const std::string& out, const std::string& resume) {
    RunConfig cfg = load_config_or_default(config_path);
    auto dataset = ImageFolderDataset::ingest_folder(data, cfg.arch.image_size);
    cfg.echo_to(out);

    std::unique_ptr<Trainer> trainer;
    std::ios_base::openmode mode = std::ios::out;
    if (!resume.empty()) {
        trainer = std::make_unique<Trainer>(Trainer::load_checkpoint(resume));
        trainer->override_runtime_config(cfg.train, cfg.langevin, cfg.recon);
        mode = std::ios::app;
    } else {
        trainer = std::make_unique<Trainer>(cfg.arch, cfg.train, cfg.langevin, cfg.recon,
                                            dataset.size(), cfg.hash(), cfg.to_json_text());
    }

    std::ofstream metrics((fs::path(out) / "metrics.jsonl").string(), mode);
    if (!metrics) throw IoError("train: cannot open metrics log in " + out);
    trainer->train(dataset, out, metrics);
    std::cout << "finished at iteration " << trainer->iteration() << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& data, const std::string& out,
              i64 steps, i64 seed_flag) {
    Trainer trainer = Trainer::load_checkpoint(ckpt);
    RunConfig cfg = RunConfig::from_json_text(trainer.config_json());
    auto dataset = ImageFolderDataset::ingest_folder(data, cfg.arch.image_size);
    fs::create_directories(out);
    cfg.echo_to(out);

    const u64 seed = seed_flag >= 0 ? static_cast<u64>(seed_flag) : cfg.seed;
    const i64 run_steps = steps >= 0 ? steps : cfg.langevin.test_steps;

    Rng rng(seed ^ 0x1f3aULL);
    ChainRunConfig run;
    run.recon = cfg.recon;
    run.tv_weight = cfg.train.tv_weight_effective();
    run.disable_reassignment = cfg.train.disable_reassignment;
    run.steps_override = run_steps;

    const DrcModel& model = trainer.model();
    for (i64 i = 0; i < dataset.size(); ++i) {
        Tensor x = dataset.image(i);
        ChainStore chains(1, cfg.arch.z_fg, cfg.arch.z_bg, cfg.arch.z_pix, false, rng);
        LatentTriple z = run_chain(model, chains, ChainTarget::posterior, {0}, &x,
                                   cfg.langevin, run, rng);
        MixtureOutput mix = mixture_forward(model, z.fg, z.bg, z.pix, nullptr, cfg.recon,
                                            run.disable_reassignment);
        const std::string stem = (fs::path(out) / pad5(i)).string();
        write_png(stem + "_composed.png", to_u8(mix.composed));
        write_png(stem + "_fg.png", to_u8(mix.fg_rgb));
        write_png(stem + "_bg.png", to_u8(mix.bg_rgb_re));
        {
            // probability map quantized to 8 bits
            ImageU8 img;
            img.width = mix.pi_f.dim(3);
            img.height = mix.pi_f.dim(2);
            img.channels = 1;
            img.pixels.resize(static_cast<size_t>(img.width * img.height));
            const double* p = mix.pi_f.data();
            for (size_t q = 0; q < img.pixels.size(); ++q)
                img.pixels[q] = static_cast<std::uint8_t>(
                    std::lround(std::min(1.0, std::max(0.0, p[q])) * 255.0));
            write_png(stem + "_pi.png", img);
        }
        {
            BinaryMask m = binarize(mix.pi_f, 0.5);
            ImageU8 img;
            img.width = mix.pi_f.dim(3);
            img.height = mix.pi_f.dim(2);
            img.channels = 1;
            img.pixels.resize(m.size());
            for (size_t q = 0; q < m.size(); ++q) img.pixels[q] = m[q] ? 255 : 0;
            write_png(stem + "_mask.png", img);
        }
    }
    std::cout << "inferred " << dataset.size() << " images into " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& out,
             bool permute, i64 steps) {
    Trainer trainer = Trainer::load_checkpoint(ckpt);
    RunConfig cfg = RunConfig::from_json_text(trainer.config_json());
    auto dataset = ImageFolderDataset::ingest_folder(data, cfg.arch.image_size);

    EvalConfig ec;
    ec.langevin = cfg.langevin;
    ec.recon = cfg.recon;
    ec.tv_weight = cfg.train.tv_weight_effective();
    ec.disable_reassignment = cfg.train.disable_reassignment;
    ec.threshold = cfg.eval_threshold;
    ec.permute = permute;
    ec.seed = cfg.seed;
    ec.batch = cfg.eval_batch;
    ec.steps_override = steps;

    ScoreReport report = evaluate_run(trainer.model(), dataset, ec);
    fs::create_directories(out);
    cfg.echo_to(out);
    std::ofstream fj((fs::path(out) / "report.json").string());
    std::ofstream fc((fs::path(out) / "report.csv").string());
    if (!fj || !fc) throw IoError("eval: cannot write reports to " + out);
    fj << report.to_json();
    fc << report.to_csv();
    std::cout << "mean IoU " << report.mean_iou << ", mean Dice " << report.mean_dice
              << " over " << report.samples.size() << " samples\n";
    return 0;
}

int cmd_sample_prior(const std::string& ckpt, i64 n, const std::string& out, i64 steps,
                     i64 seed_flag) {
    if (n < 1) throw ConfigError("sample-prior: --n must be >= 1");
    Trainer trainer = Trainer::load_checkpoint(ckpt);
    RunConfig cfg = RunConfig::from_json_text(trainer.config_json());
    fs::create_directories(out);
    cfg.echo_to(out);

    Rng rng((seed_flag >= 0 ? static_cast<u64>(seed_flag) : cfg.seed) ^ 0x9a3fULL);
    ChainStore chains(n, cfg.arch.z_fg, cfg.arch.z_bg, cfg.arch.z_pix, false, rng);
    ChainRunConfig run;
    run.recon = cfg.recon;
    run.steps_override = steps;
    std::vector<i64> idx(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    LatentTriple z = run_chain(trainer.model(), chains, ChainTarget::prior, idx, nullptr,
                               cfg.langevin, run, rng);
    MixtureOutput mix = mixture_forward(trainer.model(), z.fg, z.bg, z.pix, nullptr,
                                        cfg.recon, cfg.train.disable_reassignment);
    const i64 hw = cfg.arch.image_size * cfg.arch.image_size;
    for (i64 i = 0; i < n; ++i) {
        Tensor one = Tensor::zeros({3, cfg.arch.image_size, cfg.arch.image_size});
        std::copy(mix.composed.data() + i * 3 * hw, mix.composed.data() + (i + 1) * 3 * hw,
                  one.data());
        write_png((fs::path(out) / (pad5(i) + ".png")).string(), to_u8(one));
    }
    std::cout << "sampled " << n << " images into " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    apply_thread_cap();
    CLI::App app{"Deep region competition: unsupervised foreground extraction"};
    app.require_subcommand(1);

    std::string config_path, data_dir, out_dir, ckpt_path, resume_path;
    i64 n = 0;
    i64 steps = -1;
    i64 seed_flag = -1;
    bool permute = false;

    auto* gen = app.add_subcommand("gen-data", "Generate a textured-sprites dataset");
    gen->add_option("--config", config_path, "Run config JSON");
    gen->add_option("--out", out_dir, "Output directory")->required();
    gen->add_option("--n", n, "Number of samples")->required();
    gen->add_option("--seed", seed_flag, "Dataset seed (default: config seed)");

    auto* train = app.add_subcommand("train", "Train the two-expert model");
    train->add_option("--config", config_path, "Run config JSON");
    train->add_option("--data", data_dir, "Dataset directory")->required();
    train->add_option("--out", out_dir, "Output directory")->required();
    train->add_option("--resume", resume_path, "Checkpoint to resume from");

    auto* infer = app.add_subcommand("infer", "Infer masks and regions for a folder");
    infer->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
    infer->add_option("--data", data_dir, "Dataset directory")->required();
    infer->add_option("--out", out_dir, "Output directory")->required();
    infer->add_option("--steps", steps, "Posterior steps (default: config test_steps)");
    infer->add_option("--seed", seed_flag, "Inference seed (default: config seed)");

    auto* eval = app.add_subcommand("eval", "Score masks against ground truth");
    eval->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
    eval->add_option("--data", data_dir, "Dataset directory")->required();
    eval->add_option("--out", out_dir, "Output directory")->required();
    eval->add_flag("--permute", permute, "Identity-agnostic best-permutation scoring");
    eval->add_option("--steps", steps, "Posterior steps (default: config test_steps)");

    auto* prior = app.add_subcommand("sample-prior", "Decode prior chains to images");
    prior->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
    prior->add_option("--n", n, "Number of samples")->required();
    prior->add_option("--out", out_dir, "Output directory")->required();
    prior->add_option("--steps", steps, "Prior steps (default: config k0)");
    prior->add_option("--seed", seed_flag, "Sampling seed (default: config seed)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out_dir, n, seed_flag);
        if (train->parsed()) return cmd_train(config_path, data_dir, out_dir, resume_path);
        if (infer->parsed()) return cmd_infer(ckpt_path, data_dir, out_dir, steps, seed_flag);
        if (eval->parsed()) return cmd_eval(ckpt_path, data_dir, out_dir, permute, steps);
        if (prior->parsed()) return cmd_sample_prior(ckpt_path, n, out_dir, steps, seed_flag);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
