#include "drc/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace drc {

namespace {

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& prefix) {
    if (!obj.is_object())
        throw ConfigError("config: expected object at " + (prefix.empty() ? "<root>" : prefix));
    for (const auto& [key, value] : obj.items())
        if (!allowed.count(key))
            throw ConfigError("config: unknown key \"" + prefix + key + "\"");
}

template <class T>
void fetch(const json& obj, const char* key, T& out, const std::string& prefix) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("config: bad value type for \"" + prefix + key + "\"");
    }
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    RunConfig cfg;
    check_keys(doc, {"version", "seed", "dataset", "arch", "recon", "langevin", "train",
                     "eval"},
               "");
    fetch(doc, "version", cfg.version, "");
    if (cfg.version != 1)
        throw ConfigError("config: unsupported version " + std::to_string(cfg.version));
    fetch(doc, "seed", cfg.seed, "");

    if (doc.contains("dataset")) {
        const json& d = doc["dataset"];
        check_keys(d,
                   {"resolution", "sprite_min", "sprite_max", "scale_min", "scale_max",
                    "n_textures", "texture_bank_seed", "rejection_budget"},
                   "dataset.");
        fetch(d, "resolution", cfg.dataset.resolution, "dataset.");
        fetch(d, "sprite_min", cfg.dataset.sprite_min, "dataset.");
        fetch(d, "sprite_max", cfg.dataset.sprite_max, "dataset.");
        fetch(d, "scale_min", cfg.dataset.scale_min, "dataset.");
        fetch(d, "scale_max", cfg.dataset.scale_max, "dataset.");
        fetch(d, "n_textures", cfg.dataset.n_textures, "dataset.");
        fetch(d, "texture_bank_seed", cfg.dataset.texture_bank_seed, "dataset.");
        fetch(d, "rejection_budget", cfg.dataset.rejection_budget, "dataset.");
    }
    if (doc.contains("arch")) {
        const json& a = doc["arch"];
        check_keys(a,
                   {"image_size", "base_channels", "block_channels", "classifier_channels",
                    "width_mult", "z_fg", "z_bg", "z_pix", "k_fg", "k_bg",
                    "ebm_hidden_layers", "ebm_hidden_width"},
                   "arch.");
        fetch(a, "image_size", cfg.arch.image_size, "arch.");
        fetch(a, "base_channels", cfg.arch.base_channels, "arch.");
        fetch(a, "block_channels", cfg.arch.block_channels, "arch.");
        fetch(a, "classifier_channels", cfg.arch.classifier_channels, "arch.");
        fetch(a, "width_mult", cfg.arch.width_mult, "arch.");
        fetch(a, "z_fg", cfg.arch.z_fg, "arch.");
        fetch(a, "z_bg", cfg.arch.z_bg, "arch.");
        fetch(a, "z_pix", cfg.arch.z_pix, "arch.");
        fetch(a, "k_fg", cfg.arch.k_fg, "arch.");
        fetch(a, "k_bg", cfg.arch.k_bg, "arch.");
        fetch(a, "ebm_hidden_layers", cfg.arch.ebm_hidden_layers, "arch.");
        fetch(a, "ebm_hidden_width", cfg.arch.ebm_hidden_width, "arch.");
    }
    if (doc.contains("recon")) {
        const json& r = doc["recon"];
        check_keys(r, {"sigma", "norm", "epsilon"}, "recon.");
        fetch(r, "sigma", cfg.recon.sigma, "recon.");
        fetch(r, "epsilon", cfg.recon.epsilon, "recon.");
        if (r.contains("norm")) {
            const std::string norm = r.at("norm").get<std::string>();
            if (norm == "l1")
                cfg.recon.norm = ReconConfig::Norm::l1;
            else if (norm == "squared_l2")
                cfg.recon.norm = ReconConfig::Norm::squared_l2;
            else
                throw ConfigError("config: recon.norm must be \"l1\" or \"squared_l2\"");
        }
    }
    if (doc.contains("langevin")) {
        const json& l = doc["langevin"];
        check_keys(l,
                   {"k0", "k1", "delta0", "delta1", "test_steps", "noise_on",
                    "divergence_bound"},
                   "langevin.");
        fetch(l, "k0", cfg.langevin.k0, "langevin.");
        fetch(l, "k1", cfg.langevin.k1, "langevin.");
        fetch(l, "delta0", cfg.langevin.delta0, "langevin.");
        fetch(l, "delta1", cfg.langevin.delta1, "langevin.");
        fetch(l, "test_steps", cfg.langevin.test_steps, "langevin.");
        fetch(l, "noise_on", cfg.langevin.noise_on, "langevin.");
        fetch(l, "divergence_bound", cfg.langevin.divergence_bound, "langevin.");
    }
    if (doc.contains("train")) {
        const json& t = doc["train"];
        check_keys(t,
                   {"iterations", "batch", "lr_gen", "lr_ebm", "adam_beta1", "adam_beta2",
                    "weight_pseudo", "weight_tv", "weight_ortho", "disable_reassignment",
                    "disable_pseudo", "disable_tv", "disable_ortho", "short_run_chains",
                    "checkpoint_interval", "keep_checkpoints", "strict_determinism"},
                   "train.");
        fetch(t, "iterations", cfg.train.iterations, "train.");
        fetch(t, "batch", cfg.train.batch, "train.");
        fetch(t, "lr_gen", cfg.train.lr_gen, "train.");
        fetch(t, "lr_ebm", cfg.train.lr_ebm, "train.");
        fetch(t, "adam_beta1", cfg.train.adam_beta1, "train.");
        fetch(t, "adam_beta2", cfg.train.adam_beta2, "train.");
        fetch(t, "weight_pseudo", cfg.train.weight_pseudo, "train.");
        fetch(t, "weight_tv", cfg.train.weight_tv, "train.");
        fetch(t, "weight_ortho", cfg.train.weight_ortho, "train.");
        fetch(t, "disable_reassignment", cfg.train.disable_reassignment, "train.");
        fetch(t, "disable_pseudo", cfg.train.disable_pseudo, "train.");
        fetch(t, "disable_tv", cfg.train.disable_tv, "train.");
        fetch(t, "disable_ortho", cfg.train.disable_ortho, "train.");
        fetch(t, "short_run_chains", cfg.train.short_run_chains, "train.");
        fetch(t, "checkpoint_interval", cfg.train.checkpoint_interval, "train.");
        fetch(t, "keep_checkpoints", cfg.train.keep_checkpoints, "train.");
        fetch(t, "strict_determinism", cfg.train.strict_determinism, "train.");
    }
    if (doc.contains("eval")) {
        const json& e = doc["eval"];
        check_keys(e, {"threshold", "batch"}, "eval.");
        fetch(e, "threshold", cfg.eval_threshold, "eval.");
        fetch(e, "batch", cfg.eval_batch, "eval.");
    }
    cfg.train.seed = cfg.seed;
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string RunConfig::to_json_text() const {
    json doc = {
        {"version", version},
        {"seed", seed},
        {"dataset",
         {{"resolution", dataset.resolution},
          {"sprite_min", dataset.sprite_min},
          {"sprite_max", dataset.sprite_max},
          {"scale_min", dataset.scale_min},
          {"scale_max", dataset.scale_max},
          {"n_textures", dataset.n_textures},
          {"texture_bank_seed", dataset.texture_bank_seed},
          {"rejection_budget", dataset.rejection_budget}}},
        {"arch",
         {{"image_size", arch.image_size},
          {"base_channels", arch.base_channels},
          {"block_channels", arch.block_channels},
          {"classifier_channels", arch.classifier_channels},
          {"width_mult", arch.width_mult},
          {"z_fg", arch.z_fg},
          {"z_bg", arch.z_bg},
          {"z_pix", arch.z_pix},
          {"k_fg", arch.k_fg},
          {"k_bg", arch.k_bg},
          {"ebm_hidden_layers", arch.ebm_hidden_layers},
          {"ebm_hidden_width", arch.ebm_hidden_width}}},
        {"recon",
         {{"sigma", recon.sigma},
          {"norm", recon.norm == ReconConfig::Norm::l1 ? "l1" : "squared_l2"},
          {"epsilon", recon.epsilon}}},
        {"langevin",
         {{"k0", langevin.k0},
          {"k1", langevin.k1},
          {"delta0", langevin.delta0},
          {"delta1", langevin.delta1},
          {"test_steps", langevin.test_steps},
          {"noise_on", langevin.noise_on},
          {"divergence_bound", langevin.divergence_bound}}},
        {"train",
         {{"iterations", train.iterations},
          {"batch", train.batch},
          {"lr_gen", train.lr_gen},
          {"lr_ebm", train.lr_ebm},
          {"adam_beta1", train.adam_beta1},
          {"adam_beta2", train.adam_beta2},
          {"weight_pseudo", train.weight_pseudo},
          {"weight_tv", train.weight_tv},
          {"weight_ortho", train.weight_ortho},
          {"disable_reassignment", train.disable_reassignment},
          {"disable_pseudo", train.disable_pseudo},
          {"disable_tv", train.disable_tv},
          {"disable_ortho", train.disable_ortho},
          {"short_run_chains", train.short_run_chains},
          {"checkpoint_interval", train.checkpoint_interval},
          {"keep_checkpoints", train.keep_checkpoints},
          {"strict_determinism", train.strict_determinism}}},
        {"eval", {{"threshold", eval_threshold}, {"batch", eval_batch}}},
    };
    return doc.dump(2);
}

u64 RunConfig::hash() const {
    const std::string text = to_json_text();
    u64 h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void RunConfig::echo_to(const std::string& out_dir) const {
    fs::create_directories(out_dir);
    std::ofstream f(fs::path(out_dir) / "config_echo.json");
    if (!f) throw IoError("config: cannot write config echo to " + out_dir);
    f << to_json_text() << "\n";
}

Trainer trainer_from_config_json(const std::string& config_json, i64 n_examples,
                                 u64 config_hash) {
    RunConfig cfg = RunConfig::from_json_text(config_json);
    return Trainer(cfg.arch, cfg.train, cfg.langevin, cfg.recon, n_examples, config_hash,
                   cfg.to_json_text());
}

}  // namespace drc
