#pragma once

#include <vector>

#include "drc/latent_prior.hpp"
#include "drc/nn.hpp"

namespace drc {

// Architecture of generators, energy heads and auxiliary classifiers.
// block_channels runs from the 4x4 base outward; image_size must equal
// 4 * 2^blocks.
struct ArchConfig {
    i64 image_size = 64;
    i64 base_channels = 64;
    std::vector<i64> block_channels = {128, 64, 32, 16};
    std::vector<i64> classifier_channels = {32, 64, 128, 256};
    double width_mult = 1.0;

    i64 z_fg = 32;
    i64 z_bg = 8;
    i64 z_pix = 64;
    i64 k_fg = 30;
    i64 k_bg = 10;
    i64 ebm_hidden_layers = 3;
    i64 ebm_hidden_width = 200;

    i64 scaled(i64 ch) const;
    void validate() const;
};

// DCGAN-family generator: fully connected layer to a 4x4 base, then
// upsample-conv-instancenorm-LReLU blocks, then a final 3x3 conv. The
// reassignment variant concatenates the (detached) background feature before
// its final conv and adds the identity grid to its output.
class GeneratorNet {
public:
    enum class Role { foreground, background, reassignment };

    GeneratorNet() = default;
    GeneratorNet(Role role, const ArchConfig& cfg, Rng& rng);

    // trunk activation at full resolution, before the final conv
    Tensor trunk(const Tensor& z) const;

    struct RegionOut {
        Tensor rgb;    // tanh, [-1,1]
        Tensor logit;  // unbounded mask logit
        Tensor feat;   // trunk activation
    };
    RegionOut region_forward(const Tensor& z) const;  // foreground/background

    // reassignment only: z and the gradient-blocked background feature
    Tensor grid_forward(const Tensor& z, const Tensor& bg_feat_detached) const;

    Role role() const { return role_; }
    i64 z_dim() const { return z_dim_; }
    std::vector<Tensor> parameters();
    std::vector<Tensor> conv_weights();  // for orthogonal regularization

private:
    Role role_ = Role::foreground;
    i64 z_dim_ = 0;
    i64 image_size_ = 0;
    i64 base_ch_ = 0;
    Linear fc_;
    std::vector<Conv2d> blocks_;
    Conv2d final_;
    double slope_ = 0.01;
};

// Strided conv stack mapping an RGB region image to K symbolic logits.
class AuxClassifier {
public:
    AuxClassifier() = default;
    AuxClassifier(i64 image_size, i64 k, const ArchConfig& cfg, Rng& rng);

    Tensor forward(const Tensor& rgb) const;  // [N,3,H,W] -> [N,K]
    std::vector<Tensor> parameters();

private:
    std::vector<Conv2d> convs_;
    Conv2d final_;
    i64 k_ = 0;
    double slope_ = 0.2;
};

// All parameters of the two-expert model: three LEBMs (alpha), three
// generators (beta) and two auxiliary classifiers (tau).
struct DrcModel {
    ArchConfig arch;
    EnergyHead ebm_fg, ebm_bg, ebm_pix;
    GeneratorNet gen_fg, gen_bg, gen_pix;
    AuxClassifier cls_fg, cls_bg;

    DrcModel() = default;
    DrcModel(const ArchConfig& cfg, Rng& rng);

    std::vector<Tensor> all_parameters();
    // fixed group order: ebm_fg, ebm_bg, ebm_pix, gen_fg, gen_bg, gen_pix,
    // cls_fg, cls_bg
    std::vector<std::vector<Tensor>> parameter_groups();
};

}  // namespace drc
