#include "drc/model.hpp"

#include <cmath>

namespace drc {

i64 ArchConfig::scaled(i64 ch) const {
    const i64 s = static_cast<i64>(std::llround(static_cast<double>(ch) * width_mult));
    return std::max<i64>(s, 2);
}

void ArchConfig::validate() const {
    i64 sz = 4;
    for (size_t i = 0; i < block_channels.size(); ++i) sz *= 2;
    if (sz != image_size)
        throw ConfigError("ArchConfig: image_size must be 4 * 2^blocks (got " +
                          std::to_string(image_size) + " with " +
                          std::to_string(block_channels.size()) + " blocks)");
    i64 cs = image_size;
    for (size_t i = 0; i < classifier_channels.size(); ++i) cs /= 2;
    if (cs != 4)
        throw ConfigError("ArchConfig: classifier must reduce the image to 4x4");
    if (z_fg < 1 || z_bg < 1 || z_pix < 1) throw ConfigError("ArchConfig: latent dims must be >= 1");
    if (k_fg < 2 || k_bg < 2) throw ConfigError("ArchConfig: symbolic K must be >= 2");
    if (width_mult <= 0) throw ConfigError("ArchConfig: width_mult must be > 0");
}

GeneratorNet::GeneratorNet(Role role, const ArchConfig& cfg, Rng& rng)
    : role_(role), image_size_(cfg.image_size) {
    z_dim_ = role == Role::foreground ? cfg.z_fg
                                      : (role == Role::background ? cfg.z_bg : cfg.z_pix);
    base_ch_ = cfg.scaled(cfg.base_channels);
    fc_ = Linear(z_dim_, base_ch_ * 4 * 4, rng);
    i64 in_ch = base_ch_;
    for (i64 ch : cfg.block_channels) {
        const i64 out_ch = cfg.scaled(ch);
        blocks_.emplace_back(in_ch, out_ch, 3, 1, 1, rng);
        in_ch = out_ch;
    }
    if (role == Role::reassignment) {
        // final conv also sees the detached background feature
        final_ = Conv2d(in_ch + in_ch, 2, 3, 1, 1, rng);
    } else {
        final_ = Conv2d(in_ch, 4, 3, 1, 1, rng);
    }
}

Tensor GeneratorNet::trunk(const Tensor& z) const {
    if (z.shape().size() != 2 || z.dim(1) != z_dim_)
        throw ConfigError("GeneratorNet: latent dimension mismatch (expected " +
                          std::to_string(z_dim_) + ")");
    Tensor h = leaky_relu(fc_.forward(z), slope_);
    h = reshape(h, {z.dim(0), base_ch_, 4, 4});
    for (const auto& conv : blocks_) {
        h = upsample_nearest2(h);
        h = conv.forward(h);
        h = instance_norm(h);
        h = leaky_relu(h, slope_);
    }
    return h;
}

GeneratorNet::RegionOut GeneratorNet::region_forward(const Tensor& z) const {
    if (role_ == Role::reassignment)
        throw ConfigError("GeneratorNet: region_forward called on the reassignment net");
    Tensor feat = trunk(z);
    Tensor head = final_.forward(feat);
    RegionOut out;
    out.rgb = tanh(narrow_channels(head, 0, 3));
    out.logit = narrow_channels(head, 3, 1);
    out.feat = feat;
    return out;
}

Tensor GeneratorNet::grid_forward(const Tensor& z, const Tensor& bg_feat_detached) const {
    if (role_ != Role::reassignment)
        throw ConfigError("GeneratorNet: grid_forward requires the reassignment net");
    Tensor feat = trunk(z);
    Tensor merged = concat_channels(feat, bg_feat_detached);
    Tensor delta = final_.forward(merged);
    // rest point is the identity re-assignment
    return add(identity_grid(z.dim(0), image_size_, image_size_), delta);
}

std::vector<Tensor> GeneratorNet::parameters() {
    std::vector<Tensor> ps{fc_.w, fc_.b};
    for (auto& c : blocks_) {
        ps.push_back(c.w);
        ps.push_back(c.b);
    }
    ps.push_back(final_.w);
    ps.push_back(final_.b);
    return ps;
}

std::vector<Tensor> GeneratorNet::conv_weights() {
    std::vector<Tensor> ws;
    for (auto& c : blocks_) ws.push_back(c.w);
    ws.push_back(final_.w);
    return ws;
}

AuxClassifier::AuxClassifier(i64 image_size, i64 k, const ArchConfig& cfg, Rng& rng)
    : k_(k) {
    i64 in_ch = 3;
    i64 sz = image_size;
    for (i64 ch : cfg.classifier_channels) {
        const i64 out_ch = cfg.scaled(ch);
        convs_.emplace_back(in_ch, out_ch, 4, 2, 1, rng);
        in_ch = out_ch;
        sz /= 2;
    }
    if (sz != 4) throw ConfigError("AuxClassifier: strided stack must end at 4x4");
    final_ = Conv2d(in_ch, k, 4, 1, 0, rng);
}

Tensor AuxClassifier::forward(const Tensor& rgb) const {
    Tensor h = rgb;
    for (const auto& conv : convs_) {
        h = conv.forward(h);
        h = instance_norm(h);
        h = leaky_relu(h, slope_);
    }
    h = final_.forward(h);  // [N,K,1,1]
    return reshape(h, {rgb.dim(0), k_});
}

std::vector<Tensor> AuxClassifier::parameters() {
    std::vector<Tensor> ps;
    for (auto& c : convs_) {
        ps.push_back(c.w);
        ps.push_back(c.b);
    }
    ps.push_back(final_.w);
    ps.push_back(final_.b);
    return ps;
}

DrcModel::DrcModel(const ArchConfig& cfg, Rng& rng) : arch(cfg) {
    cfg.validate();
    ebm_fg = EnergyHead(LatentRole::foreground, cfg.z_fg, cfg.k_fg,
                        cfg.ebm_hidden_layers, cfg.ebm_hidden_width, rng);
    ebm_bg = EnergyHead(LatentRole::background, cfg.z_bg, cfg.k_bg,
                        cfg.ebm_hidden_layers, cfg.ebm_hidden_width, rng);
    ebm_pix = EnergyHead(LatentRole::reassignment, cfg.z_pix, 1,
                         cfg.ebm_hidden_layers, cfg.ebm_hidden_width, rng);
    gen_fg = GeneratorNet(GeneratorNet::Role::foreground, cfg, rng);
    gen_bg = GeneratorNet(GeneratorNet::Role::background, cfg, rng);
    gen_pix = GeneratorNet(GeneratorNet::Role::reassignment, cfg, rng);
    cls_fg = AuxClassifier(cfg.image_size, cfg.k_fg, cfg, rng);
    cls_bg = AuxClassifier(cfg.image_size, cfg.k_bg, cfg, rng);
}

std::vector<std::vector<Tensor>> DrcModel::parameter_groups() {
    return {ebm_fg.parameters(), ebm_bg.parameters(), ebm_pix.parameters(),
            gen_fg.parameters(), gen_bg.parameters(), gen_pix.parameters(),
            cls_fg.parameters(), cls_bg.parameters()};
}

std::vector<Tensor> DrcModel::all_parameters() {
    std::vector<Tensor> out;
    for (auto& g : parameter_groups()) out.insert(out.end(), g.begin(), g.end());
    return out;
}

}  // namespace drc
