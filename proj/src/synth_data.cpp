#include "drc/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "drc/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace drc {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

void hsv_to_rgb(double h, double& r, double& g, double& b) {
    // s = v = 1
    const double hp = h * 6.0;
    const int sector = static_cast<int>(hp) % 6;
    const double f = hp - std::floor(hp);
    switch (sector) {
        case 0: r = 1, g = f, b = 0; break;
        case 1: r = 1 - f, g = 1, b = 0; break;
        case 2: r = 0, g = 1, b = f; break;
        case 3: r = 0, g = 1 - f, b = 1; break;
        case 4: r = f, g = 0, b = 1; break;
        default: r = 1, g = 0, b = 1 - f; break;
    }
}

bool inside_sprite(const SpriteSpec& sp, double px, double py, double size) {
    const double r = 0.5 * sp.scale * size;
    const double dx = px - sp.cx, dy = py - sp.cy;
    switch (sp.shape) {
        case SpriteSpec::Shape::square:
            return std::abs(dx) <= r && std::abs(dy) <= r;
        case SpriteSpec::Shape::circle:
            return dx * dx + dy * dy <= r * r;
        case SpriteSpec::Shape::triangle: {
            // equilateral, apex up, circumradius r
            const double x1 = 0.0, y1 = -r;
            const double x2 = -r * 0.8660254037844386, y2 = r * 0.5;
            const double x3 = r * 0.8660254037844386, y3 = r * 0.5;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (dy - ay) - (by - ay) * (dx - ax);
            };
            const double d1 = side(x1, y1, x2, y2);
            const double d2 = side(x2, y2, x3, y3);
            const double d3 = side(x3, y3, x1, y1);
            const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(has_neg && has_pos);
        }
    }
    return false;
}

void rasterize(const SpriteSpec& sp, i64 size, std::vector<std::uint8_t>& out) {
    out.assign(static_cast<size_t>(size * size), 0);
    const double r = 0.5 * sp.scale * static_cast<double>(size);
    const i64 y0 = std::max<i64>(0, static_cast<i64>(std::floor(sp.cy - r)) - 1);
    const i64 y1 = std::min<i64>(size - 1, static_cast<i64>(std::ceil(sp.cy + r)) + 1);
    const i64 x0 = std::max<i64>(0, static_cast<i64>(std::floor(sp.cx - r)) - 1);
    const i64 x1 = std::min<i64>(size - 1, static_cast<i64>(std::ceil(sp.cx + r)) + 1);
    for (i64 y = y0; y <= y1; ++y)
        for (i64 x = x0; x <= x1; ++x)
            if (inside_sprite(sp, static_cast<double>(x) + 0.5,
                              static_cast<double>(y) + 0.5,
                              static_cast<double>(size)))
                out[static_cast<size_t>(y * size + x)] = 1;
}

std::string zero_pad(i64 v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

}  // namespace

void DataConfig::validate() const {
    if (resolution < 8) throw ConfigError("DataConfig: resolution too small");
    if (sprite_min < 1 || sprite_max < sprite_min)
        throw ConfigError("DataConfig: bad sprite count range");
    if (scale_min <= 0 || scale_max < scale_min || scale_max > 0.9)
        throw ConfigError("DataConfig: bad sprite scale range");
    if (n_textures < 1) throw ConfigError("DataConfig: need at least one texture");
}

TextureBank::TextureBank(i64 n, i64 default_size, u64 seed)
    : default_size_(default_size), seed_(seed) {
    if (n < 1) throw ConfigError("TextureBank: n must be >= 1");
    Rng rng(seed ^ 0x7e37u);
    freq_.reserve(static_cast<size_t>(n));
    for (i64 i = 0; i < n; ++i) {
        freq_.push_back(rng.uniform(2.0, 8.0));
        orient_.push_back(rng.uniform(0.0, kTwoPi / 2.0));
        phase_.push_back(rng.uniform(0.0, kTwoPi));
    }
}

Tensor TextureBank::render(i64 texture_id, i64 size, double phase_shift) const {
    if (texture_id < 0 || texture_id >= this->size())
        throw ConfigError("TextureBank: texture id out of range");
    const double f = freq_[static_cast<size_t>(texture_id)];
    const double th = orient_[static_cast<size_t>(texture_id)];
    const double ph = phase_[static_cast<size_t>(texture_id)] + phase_shift;
    const double ct = std::cos(th), st = std::sin(th);
    Tensor out = Tensor::zeros({1, size, size});
    double* d = out.data();
    const double inv = 1.0 / static_cast<double>(size);
    for (i64 y = 0; y < size; ++y)
        for (i64 x = 0; x < size; ++x) {
            const double u = (static_cast<double>(x) + 0.5) * inv;
            const double v = (static_cast<double>(y) + 0.5) * inv;
            d[y * size + x] = std::sin(kTwoPi * f * (u * ct + v * st) + ph);
        }
    return out;
}

TextureBank make_texture_bank(i64 n, i64 size, u64 seed) {
    return TextureBank(n, size, seed);
}

SceneSample sample_scene(const DataConfig& cfg, const TextureBank& bank, u64 seed) {
    cfg.validate();
    Rng rng(seed);
    SceneSample sample;
    sample.seed = seed;
    const i64 size = cfg.resolution;

    sample.texture_id = rng.uniform_int(bank.size());
    const double shift = rng.uniform(0.0, kTwoPi);
    Tensor tex = bank.render(sample.texture_id, size, shift);

    const i64 n_sprites =
        cfg.sprite_min + rng.uniform_int(cfg.sprite_max - cfg.sprite_min + 1);
    std::vector<std::vector<std::uint8_t>> supports;
    std::vector<std::uint8_t> candidate;
    i64 tries = 0;
    while (static_cast<i64>(sample.sprites.size()) < n_sprites) {
        if (++tries > cfg.rejection_budget)
            throw GenerationError("sample_scene: rejection budget exhausted (" +
                                  std::to_string(cfg.rejection_budget) +
                                  " tries); sprite scale range is infeasible");
        SpriteSpec sp;
        const i64 shape_draw = rng.uniform_int(3);
        sp.shape = shape_draw == 0 ? SpriteSpec::Shape::square
                                   : (shape_draw == 1 ? SpriteSpec::Shape::circle
                                                      : SpriteSpec::Shape::triangle);
        hsv_to_rgb(rng.uniform(), sp.r, sp.g, sp.b);
        sp.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
        const double r = 0.5 * sp.scale * static_cast<double>(size);
        const double margin = r + 1.0;
        if (2 * margin >= static_cast<double>(size))
            throw GenerationError("sample_scene: sprite does not fit the canvas");
        sp.cx = rng.uniform(margin, static_cast<double>(size) - margin);
        sp.cy = rng.uniform(margin, static_cast<double>(size) - margin);

        rasterize(sp, size, candidate);
        bool overlaps = false;
        for (const auto& other : supports) {
            for (size_t i = 0; i < candidate.size() && !overlaps; ++i)
                if (candidate[i] && other[i]) overlaps = true;
            if (overlaps) break;
        }
        if (overlaps) continue;
        supports.push_back(candidate);
        sample.sprites.push_back(sp);
    }

    sample.image = Tensor::zeros({3, size, size});
    sample.mask.assign(static_cast<size_t>(size * size), 0);
    double* im = sample.image.data();
    const double* tx = tex.data();
    const i64 hw = size * size;
    for (i64 p = 0; p < hw; ++p) {
        im[p] = tx[p];
        im[hw + p] = tx[p];
        im[2 * hw + p] = tx[p];
    }
    for (size_t s = 0; s < sample.sprites.size(); ++s) {
        const auto& sp = sample.sprites[s];
        const auto& sup = supports[s];
        for (i64 p = 0; p < hw; ++p)
            if (sup[static_cast<size_t>(p)]) {
                im[p] = sp.r * 2.0 - 1.0;
                im[hw + p] = sp.g * 2.0 - 1.0;
                im[2 * hw + p] = sp.b * 2.0 - 1.0;
                sample.mask[static_cast<size_t>(p)] = 1;
            }
    }
    return sample;
}

void write_dataset(i64 n_samples, const std::string& out_dir, const DataConfig& cfg,
                   u64 seed) {
    cfg.validate();
    if (n_samples < 1) throw ConfigError("write_dataset: n must be >= 1");
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    fs::create_directories(fs::path(out_dir) / "masks", ec);
    if (ec) throw IoError("write_dataset: cannot create " + out_dir);

    TextureBank bank(cfg.n_textures, cfg.resolution, cfg.texture_bank_seed);
    Rng master(seed);

    json files = json::array();
    for (i64 i = 0; i < n_samples; ++i) {
        const u64 sample_seed = master.derive(static_cast<u64>(i)).next_u64();
        SceneSample s = sample_scene(cfg, bank, sample_seed);
        const std::string img_rel = "images/" + zero_pad(i, 5) + ".png";
        const std::string msk_rel = "masks/" + zero_pad(i, 5) + ".png";
        write_png((fs::path(out_dir) / img_rel).string(), to_u8(s.image));
        ImageU8 m;
        m.width = cfg.resolution;
        m.height = cfg.resolution;
        m.channels = 1;
        m.pixels.resize(s.mask.size());
        for (size_t p = 0; p < s.mask.size(); ++p) m.pixels[p] = s.mask[p] ? 255 : 0;
        write_png((fs::path(out_dir) / msk_rel).string(), m);
        files.push_back({{"image", img_rel}, {"mask", msk_rel}, {"seed", sample_seed}});
    }

    json manifest = {
        {"version", 1},
        {"n", n_samples},
        {"resolution", cfg.resolution},
        {"sprite_count_range", {cfg.sprite_min, cfg.sprite_max}},
        {"texture_bank_seed", cfg.texture_bank_seed},
        {"files", files},
    };
    std::ofstream f(fs::path(out_dir) / "manifest.json");
    if (!f) throw IoError("write_dataset: cannot write manifest.json");
    f << manifest.dump(2) << "\n";
}

namespace {

std::vector<std::uint8_t> center_crop_resize_rgb(const ImageU8& src, i64 out) {
    const i64 crop = std::min(src.width, src.height);
    const i64 ox = (src.width - crop) / 2;
    const i64 oy = (src.height - crop) / 2;
    std::vector<std::uint8_t> dst(static_cast<size_t>(out * out * 3));
    const double scale = static_cast<double>(crop) / static_cast<double>(out);
    for (i64 y = 0; y < out; ++y)
        for (i64 x = 0; x < out; ++x) {
            const double sy = (static_cast<double>(y) + 0.5) * scale - 0.5 + static_cast<double>(oy);
            const double sx = (static_cast<double>(x) + 0.5) * scale - 0.5 + static_cast<double>(ox);
            const i64 y0 = std::max<i64>(0, std::min<i64>(src.height - 1, static_cast<i64>(std::floor(sy))));
            const i64 x0 = std::max<i64>(0, std::min<i64>(src.width - 1, static_cast<i64>(std::floor(sx))));
            const i64 y1 = std::min<i64>(src.height - 1, y0 + 1);
            const i64 x1 = std::min<i64>(src.width - 1, x0 + 1);
            const double wy = std::min(1.0, std::max(0.0, sy - static_cast<double>(y0)));
            const double wx = std::min(1.0, std::max(0.0, sx - static_cast<double>(x0)));
            for (i64 c = 0; c < 3; ++c) {
                auto at = [&](i64 yy, i64 xx) {
                    const i64 ch = src.channels >= 3 ? c : 0;
                    return static_cast<double>(
                        src.pixels[static_cast<size_t>((yy * src.width + xx) * src.channels + ch)]);
                };
                const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                                 wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
                dst[static_cast<size_t>((y * out + x) * 3 + c)] =
                    static_cast<std::uint8_t>(std::lround(std::min(255.0, std::max(0.0, v))));
            }
        }
    return dst;
}

std::vector<std::uint8_t> center_crop_resize_mask(const ImageU8& src, i64 out) {
    const i64 crop = std::min(src.width, src.height);
    const i64 ox = (src.width - crop) / 2;
    const i64 oy = (src.height - crop) / 2;
    std::vector<std::uint8_t> dst(static_cast<size_t>(out * out));
    const double scale = static_cast<double>(crop) / static_cast<double>(out);
    for (i64 y = 0; y < out; ++y)
        for (i64 x = 0; x < out; ++x) {
            const i64 sy = std::min<i64>(src.height - 1,
                                         oy + static_cast<i64>((static_cast<double>(y) + 0.5) * scale));
            const i64 sx = std::min<i64>(src.width - 1,
                                         ox + static_cast<i64>((static_cast<double>(x) + 0.5) * scale));
            dst[static_cast<size_t>(y * out + x)] =
                src.pixels[static_cast<size_t>((sy * src.width + sx) * src.channels)] >= 128 ? 1 : 0;
        }
    return dst;
}

}  // namespace

ImageFolderDataset ImageFolderDataset::ingest_folder(const std::string& dir, i64 resolution) {
    const fs::path manifest_path = fs::path(dir) / "manifest.json";
    std::ifstream f(manifest_path);
    if (!f) throw IoError("ingest_folder: missing " + manifest_path.string());
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw IoError("ingest_folder: malformed " + manifest_path.string() + ": " + e.what());
    }
    if (!manifest.contains("files") || !manifest["files"].is_array())
        throw IoError("ingest_folder: malformed " + manifest_path.string() +
                      ": missing files array");

    ImageFolderDataset ds;
    bool any_mask = false, checked_mask = false;
    for (const auto& entry : manifest["files"]) {
        if (!entry.contains("image"))
            throw IoError("ingest_folder: malformed " + manifest_path.string() +
                          ": entry without image");
        const fs::path img_path = fs::path(dir) / entry["image"].get<std::string>();
        if (!fs::exists(img_path))
            throw IoError("ingest_folder: missing file " + img_path.string());
        ImageU8 img = read_png(img_path.string());
        const i64 res = resolution > 0 ? resolution : std::min(img.width, img.height);
        if (ds.res_ == 0) ds.res_ = res;
        if (img.channels < 3 || img.width != ds.res_ || img.height != ds.res_ ||
            resolution > 0) {
            ds.images_.push_back(center_crop_resize_rgb(img, ds.res_));
        } else {
            std::vector<std::uint8_t> rgb(static_cast<size_t>(ds.res_ * ds.res_ * 3));
            for (i64 p = 0; p < ds.res_ * ds.res_; ++p)
                for (i64 c = 0; c < 3; ++c)
                    rgb[static_cast<size_t>(p * 3 + c)] =
                        img.pixels[static_cast<size_t>(p * img.channels + c)];
            ds.images_.push_back(std::move(rgb));
        }

        fs::path mask_path;
        bool has = false;
        if (entry.contains("mask")) {
            mask_path = fs::path(dir) / entry["mask"].get<std::string>();
            has = fs::exists(mask_path);
        }
        if (!checked_mask) {
            any_mask = has;
            checked_mask = true;
        }
        if (any_mask) {
            if (!has)
                throw IoError("ingest_folder: missing mask file " + mask_path.string());
            ImageU8 m = read_png(mask_path.string());
            ds.masks_.push_back(center_crop_resize_mask(m, ds.res_));
        }
    }
    if (ds.images_.empty()) throw IoError("ingest_folder: dataset is empty");
    return ds;
}

Tensor ImageFolderDataset::image_batch(const std::vector<i64>& idx) const {
    const i64 b = static_cast<i64>(idx.size());
    Tensor out = Tensor::zeros({b, 3, res_, res_});
    double* d = out.data();
    const i64 hw = res_ * res_;
    for (i64 r = 0; r < b; ++r) {
        const auto& img = images_.at(static_cast<size_t>(idx[static_cast<size_t>(r)]));
        for (i64 p = 0; p < hw; ++p)
            for (i64 c = 0; c < 3; ++c)
                d[((r * 3 + c) * hw) + p] =
                    static_cast<double>(img[static_cast<size_t>(p * 3 + c)]) / 127.5 - 1.0;
    }
    return out;
}

Tensor ImageFolderDataset::image(i64 idx) const { return image_batch({idx}); }

const std::vector<std::uint8_t>& ImageFolderDataset::mask(i64 idx) const {
    if (masks_.empty()) throw ConfigError("ImageFolderDataset: dataset has no masks");
    return masks_.at(static_cast<size_t>(idx));
}

}  // namespace drc
