#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drc/rng.hpp"
#include "drc/tensor.hpp"

namespace drc {

struct DataConfig {
    i64 resolution = 64;
    i64 sprite_min = 2;
    i64 sprite_max = 3;
    double scale_min = 0.1;
    double scale_max = 0.25;
    i64 n_textures = 20;
    u64 texture_bank_seed = 7;
    i64 rejection_budget = 1000;

    void validate() const;
};

// Bank of analytic sinusoidal gratings, renderable at any size. Frequencies
// span 2-8 cycles per image, orientations are uniform.
class TextureBank {
public:
    TextureBank() = default;
    TextureBank(i64 n, i64 default_size, u64 seed);

    i64 size() const { return static_cast<i64>(freq_.size()); }
    i64 default_render_size() const { return default_size_; }
    u64 seed() const { return seed_; }

    // [1, size, size] grating in [-1, 1]; phase_shift in [0, 2pi)
    Tensor render(i64 texture_id, i64 size, double phase_shift) const;

    double frequency(i64 id) const { return freq_.at(static_cast<size_t>(id)); }
    double orientation(i64 id) const { return orient_.at(static_cast<size_t>(id)); }

private:
    std::vector<double> freq_, orient_, phase_;
    i64 default_size_ = 64;
    u64 seed_ = 0;
};

TextureBank make_texture_bank(i64 n, i64 size, u64 seed);

struct SpriteSpec {
    enum class Shape { square, circle, triangle };
    Shape shape = Shape::square;
    double r = 1, g = 0, b = 0;  // saturated RGB in [0,1]
    double cx = 0, cy = 0;       // continuous pixel coordinates
    double scale = 0.2;          // fraction of image width
};

struct SceneSample {
    Tensor image;                     // [3,H,W] in [-1,1]
    std::vector<std::uint8_t> mask;   // H*W, 0/1
    std::vector<SpriteSpec> sprites;
    i64 texture_id = 0;
    u64 seed = 0;
};

// Non-overlapping sprites over a randomly phase-shifted grating; the mask is
// exactly the union of sprite supports.
SceneSample sample_scene(const DataConfig& cfg, const TextureBank& bank, u64 seed);

struct ManifestEntry {
    std::string image, mask;
    u64 seed;
};

// Writes images/NNNNN.png + masks/NNNNN.png + manifest.json; byte-identical
// for identical (config, seed).
void write_dataset(i64 n_samples, const std::string& out_dir, const DataConfig& cfg,
                   u64 seed);

class ImageFolderDataset {
public:
    // Reads a dataset laid out by write_dataset; masks are optional. When
    // resolution > 0, images are center-cropped and resized.
    static ImageFolderDataset ingest_folder(const std::string& dir, i64 resolution = -1);

    i64 size() const { return static_cast<i64>(images_.size()); }
    i64 resolution() const { return res_; }
    bool has_masks() const { return !masks_.empty(); }

    Tensor image_batch(const std::vector<i64>& idx) const;  // [B,3,H,W] in [-1,1]
    Tensor image(i64 idx) const;                            // [1,3,H,W]
    const std::vector<std::uint8_t>& mask(i64 idx) const;   // H*W, 0/1

private:
    std::vector<std::vector<std::uint8_t>> images_;  // RGB u8 at res_
    std::vector<std::vector<std::uint8_t>> masks_;   // 0/1 at res_
    i64 res_ = 0;
};

}  // namespace drc
