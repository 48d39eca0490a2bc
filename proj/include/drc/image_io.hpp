#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "drc/common.hpp"
#include "drc/tensor.hpp"

namespace drc {

struct ImageU8 {
    i64 width = 0;
    i64 height = 0;
    i64 channels = 0;  // 1, 2, 3 or 4
    std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

// 8-bit PNG, gray/gray+alpha/RGB/RGBA, no interlace. The encoder always
// emits filter-0 scanlines at a fixed zlib level, so identical pixels give
// identical bytes.
ImageU8 read_png(const std::string& path);
void write_png(const std::string& path, const ImageU8& img);

// [-1,1] float image <-> 8-bit quantization. q = round((v+1)*127.5) clamped;
// v = q/127.5 - 1, so quantized values round-trip exactly.
ImageU8 to_u8(const Tensor& chw);                  // [C,H,W] or [1,C,H,W]
Tensor from_u8(const ImageU8& img);                // -> [C,H,W]

}  // namespace drc
