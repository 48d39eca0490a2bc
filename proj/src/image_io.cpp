#include "drc/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace drc {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) |
           (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const uLong crc =
        crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_png(const std::string& path, const ImageU8& img) {
    if (img.width <= 0 || img.height <= 0) throw IoError("write_png: empty image");
    std::uint8_t color_type;
    switch (img.channels) {
        case 1: color_type = 0; break;
        case 2: color_type = 4; break;
        case 3: color_type = 2; break;
        case 4: color_type = 6; break;
        default: throw IoError("write_png: unsupported channel count");
    }
    if (static_cast<i64>(img.pixels.size()) != img.width * img.height * img.channels)
        throw IoError("write_png: pixel buffer size mismatch");

    const i64 stride = img.width * img.channels;
    std::vector<std::uint8_t> raw(static_cast<size_t>((stride + 1) * img.height));
    for (i64 y = 0; y < img.height; ++y) {
        raw[static_cast<size_t>(y * (stride + 1))] = 0;  // filter none
        std::memcpy(raw.data() + y * (stride + 1) + 1, img.pixels.data() + y * stride,
                    static_cast<size_t>(stride));
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  6) != Z_OK)
        throw IoError("write_png: deflate failed");
    compressed.resize(bound);

    std::vector<std::uint8_t> out;
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    out.insert(out.end(), sig, sig + 8);
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(img.width));
    put_u32(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);
    ihdr.push_back(color_type);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_png: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_png: write failed for " + path);
}

ImageU8 read_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_png: cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    const std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IoError("read_png: not a PNG file: " + path);

    ImageU8 img;
    std::vector<std::uint8_t> idat;
    std::uint8_t bit_depth = 0, color_type = 0, interlace = 0;
    size_t pos = 8;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t len = get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IoError("read_png: truncated chunk in " + path);
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            img.width = get_u32(payload);
            img.height = get_u32(payload + 4);
            bit_depth = payload[8];
            color_type = payload[9];
            interlace = payload[12];
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    if (bit_depth != 8) throw IoError("read_png: only 8-bit images supported: " + path);
    if (interlace != 0) throw IoError("read_png: interlaced PNG not supported: " + path);
    switch (color_type) {
        case 0: img.channels = 1; break;
        case 2: img.channels = 3; break;
        case 4: img.channels = 2; break;
        case 6: img.channels = 4; break;
        default: throw IoError("read_png: palette PNG not supported: " + path);
    }

    const i64 stride = img.width * img.channels;
    std::vector<std::uint8_t> raw(static_cast<size_t>((stride + 1) * img.height));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) !=
            Z_OK ||
        raw_len != raw.size())
        throw IoError("read_png: inflate failed for " + path);

    img.pixels.resize(static_cast<size_t>(stride * img.height));
    const i64 bpp = img.channels;
    for (i64 y = 0; y < img.height; ++y) {
        const std::uint8_t filter = raw[static_cast<size_t>(y * (stride + 1))];
        const std::uint8_t* src = raw.data() + y * (stride + 1) + 1;
        std::uint8_t* dst = img.pixels.data() + y * stride;
        const std::uint8_t* up = y > 0 ? img.pixels.data() + (y - 1) * stride : nullptr;
        for (i64 x = 0; x < stride; ++x) {
            const int a = x >= bpp ? dst[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= bpp) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw IoError("read_png: bad filter type in " + path);
            }
            dst[x] = static_cast<std::uint8_t>(v & 0xff);
        }
    }
    return img;
}

ImageU8 to_u8(const Tensor& chw) {
    std::vector<i64> s = chw.shape();
    if (s.size() == 4) {
        if (s[0] != 1) throw ConfigError("to_u8: batch must be 1");
        s.erase(s.begin());
    }
    if (s.size() != 3) throw ConfigError("to_u8: expected [C,H,W]");
    ImageU8 img;
    img.channels = s[0];
    img.height = s[1];
    img.width = s[2];
    img.pixels.resize(static_cast<size_t>(chw.numel()));
    const double* d = chw.data();
    const i64 hw = img.height * img.width;
    for (i64 c = 0; c < img.channels; ++c)
        for (i64 p = 0; p < hw; ++p) {
            double q = std::round((d[c * hw + p] + 1.0) * 127.5);
            q = std::min(255.0, std::max(0.0, q));
            img.pixels[static_cast<size_t>(p * img.channels + c)] =
                static_cast<std::uint8_t>(q);
        }
    return img;
}

Tensor from_u8(const ImageU8& img) {
    Tensor t = Tensor::zeros({img.channels, img.height, img.width});
    double* d = t.data();
    const i64 hw = img.height * img.width;
    for (i64 c = 0; c < img.channels; ++c)
        for (i64 p = 0; p < hw; ++p)
            d[c * hw + p] =
                static_cast<double>(img.pixels[static_cast<size_t>(p * img.channels + c)]) /
                    127.5 -
                1.0;
    return t;
}

}  // namespace drc
