#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "instid/errors.hpp"
#include "instid/tensor.hpp"

namespace instid {

// Images are [3,H,W] float tensors in [0,1], channel-planar.

inline std::vector<uint8_t> image_to_u8(const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3) throw ShapeError("image_to_u8: want [3,H,W]");
    const int h = img.dim(1), w = img.dim(2);
    std::vector<uint8_t> out(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(img.at(c, y, x), 0.0f, 1.0f);
                out[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<uint8_t>(std::lround(v * 255.0f));
            }
    return out;
}

inline Tensor<float> image_from_u8(const std::vector<uint8_t>& rgb, int h, int w) {
    if (rgb.size() != static_cast<std::size_t>(h) * w * 3) throw ShapeError("image_from_u8: size");
    Tensor<float> img(Shape{3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    return img;
}

namespace detail {

inline void be32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(static_cast<uint8_t>(x >> 24));
    v.push_back(static_cast<uint8_t>(x >> 16));
    v.push_back(static_cast<uint8_t>(x >> 8));
    v.push_back(static_cast<uint8_t>(x));
}

inline uint32_t rd32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& data) {
    be32(out, static_cast<uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
    be32(out, crc);
}

inline int paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace detail

// 8-bit RGB PNG, filter 0 rows, zlib level 6.
inline void png_save(const std::filesystem::path& path, const Tensor<float>& img) {
    const std::vector<uint8_t> rgb = image_to_u8(img);
    const int h = img.dim(1), w = img.dim(2);

    std::vector<uint8_t> raw(static_cast<std::size_t>(h) * (1 + static_cast<std::size_t>(w) * 3));
    for (int y = 0; y < h; ++y) {
        uint8_t* row = raw.data() + static_cast<std::size_t>(y) * (1 + w * 3);
        row[0] = 0;
        std::memcpy(row + 1, rgb.data() + static_cast<std::size_t>(y) * w * 3, w * 3);
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> zdata(zlen);
    if (compress2(zdata.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw NumericError("png_save: deflate failed");
    zdata.resize(zlen);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    detail::be32(ihdr, static_cast<uint32_t>(w));
    detail::be32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type RGB
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace
    detail::chunk(out, "IHDR", ihdr);
    detail::chunk(out, "IDAT", zdata);
    detail::chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DependencyError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw DependencyError("short write: " + path.string());
}

// Reads 8-bit gray, RGB, or RGBA PNGs (alpha dropped), any row filter,
// no interlace. Covers everything this project writes.
inline Tensor<float> png_load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DependencyError("cannot open " + path.string());
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    if (buf.size() < 8 || std::memcmp(buf.data(), sig, 8) != 0)
        throw DependencyError(path.string() + ": not a PNG");

    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> zdata;
    std::size_t pos = 8;
    bool done = false;
    while (pos + 8 <= buf.size() && !done) {
        const uint32_t len = detail::rd32(buf.data() + pos);
        if (pos + 12 + len > buf.size()) throw DependencyError(path.string() + ": truncated PNG");
        const char* type = reinterpret_cast<const char*>(buf.data() + pos + 4);
        const uint8_t* data = buf.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) throw DependencyError(path.string() + ": bad IHDR");
            w = static_cast<int>(detail::rd32(data));
            h = static_cast<int>(detail::rd32(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8) throw DependencyError(path.string() + ": only 8-bit PNGs supported");
            if (interlace != 0) throw DependencyError(path.string() + ": interlaced PNG unsupported");
            channels = color == 0 ? 1 : color == 2 ? 3 : color == 6 ? 4 : -1;
            if (channels < 0)
                throw DependencyError(path.string() + ": unsupported color type " +
                                      std::to_string(color));
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            zdata.insert(zdata.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            done = true;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || zdata.empty()) throw DependencyError(path.string() + ": empty PNG");

    const std::size_t stride = static_cast<std::size_t>(w) * channels;
    std::vector<uint8_t> raw(static_cast<std::size_t>(h) * (1 + stride));
    uLongf rlen = static_cast<uLongf>(raw.size());
    if (uncompress(raw.data(), &rlen, zdata.data(), static_cast<uLong>(zdata.size())) != Z_OK ||
        rlen != raw.size())
        throw DependencyError(path.string() + ": inflate failed");

    std::vector<uint8_t> pix(static_cast<std::size_t>(h) * stride);
    const int bpp = channels;
    for (int y = 0; y < h; ++y) {
        const uint8_t filter = raw[static_cast<std::size_t>(y) * (1 + stride)];
        const uint8_t* src = raw.data() + static_cast<std::size_t>(y) * (1 + stride) + 1;
        uint8_t* cur = pix.data() + static_cast<std::size_t>(y) * stride;
        const uint8_t* up = y > 0 ? cur - stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(bpp) ? cur[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<std::size_t>(bpp)) ? up[x - bpp] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw DependencyError(path.string() + ": bad row filter");
            }
            cur[x] = static_cast<uint8_t>(v);
        }
    }

    Tensor<float> img(Shape{3, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const uint8_t* p = pix.data() + (static_cast<std::size_t>(y) * w + x) * channels;
            for (int ch = 0; ch < 3; ++ch)
                img.at(ch, y, x) = p[channels == 1 ? 0 : ch] / 255.0f;
        }
    return img;
}

inline double psnr(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw ShapeError("psnr: shape mismatch");
    double mse = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse <= 0.0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace instid
