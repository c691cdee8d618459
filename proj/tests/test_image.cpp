#include <catch2/catch_amalgamated.hpp>

#include <zlib.h>

#include <filesystem>
#include <fstream>

#include "instid/image.hpp"
#include "instid/rng.hpp"

using namespace instid;
namespace fs = std::filesystem;

namespace {

fs::path tmpfile(const char* name) {
    auto p = fs::temp_directory_path() / name;
    fs::remove(p);
    return p;
}

Tensor<float> random_u8_image(int h, int w, uint64_t seed) {
    Rng rng(seed);
    Tensor<float> img(Shape{3, h, w});
    for (auto& v : img.data) v = static_cast<float>(rng.uniform_int(256)) / 255.0f;
    return img;
}

// Minimal encoder used only by tests: lets us emit PNGs with arbitrary row
// filters and color types, to exercise the decoder beyond what png_save emits.
void write_png_raw(const fs::path& path, int w, int h, int channels,
                   const std::vector<uint8_t>& pix, const std::vector<uint8_t>& filters) {
    const std::size_t stride = static_cast<std::size_t>(w) * channels;
    std::vector<uint8_t> raw;
    for (int y = 0; y < h; ++y) {
        const uint8_t ft = filters[static_cast<std::size_t>(y)];
        raw.push_back(ft);
        const uint8_t* cur = pix.data() + static_cast<std::size_t>(y) * stride;
        const uint8_t* up = y > 0 ? pix.data() + static_cast<std::size_t>(y - 1) * stride : nullptr;
        for (std::size_t x = 0; x < stride; ++x) {
            const int a = x >= static_cast<std::size_t>(channels) ? cur[x - channels] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<std::size_t>(channels)) ? up[x - channels] : 0;
            int v = cur[x];
            switch (ft) {
                case 0: break;
                case 1: v -= a; break;
                case 2: v -= b; break;
                case 3: v -= (a + b) / 2; break;
                case 4: v -= detail::paeth(a, b, c); break;
            }
            raw.push_back(static_cast<uint8_t>(v & 0xff));
        }
    }
    uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> zdata(zlen);
    REQUIRE(compress2(zdata.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) == Z_OK);
    zdata.resize(zlen);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    detail::be32(ihdr, static_cast<uint32_t>(w));
    detail::be32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);
    ihdr.push_back(channels == 1 ? 0 : channels == 3 ? 2 : 6);
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::chunk(out, "IHDR", ihdr);
    detail::chunk(out, "IDAT", zdata);
    detail::chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace

TEST_CASE("png roundtrip is exact for 8-bit data") {
    auto img = random_u8_image(23, 17, 100);
    auto path = tmpfile("instid_rt.png");
    png_save(path, img);
    auto back = png_load(path);
    REQUIRE(back.shape == img.shape);
    REQUIRE(max_abs_diff(back, img) == 0.0f);
    fs::remove(path);
}

TEST_CASE("image_to_u8 clamps and rounds") {
    Tensor<float> img(Shape{3, 1, 2});
    img.at(0, 0, 0) = -0.5f;
    img.at(1, 0, 0) = 1.5f;
    img.at(2, 0, 0) = 0.5f;
    img.at(0, 0, 1) = 0.002f;  // rounds to 1
    auto u8 = image_to_u8(img);
    REQUIRE(u8[0] == 0);
    REQUIRE(u8[1] == 255);
    REQUIRE(u8[2] == 128);
    REQUIRE(u8[3] == 1);
}

TEST_CASE("decoder handles every row filter") {
    const int w = 9, h = 10, ch = 3;
    Rng rng(200);
    std::vector<uint8_t> pix(static_cast<std::size_t>(w) * h * ch);
    for (auto& v : pix) v = static_cast<uint8_t>(rng.uniform_int(256));
    std::vector<uint8_t> filters(h);
    for (int y = 0; y < h; ++y) filters[static_cast<std::size_t>(y)] = static_cast<uint8_t>(y % 5);

    auto path = tmpfile("instid_filters.png");
    write_png_raw(path, w, h, ch, pix, filters);
    auto img = png_load(path);
    REQUIRE(max_abs_diff(img, image_from_u8(pix, h, w)) == 0.0f);
    fs::remove(path);
}

TEST_CASE("decoder reads gray and rgba") {
    const int w = 5, h = 4;
    Rng rng(300);

    std::vector<uint8_t> gray(static_cast<std::size_t>(w) * h);
    for (auto& v : gray) v = static_cast<uint8_t>(rng.uniform_int(256));
    auto gpath = tmpfile("instid_gray.png");
    write_png_raw(gpath, w, h, 1, gray, std::vector<uint8_t>(h, 1));
    auto gimg = png_load(gpath);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float want = gray[static_cast<std::size_t>(y) * w + x] / 255.0f;
            REQUIRE(gimg.at(0, y, x) == want);
            REQUIRE(gimg.at(1, y, x) == want);
            REQUIRE(gimg.at(2, y, x) == want);
        }
    fs::remove(gpath);

    std::vector<uint8_t> rgba(static_cast<std::size_t>(w) * h * 4);
    for (auto& v : rgba) v = static_cast<uint8_t>(rng.uniform_int(256));
    auto apath = tmpfile("instid_rgba.png");
    write_png_raw(apath, w, h, 4, rgba, std::vector<uint8_t>(h, 4));
    auto aimg = png_load(apath);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                REQUIRE(aimg.at(c, y, x) ==
                        rgba[(static_cast<std::size_t>(y) * w + x) * 4 + c] / 255.0f);
    fs::remove(apath);
}

TEST_CASE("png_load rejects garbage") {
    auto path = tmpfile("instid_garbage.png");
    {
        std::ofstream f(path, std::ios::binary);
        f << "not a png at all";
    }
    REQUIRE_THROWS_AS(png_load(path), DependencyError);
    fs::remove(path);
}

TEST_CASE("psnr behaves") {
    auto img = random_u8_image(8, 8, 400);
    REQUIRE(psnr(img, img) == 99.0);
    auto noisy = img;
    Rng rng(401);
    for (auto& v : noisy.data) v = std::clamp(v + 0.05f * static_cast<float>(rng.gaussian()), 0.0f, 1.0f);
    const double p = psnr(img, noisy);
    REQUIRE(p > 20.0);
    REQUIRE(p < 40.0);
}
