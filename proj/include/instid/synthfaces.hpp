#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "instid/errors.hpp"
#include "instid/image.hpp"
#include "instid/rng.hpp"
#include "instid/tensor.hpp"

namespace instid {

// ---- color helpers ----

struct Rgb {
    double r = 0, g = 0, b = 0;
};

inline double wrap01(double x) { return x - std::floor(x); }

inline Rgb hsv_to_rgb(double h, double s, double v) {
    h = wrap01(h) * 6.0;
    const int i = static_cast<int>(h) % 6;
    const double f = h - std::floor(h);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

// h in [0,1), s and v in [0,1]
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = (g - b) / d;
    else if (mx == g)
        h = 2.0 + (b - r) / d;
    else
        h = 4.0 + (r - g) / d;
    h = wrap01(h / 6.0);
}

// ---- domain types ----

inline constexpr int kIdDim = 8;

// Eight appearance attributes, each an affine map of one vector component:
//   v0 face axes ratio   1.25 + 0.25 v0        (half-height / half-width)
//   v1 eye spacing       0.42 + 0.12 v1        (fraction of half-width)
//   v2 eye hue           0.5  + 0.45 v2        (stays off the hue wrap point,
//                        so distinct values give distinct iris colors)
//   v3 skin hue          0.08 + 0.06 v3
//   v4 mouth width       0.35 + 0.15 v4        (fraction of half-width)
//   v5 nose length       0.16 + 0.06 v5        (fraction of half-height;
//                        also shifts the nose centroid by 0.06 v5)
//   v6 brow height       0.26 + 0.08 v6        (above eye line, fraction of hh)
//   v7 eye ring radius   0.12 + 0.02 v7        (fraction of half-height)
// Every attribute is a ratio of the face's own dimensions, so all eight stay
// recoverable from a single image at any pose scale.
struct IdentitySpec {
    std::array<double, kIdDim> v{};

    double axes_ratio() const { return 1.25 + 0.25 * v[0]; }
    double eye_spacing() const { return 0.42 + 0.12 * v[1]; }
    double eye_hue() const { return 0.5 + 0.45 * v[2]; }
    double skin_hue() const { return 0.08 + 0.06 * v[3]; }
    double mouth_width() const { return 0.35 + 0.15 * v[4]; }
    double nose_shift() const { return 0.06 * v[5]; }
    double nose_length() const { return 0.16 + 0.06 * v[5]; }
    double brow_height() const { return 0.26 + 0.08 * v[6]; }
    double ring_radius() const { return 0.12 + 0.02 * v[7]; }

    bool operator==(const IdentitySpec&) const = default;
};

struct PoseSpec {
    double rotation = 0.0;  // radians, [-pi/4, pi/4]
    double scale = 0.8;     // fraction of image height, [0.6, 1.0]
    double cx = 32.0, cy = 32.0;
};

enum class Texture { flat = 0, stripes = 1, dots = 2 };
enum class Accessory { none = 0, glasses = 1, hat = 2 };

inline const char* texture_name(Texture t) {
    switch (t) {
        case Texture::flat: return "flat";
        case Texture::stripes: return "stripes";
        default: return "dots";
    }
}
inline const char* accessory_name(Accessory a) {
    switch (a) {
        case Accessory::none: return "none";
        case Accessory::glasses: return "glasses";
        default: return "hat";
    }
}
inline Texture texture_from(const std::string& s) {
    if (s == "flat") return Texture::flat;
    if (s == "stripes") return Texture::stripes;
    if (s == "dots") return Texture::dots;
    throw ConfigError("unknown texture: " + s);
}
inline Accessory accessory_from(const std::string& s) {
    if (s == "none") return Accessory::none;
    if (s == "glasses") return Accessory::glasses;
    if (s == "hat") return Accessory::hat;
    throw ConfigError("unknown accessory: " + s);
}

struct StyleSpec {
    double background_hue = 0.5;  // [0,1)
    Texture texture = Texture::flat;
    Accessory accessory = Accessory::none;
};

inline int hue_bucket(double hue) {
    int b = static_cast<int>(std::floor(wrap01(hue) * 8.0));
    return b < 0 ? 0 : b > 7 ? 7 : b;
}

struct Pt {
    double x = 0, y = 0;
};

using Landmarks = std::array<Pt, 5>;  // left-eye, right-eye, nose, mouth-left, mouth-right

struct FaceSample {
    Tensor<float> image;  // [3,H,W] in [0,1]
    Landmarks landmarks;
    std::string caption;
    IdentitySpec identity;
    PoseSpec pose;
    StyleSpec style;
    int id_index = -1;  // position in the dataset's identity list, -1 if standalone
};

// ---- geometry ----

// Everything is derived in a face-local frame (x right, y down, origin at the
// pose center before rotation), then mapped by p = R(rot) q + center.
struct FaceGeom {
    double hh, hw;          // ellipse half-axes, pixels
    double ex, eye_y;       // eye centers (+-ex, eye_y)
    double eye_r, iris_r;
    double brow_y, brow_rx, brow_ry;
    double nose_cy, nose_ht, nose_hb;  // centroid y, height, half-base
    double mouth_y, mouth_rx, mouth_ry;
    double hat_y;            // face points with q.y <= hat_y are capped
    double glass_r0, glass_r1;
    double cosr, sinr;
    double cx, cy;

    FaceGeom(const IdentitySpec& id, const PoseSpec& pose, int size) {
        hh = 0.5 * pose.scale * size;
        hw = hh / id.axes_ratio();
        ex = id.eye_spacing() * hw;
        eye_y = -0.30 * hh;
        eye_r = id.ring_radius() * hh;
        iris_r = 0.07 * hh;
        brow_y = eye_y - id.brow_height() * hh;
        brow_rx = 0.16 * hw;
        brow_ry = 0.045 * hh;
        nose_cy = id.nose_shift() * hh;
        nose_ht = id.nose_length() * hh;
        nose_hb = 0.11 * hw;
        mouth_y = 0.45 * hh;
        mouth_rx = id.mouth_width() * hw;
        mouth_ry = 0.07 * hh;
        hat_y = -0.72 * hh;
        glass_r0 = 0.15 * hh;
        glass_r1 = 0.22 * hh;
        cosr = std::cos(pose.rotation);
        sinr = std::sin(pose.rotation);
        cx = pose.cx;
        cy = pose.cy;
    }

    Pt to_image(double qx, double qy) const {
        return {cosr * qx - sinr * qy + cx, sinr * qx + cosr * qy + cy};
    }
    void to_face(double px, double py, double& qx, double& qy) const {
        const double dx = px - cx, dy = py - cy;
        qx = cosr * dx + sinr * dy;
        qy = -sinr * dx + cosr * dy;
    }
    // half extents of the rotated ellipse's axis-aligned bounding box
    double bbox_dx() const {
        return std::sqrt(hw * cosr * hw * cosr + hh * sinr * hh * sinr);
    }
    double bbox_dy() const {
        return std::sqrt(hw * sinr * hw * sinr + hh * cosr * hh * cosr);
    }
};

inline Landmarks landmarks_of(const IdentitySpec& id, const PoseSpec& pose, int size = 64) {
    const FaceGeom g(id, pose, size);
    Landmarks lm;
    lm[0] = g.to_image(-g.ex, g.eye_y);
    lm[1] = g.to_image(+g.ex, g.eye_y);
    lm[2] = g.to_image(0.0, g.nose_cy);
    lm[3] = g.to_image(-g.mouth_rx, g.mouth_y);
    lm[4] = g.to_image(+g.mouth_rx, g.mouth_y);
    return lm;
}

// ---- captioning ----

// Closed caption vocabulary. Index 0 is the null token, which is also what an
// empty prompt maps to.
inline const std::vector<std::string>& caption_vocab() {
    static const std::vector<std::string> vocab = {
        "[NULL]", "a", "face", "with", "on", "background",
        "plain", "glasses", "hat",
        "flat", "stripes", "dots",
        "bg0", "bg1", "bg2", "bg3", "bg4", "bg5", "bg6", "bg7",
    };
    return vocab;
}

inline int vocab_id(const std::string& token) {
    const auto& v = caption_vocab();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (v[i] == token) return static_cast<int>(i);
    throw ConfigError("token not in vocabulary: '" + token + "'");
}

inline std::string caption_of(const StyleSpec& style) {
    const char* acc = style.accessory == Accessory::none ? "plain"
                      : style.accessory == Accessory::glasses ? "glasses"
                                                              : "hat";
    return std::string("a face with ") + acc + " on bg" +
           std::to_string(hue_bucket(style.background_hue)) + " " +
           texture_name(style.texture) + " background";
}

// ---- rendering ----

namespace detail {

inline bool in_ellipse(double x, double y, double cx, double cy, double rx, double ry) {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

// apex-up triangle with centroid (0, cy), height ht, half-base hb
inline bool in_nose(double qx, double qy, double cy, double ht, double hb) {
    const double top = cy - 2.0 * ht / 3.0;
    const double bot = cy + ht / 3.0;
    if (qy < top || qy > bot) return false;
    const double w = hb * (qy - top) / ht;  // linear flare from apex
    return std::abs(qx) <= w;
}

struct Palette {
    Rgb bg[3];  // texture value variants: full, stripe-dim, dot-dim
    Rgb skin, brow, ring, iris, mouth, hat, glass;
};

inline Palette make_palette(const IdentitySpec& id, const StyleSpec& st) {
    Palette p;
    p.bg[0] = hsv_to_rgb(st.background_hue, 0.55, 0.62);
    p.bg[1] = hsv_to_rgb(st.background_hue, 0.55, 0.62 * 0.74);
    p.bg[2] = hsv_to_rgb(st.background_hue, 0.55, 0.62 * 0.70);
    p.skin = hsv_to_rgb(id.skin_hue(), 0.42, 0.92);
    p.brow = {p.skin.r * 0.45, p.skin.g * 0.45, p.skin.b * 0.45};
    p.ring = {0.02, 0.02, 0.02};
    p.iris = hsv_to_rgb(id.eye_hue(), 0.85, 0.65);
    p.mouth = {0.30, 0.02, 0.06};
    p.hat = hsv_to_rgb(0.62, 0.85, 0.55);
    p.glass = {0.35, 0.35, 0.35};
    return p;
}

inline Rgb background_color(double px, double py, const Palette& pal, const StyleSpec& st) {
    int variant = 0;
    if (st.texture == Texture::stripes) {
        const long band = static_cast<long>(std::floor((px + py) / 6.0));
        variant = ((band % 2) + 2) % 2 == 0 ? 0 : 1;
    } else if (st.texture == Texture::dots) {
        const double dx = px - std::floor(px / 8.0) * 8.0 - 4.0;
        const double dy = py - std::floor(py / 8.0) * 8.0 - 4.0;
        variant = dx * dx + dy * dy <= 6.25 ? 2 : 0;
    }
    return pal.bg[variant];
}

inline Rgb scene_color(double px, double py, const FaceGeom& g, const Palette& pal,
                       const StyleSpec& st) {
    double qx, qy;
    g.to_face(px, py, qx, qy);
    const double exx = qx / g.hw, eyy = qy / g.hh;
    if (exx * exx + eyy * eyy > 1.0) return background_color(px, py, pal, st);
    Rgb c = pal.skin;
    if (st.accessory == Accessory::hat && qy <= g.hat_y) c = pal.hat;
    for (int s = -1; s <= 1; s += 2) {
        const double dx = qx - s * g.ex, dy = qy - g.eye_y;
        const double d2 = dx * dx + dy * dy;
        if (d2 <= g.eye_r * g.eye_r) c = pal.ring;
        if (d2 <= g.iris_r * g.iris_r) c = pal.iris;
    }
    if (st.accessory == Accessory::glasses)
        for (int s = -1; s <= 1; s += 2) {
            const double dx = qx - s * g.ex, dy = qy - g.eye_y;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d >= g.glass_r0 && d <= g.glass_r1) c = pal.glass;
        }
    for (int s = -1; s <= 1; s += 2)
        if (in_ellipse(qx, qy, s * g.ex, g.brow_y, g.brow_rx, g.brow_ry)) c = pal.brow;
    if (in_nose(qx, qy, g.nose_cy, g.nose_ht, g.nose_hb)) c = {0.05, 0.05, 0.05};
    if (in_ellipse(qx, qy, 0.0, g.mouth_y, g.mouth_rx, g.mouth_ry)) c = pal.mouth;
    return c;
}

}  // namespace detail

inline bool pose_in_frame(const IdentitySpec& id, const PoseSpec& pose, int size) {
    const FaceGeom g(id, pose, size);
    const double dx = g.bbox_dx(), dy = g.bbox_dy();
    return pose.cx - dx >= 0.0 && pose.cx + dx <= size && pose.cy - dy >= 0.0 &&
           pose.cy + dy <= size;
}

// Anti-aliased renderer: 4x4 supersampling per pixel, quantized to the 8-bit
// grid so in-memory samples match their lossless round trip exactly.
inline FaceSample render_face(const IdentitySpec& id, const PoseSpec& pose, const StyleSpec& style,
                              int size = 64) {
    if (size < 32) throw ConfigError("render_face: size must be >= 32");
    for (double c : id.v)
        if (c < -1.0 || c > 1.0) throw ConfigError("render_face: identity component out of [-1,1]");
    if (!pose_in_frame(id, pose, size))
        throw ConfigError("render_face: face extends outside the canvas");

    const FaceGeom g(id, pose, size);
    const detail::Palette pal = detail::make_palette(id, style);

    FaceSample s;
    s.image = Tensor<float>(Shape{3, size, size});
    constexpr int ss = 4;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double r = 0, gg = 0, b = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double px = x + (sx + 0.5) / ss;
                    const double py = y + (sy + 0.5) / ss;
                    const Rgb c = detail::scene_color(px, py, g, pal, style);
                    r += c.r;
                    gg += c.g;
                    b += c.b;
                }
            const double inv = 1.0 / (ss * ss);
            s.image.at(0, y, x) = static_cast<float>(std::lround(r * inv * 255.0) / 255.0);
            s.image.at(1, y, x) = static_cast<float>(std::lround(gg * inv * 255.0) / 255.0);
            s.image.at(2, y, x) = static_cast<float>(std::lround(b * inv * 255.0) / 255.0);
        }
    s.landmarks = landmarks_of(id, pose, size);
    s.caption = caption_of(style);
    s.identity = id;
    s.pose = pose;
    s.style = style;
    return s;
}

// Face-free background plate with the same palette as the renderer.
inline Tensor<float> render_background(const StyleSpec& style, int size = 64) {
    IdentitySpec dummy;
    const detail::Palette pal = detail::make_palette(dummy, style);
    Tensor<float> img(Shape{3, size, size});
    constexpr int ss = 4;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            double r = 0, g = 0, b = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const Rgb c = detail::background_color(x + (sx + 0.5) / ss,
                                                           y + (sy + 0.5) / ss, pal, style);
                    r += c.r;
                    g += c.g;
                    b += c.b;
                }
            const double inv = 1.0 / (ss * ss);
            img.at(0, y, x) = static_cast<float>(std::lround(r * inv * 255.0) / 255.0);
            img.at(1, y, x) = static_cast<float>(std::lround(g * inv * 255.0) / 255.0);
            img.at(2, y, x) = static_cast<float>(std::lround(b * inv * 255.0) / 255.0);
        }
    return img;
}

// ---- sampling ----

inline IdentitySpec sample_identity(Rng& rng) {
    IdentitySpec id;
    for (auto& c : id.v) c = rng.uniform(-1.0, 1.0);
    return id;
}

inline PoseSpec sample_pose(const IdentitySpec& id, Rng& rng, int size = 64) {
    for (int tries = 0; tries < 1000; ++tries) {
        PoseSpec p;
        p.rotation = rng.uniform(-M_PI / 4.0, M_PI / 4.0);
        p.scale = rng.uniform(0.6, 1.0);
        const FaceGeom g(id, p, size);
        const double dx = g.bbox_dx(), dy = g.bbox_dy();
        if (dx > size / 2.0 - 1.0 || dy > size / 2.0 - 1.0) continue;
        p.cx = rng.uniform(dx + 1.0, size - dx - 1.0);
        p.cy = rng.uniform(dy + 1.0, size - dy - 1.0);
        return p;
    }
    throw NumericError("sample_pose: no in-frame pose found");
}

// pose whose rotated bounding box fits the requested half of the canvas
inline std::optional<PoseSpec> sample_half_pose(const IdentitySpec& id, Rng& rng, bool right,
                                                int size) {
    const double x0 = right ? size / 2.0 : 0.0;
    const double x1 = right ? static_cast<double>(size) : size / 2.0;
    for (int tries = 0; tries < 200; ++tries) {
        PoseSpec p;
        p.rotation = rng.uniform(-M_PI / 4.0, M_PI / 4.0);
        p.scale = rng.uniform(0.6, 0.68);
        const FaceGeom g(id, p, size);
        const double dx = g.bbox_dx(), dy = g.bbox_dy();
        if (x0 + dx + 1.0 >= x1 - dx - 1.0 || dy + 1.0 >= size - dy - 1.0) continue;
        p.cx = rng.uniform(x0 + dx + 1.0, x1 - dx - 1.0);
        p.cy = rng.uniform(dy + 1.0, size - dy - 1.0);
        return p;
    }
    return std::nullopt;
}

inline StyleSpec sample_style(Rng& rng) {
    StyleSpec st;
    const int bucket = rng.uniform_int(8);
    // keep the hue away from bucket edges so the captioned bucket is
    // unambiguous under pixel averaging
    st.background_hue = (bucket + 0.5 + 0.6 * (rng.uniform() - 0.5)) / 8.0;
    st.texture = static_cast<Texture>(rng.uniform_int(3));
    st.accessory = static_cast<Accessory>(rng.uniform_int(3));
    return st;
}

// Two half-constrained faces composited side by side; identity must be read
// off the half the landmark raster points at.
struct CompositePair {
    Tensor<float> image;
    Landmarks left_landmarks, right_landmarks;
    std::array<double, kIdDim> left_id{}, right_id{};
};

inline CompositePair render_composite_pair(Rng& rng, int size = 64) {
    while (true) {
        const IdentitySpec ia = sample_identity(rng);
        const IdentitySpec ib = sample_identity(rng);
        const auto pa = sample_half_pose(ia, rng, false, size);
        const auto pb = sample_half_pose(ib, rng, true, size);
        if (!pa || !pb) continue;
        const StyleSpec style = sample_style(rng);
        const FaceSample a = render_face(ia, *pa, style, size);
        const FaceSample b = render_face(ib, *pb, style, size);
        CompositePair cp;
        cp.image = a.image;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = size / 2; x < size; ++x) cp.image.at(c, y, x) = b.image.at(c, y, x);
        cp.left_landmarks = a.landmarks;
        cp.right_landmarks = b.landmarks;
        cp.left_id = ia.v;
        cp.right_id = ib.v;
        return cp;
    }
}

// n_ids identities x samples_per_id rendered views. Every sample is generated
// from its own named substream, so the result does not depend on evaluation
// order or worker count.
inline std::vector<FaceSample> make_dataset(int n_ids, int samples_per_id, uint64_t seed,
                                            int size = 64) {
    if (n_ids < 1 || samples_per_id < 1) throw ConfigError("make_dataset: counts must be >= 1");
    Rng root(seed);
    std::vector<IdentitySpec> ids(static_cast<std::size_t>(n_ids));
    for (int i = 0; i < n_ids; ++i) {
        Rng r = root.fork("identity", i);
        ids[static_cast<std::size_t>(i)] = sample_identity(r);
    }
    std::vector<FaceSample> out(static_cast<std::size_t>(n_ids) * samples_per_id);
#pragma omp parallel for schedule(static)
    for (int s = 0; s < n_ids * samples_per_id; ++s) {
        const int i = s / samples_per_id;
        Rng r = root.fork("sample", s);
        const PoseSpec pose = sample_pose(ids[static_cast<std::size_t>(i)], r, size);
        const StyleSpec style = sample_style(r);
        out[static_cast<std::size_t>(s)] =
            render_face(ids[static_cast<std::size_t>(i)], pose, style, size);
        out[static_cast<std::size_t>(s)].id_index = i;
    }
    return out;
}

// ---- dataset persistence ----

// Directory layout: manifest.jsonl plus img/NNNNNN.png. One manifest line per
// sample:
//   sample      integer index, matches the image filename
//   id_index    which identity this sample belongs to
//   image       relative path of the lossless image
//   identity    8 identity-vector components
//   landmarks   5 [x, y] pixel coordinates (left-eye, right-eye, nose,
//               mouth-left, mouth-right)
//   pose        rotation (radians), scale, center [x, y]
//   style       background_hue, texture, accessory
//   caption     space-separated tokens from the closed vocabulary
inline void write_dataset(const std::filesystem::path& dir, const std::vector<FaceSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "img");
    std::ofstream mf(dir / "manifest.jsonl", std::ios::trunc);
    if (!mf) throw DependencyError("cannot write manifest in " + dir.string());
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const FaceSample& fs_ = samples[s];
        char name[32];
        std::snprintf(name, sizeof(name), "img/%06zu.png", s);
        png_save(dir / name, fs_.image);
        nlohmann::ordered_json j;
        j["sample"] = s;
        j["id_index"] = fs_.id_index;
        j["image"] = name;
        j["identity"] = fs_.identity.v;
        auto lms = nlohmann::ordered_json::array();
        for (const Pt& p : fs_.landmarks) lms.push_back({p.x, p.y});
        j["landmarks"] = lms;
        j["pose"] = {{"rotation", fs_.pose.rotation},
                     {"scale", fs_.pose.scale},
                     {"center", {fs_.pose.cx, fs_.pose.cy}}};
        j["style"] = {{"background_hue", fs_.style.background_hue},
                      {"texture", texture_name(fs_.style.texture)},
                      {"accessory", accessory_name(fs_.style.accessory)}};
        j["caption"] = fs_.caption;
        mf << j.dump() << '\n';
    }
    if (!mf) throw DependencyError("short manifest write in " + dir.string());
}

inline std::vector<FaceSample> load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.jsonl");
    if (!mf) throw DependencyError("cannot open manifest in " + dir.string());
    std::vector<FaceSample> out;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DependencyError("bad manifest line in " + dir.string() + ": " + e.what());
        }
        FaceSample s;
        s.id_index = j.at("id_index").get<int>();
        for (int k = 0; k < kIdDim; ++k)
            s.identity.v[static_cast<std::size_t>(k)] = j.at("identity").at(k).get<double>();
        for (int k = 0; k < 5; ++k) {
            s.landmarks[static_cast<std::size_t>(k)].x = j.at("landmarks").at(k).at(0).get<double>();
            s.landmarks[static_cast<std::size_t>(k)].y = j.at("landmarks").at(k).at(1).get<double>();
        }
        s.pose.rotation = j.at("pose").at("rotation").get<double>();
        s.pose.scale = j.at("pose").at("scale").get<double>();
        s.pose.cx = j.at("pose").at("center").at(0).get<double>();
        s.pose.cy = j.at("pose").at("center").at(1).get<double>();
        s.style.background_hue = j.at("style").at("background_hue").get<double>();
        s.style.texture = texture_from(j.at("style").at("texture").get<std::string>());
        s.style.accessory = accessory_from(j.at("style").at("accessory").get<std::string>());
        s.caption = j.at("caption").get<std::string>();
        s.image = png_load(dir / j.at("image").get<std::string>());
        out.push_back(std::move(s));
    }
    if (out.empty()) throw DependencyError("empty dataset in " + dir.string());
    return out;
}

}  // namespace instid
