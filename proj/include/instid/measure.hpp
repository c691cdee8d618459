#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "instid/synthfaces.hpp"

namespace instid {

// Analytic measurement on images: guided landmark detection and style
// attribute readout. Used to score generated images, where no ground truth
// exists, and validated against rendered samples, where it does.

namespace detail {

inline double max_channel(const Tensor<float>& img, int y, int x) {
    return std::max({img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)});
}

struct WPoint {
    double x, y, w;
};

}  // namespace detail

// Guided blob detection. Hints are approximate landmark positions (the
// conditioning targets, or ground truth in tests); output refines them from
// pixel evidence: eyes and nose from near-black blobs via seeded k-means,
// mouth corners from the red-keyed mouth blob's principal axis.
inline Landmarks detect_landmarks(const Tensor<float>& img, const Landmarks& hints) {
    const int h = img.dim(1), w = img.dim(2);

    // hint-derived scale bound, used to ignore clutter far from any hint
    const double spx = (hints[3].x + hints[4].x) / 2.0 - (hints[0].x + hints[1].x) / 2.0;
    const double spy = (hints[3].y + hints[4].y) / 2.0 - (hints[0].y + hints[1].y) / 2.0;
    const double hh_est = std::max(std::sqrt(spx * spx + spy * spy) / 0.75, 4.0);
    const double r_dark = 0.35 * hh_est, r_red = 0.55 * hh_est;
    const Pt mouth_mid{(hints[3].x + hints[4].x) / 2.0, (hints[3].y + hints[4].y) / 2.0};

    std::vector<detail::WPoint> dark, red;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
            const double mx = std::max({r, g, b});
            if (mx < 0.25) {
                double near = 1e18;
                for (int k = 0; k < 3; ++k) {
                    const double dx = px - hints[static_cast<std::size_t>(k)].x;
                    const double dy = py - hints[static_cast<std::size_t>(k)].y;
                    near = std::min(near, dx * dx + dy * dy);
                }
                if (near <= r_dark * r_dark)
                    dark.push_back({px, py, (0.25 - mx) / 0.25});
            }
            if (r - std::max(g, b) >= 0.15 && mx >= 0.12 && mx <= 0.38) {
                const double dx = px - mouth_mid.x, dy = py - mouth_mid.y;
                if (dx * dx + dy * dy <= r_red * r_red) red.push_back({px, py, 1.0});
            }
        }

    Landmarks out = hints;

    // three-cluster weighted k-means seeded at the eye and nose hints
    Pt c[3] = {hints[0], hints[1], hints[2]};
    for (int iter = 0; iter < 8; ++iter) {
        double sx[3] = {0, 0, 0}, sy[3] = {0, 0, 0}, sw[3] = {0, 0, 0};
        for (const auto& p : dark) {
            int best = 0;
            double bd = 1e18;
            for (int k = 0; k < 3; ++k) {
                const double dx = p.x - c[k].x, dy = p.y - c[k].y;
                const double d = dx * dx + dy * dy;
                if (d < bd) {
                    bd = d;
                    best = k;
                }
            }
            sx[best] += p.w * p.x;
            sy[best] += p.w * p.y;
            sw[best] += p.w;
        }
        for (int k = 0; k < 3; ++k)
            if (sw[k] > 0) c[k] = {sx[k] / sw[k], sy[k] / sw[k]};
    }
    out[0] = c[0];
    out[1] = c[1];
    out[2] = c[2];

    if (red.size() >= 4) {
        // split the mouth blob into its two halves with a second k-means,
        // then place the corners from the half centroids: for a uniform
        // elliptical blob each half centroid sits 4/(3 pi) of the half-width
        // from the middle
        Pt m[2] = {hints[3], hints[4]};
        for (int iter = 0; iter < 6; ++iter) {
            double sx[2] = {0, 0}, sy[2] = {0, 0}, sw[2] = {0, 0};
            for (const auto& p : red) {
                const double d0 = (p.x - m[0].x) * (p.x - m[0].x) + (p.y - m[0].y) * (p.y - m[0].y);
                const double d1 = (p.x - m[1].x) * (p.x - m[1].x) + (p.y - m[1].y) * (p.y - m[1].y);
                const int k = d0 <= d1 ? 0 : 1;
                sx[k] += p.x;
                sy[k] += p.y;
                sw[k] += 1.0;
            }
            for (int k = 0; k < 2; ++k)
                if (sw[k] > 0) m[k] = {sx[k] / sw[k], sy[k] / sw[k]};
        }
        const double midx = (m[0].x + m[1].x) / 2.0, midy = (m[0].y + m[1].y) / 2.0;
        double ax = m[1].x - m[0].x, ay = m[1].y - m[0].y;
        const double an = std::sqrt(ax * ax + ay * ay);
        if (an > 1e-9) {
            ax /= an;
            ay /= an;
            const double half_centroid = an / 2.0;
            const double rx = half_centroid * (3.0 * M_PI / 4.0) + 0.4;
            out[3] = {midx - rx * ax, midy - rx * ay};
            out[4] = {midx + rx * ax, midy + rx * ay};
        }
    }
    return out;
}

inline double landmark_error(const Landmarks& a, const Landmarks& b) {
    double acc = 0.0;
    for (int k = 0; k < 5; ++k) {
        const double dx = a[static_cast<std::size_t>(k)].x - b[static_cast<std::size_t>(k)].x;
        const double dy = a[static_cast<std::size_t>(k)].y - b[static_cast<std::size_t>(k)].y;
        acc += std::sqrt(dx * dx + dy * dy);
    }
    return acc / 5.0;
}

struct MeasuredStyle {
    int hue_bucket = -1;
    Texture texture = Texture::flat;
    Accessory accessory = Accessory::none;
    int background_pixels = 0;
};

// Face frame estimated from landmarks alone (works on generated images):
// eye-to-mouth span fixes the vertical half-axis, the skin-pixel spread
// fixes the horizontal one.
struct FaceFrame {
    Pt center;
    double downx, downy;  // unit vector from eye line toward mouth
    double hh;            // vertical half-axis estimate, pixels
    double hw;            // horizontal half-axis estimate, pixels

    FaceFrame(const Tensor<float>& img, const Landmarks& lm) {
        const double emx = (lm[0].x + lm[1].x) / 2.0, emy = (lm[0].y + lm[1].y) / 2.0;
        const double mmx = (lm[3].x + lm[4].x) / 2.0, mmy = (lm[3].y + lm[4].y) / 2.0;
        double dx = mmx - emx, dy = mmy - emy;
        const double span = std::sqrt(dx * dx + dy * dy);
        // canonical geometry: eyes at -0.30 hh, mouth line at 0.45 hh
        hh = std::max(span / 0.75, 4.0);
        downx = dx / std::max(span, 1e-9);
        downy = dy / std::max(span, 1e-9);
        center = {emx + 0.30 * hh * downx, emy + 0.30 * hh * downy};

        const int h = img.dim(1), w = img.dim(2);
        std::vector<double> sides;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double hue, s, v;
                rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), hue, s, v);
                if (v < 0.75 || s < 0.25 || s > 0.60) continue;
                if (!(hue <= 0.17 || hue >= 0.97)) continue;  // warm skin tones only
                const double px = x + 0.5 - center.x, py = y + 0.5 - center.y;
                const double dd = px * downx + py * downy;
                if (std::abs(dd) > 0.35 * hh) continue;
                sides.push_back(std::abs(-px * downy + py * downx));
            }
        if (sides.size() >= 20) {
            std::sort(sides.begin(), sides.end());
            const double q97 = sides[static_cast<std::size_t>(sides.size() * 0.97)];
            hw = std::min(q97 / 0.95, hh);
        } else {
            hw = hh * 0.8;
        }
    }

    void decompose(double px, double py, double& d_down, double& d_side) const {
        const double dx = px - center.x, dy = py - center.y;
        d_down = dx * downx + dy * downy;
        d_side = -dx * downy + dy * downx;
    }
};

inline MeasuredStyle measure_style(const Tensor<float>& img, const Landmarks& lm) {
    const int h = img.dim(1), w = img.dim(2);
    const FaceFrame f(img, lm);

    MeasuredStyle m;

    // background: strictly outside the face circle (hw <= hh always)
    double hx = 0.0, hy = 0.0;
    std::vector<double> values;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dx = x + 0.5 - f.center.x, dy = y + 0.5 - f.center.y;
            if (dx * dx + dy * dy <= 1.15 * 1.15 * f.hh * f.hh) continue;
            double hue, s, v;
            rgb_to_hsv(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x), hue, s, v);
            hx += std::cos(2.0 * M_PI * hue);
            hy += std::sin(2.0 * M_PI * hue);
            values.push_back(v);
        }
    m.background_pixels = static_cast<int>(values.size());
    if (!values.empty()) {
        const double mean_hue = wrap01(std::atan2(hy, hx) / (2.0 * M_PI));
        m.hue_bucket = hue_bucket(mean_hue);
        std::sort(values.begin(), values.end());
        const double v_lo = values[static_cast<std::size_t>(values.size() * 0.10)];
        const double v_hi = values[static_cast<std::size_t>(values.size() * 0.90)];
        if (v_hi - v_lo < 0.06) {
            m.texture = Texture::flat;
        } else {
            const double mid = (v_hi + v_lo) / 2.0;
            int dim = 0;
            for (double v : values)
                if (v < mid) ++dim;
            const double frac = static_cast<double>(dim) / static_cast<double>(values.size());
            m.texture = frac < 0.42 ? Texture::dots : Texture::stripes;
        }
    }

    // hat: blue pixels in the upper interior of the estimated face ellipse
    int blue = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double dd, ds;
            f.decompose(x + 0.5, y + 0.5, dd, ds);
            if (dd > -0.6 * f.hh) continue;
            const double e = (ds / f.hw) * (ds / f.hw) + (dd / f.hh) * (dd / f.hh);
            if (e > 0.92) continue;
            const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
            if (b - std::max(r, g) >= 0.15 && b >= 0.35) ++blue;
        }
    // glasses: gray ring pixels around either eye
    int gray = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool near_eye = false;
            for (int k = 0; k < 2; ++k) {
                const double dx = px - lm[static_cast<std::size_t>(k)].x;
                const double dy = py - lm[static_cast<std::size_t>(k)].y;
                if (dx * dx + dy * dy <= 0.30 * 0.30 * f.hh * f.hh) near_eye = true;
            }
            if (!near_eye) continue;
            const double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
            const double v = std::max({r, g, b});
            if (std::abs(r - g) <= 0.07 && std::abs(g - b) <= 0.07 && std::abs(r - b) <= 0.07 &&
                v >= 0.22 && v <= 0.50)
                ++gray;
        }
    if (blue >= 0.05 * f.hh * f.hw)
        m.accessory = Accessory::hat;
    else if (gray >= 0.04 * f.hh * f.hh)
        m.accessory = Accessory::glasses;
    return m;
}

// Exact-geometry hue check for rendered samples: circular mean over pixels
// outside the true face ellipse.
inline int measured_hue_bucket_outside_ellipse(const FaceSample& s) {
    const FaceGeom g(s.identity, s.pose, s.image.dim(1));
    double hx = 0.0, hy = 0.0;
    const int h = s.image.dim(1), w = s.image.dim(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double qx, qy;
            g.to_face(x + 0.5, y + 0.5, qx, qy);
            if ((qx / g.hw) * (qx / g.hw) + (qy / g.hh) * (qy / g.hh) <= 1.0) continue;
            double hue, sat, val;
            rgb_to_hsv(s.image.at(0, y, x), s.image.at(1, y, x), s.image.at(2, y, x), hue, sat, val);
            hx += std::cos(2.0 * M_PI * hue);
            hy += std::sin(2.0 * M_PI * hue);
        }
    return hue_bucket(wrap01(std::atan2(hy, hx) / (2.0 * M_PI)));
}

struct LandmarkMap {
    Tensor<float> map;  // [5,H,W], one anti-aliased disk per landmark
    bool any_out_of_frame = false;
};

// Spatial conditioning raster: one channel per landmark, value 1 inside a
// disk of the given radius, anti-aliased at the rim. A landmark outside the
// canvas leaves its channel empty and raises the warning flag.
inline LandmarkMap rasterize_landmarks(const Landmarks& lm, int size = 64, double radius = 3.0) {
    LandmarkMap out{Tensor<float>(Shape{5, size, size}), false};
    constexpr int ss = 4;
    for (int k = 0; k < 5; ++k) {
        const Pt& p = lm[static_cast<std::size_t>(k)];
        if (p.x < 0.0 || p.x > size || p.y < 0.0 || p.y > size) {
            out.any_out_of_frame = true;
            continue;
        }
        const int x0 = std::max(0, static_cast<int>(std::floor(p.x - radius - 1.0)));
        const int x1 = std::min(size - 1, static_cast<int>(std::ceil(p.x + radius + 1.0)));
        const int y0 = std::max(0, static_cast<int>(std::floor(p.y - radius - 1.0)));
        const int y1 = std::min(size - 1, static_cast<int>(std::ceil(p.y + radius + 1.0)));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                int hit = 0;
                for (int sy = 0; sy < ss; ++sy)
                    for (int sx = 0; sx < ss; ++sx) {
                        const double dx = x + (sx + 0.5) / ss - p.x;
                        const double dy = y + (sy + 0.5) / ss - p.y;
                        if (dx * dx + dy * dy <= radius * radius) ++hit;
                    }
                out.map.at(k, y, x) = static_cast<float>(hit) / (ss * ss);
            }
    }
    return out;
}

}  // namespace instid
