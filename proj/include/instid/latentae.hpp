#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "instid/archive.hpp"
#include "instid/nn.hpp"
#include "instid/synthfaces.hpp"

namespace instid {

// Latent autoencoder: [3,H,W] images in [0,1] down to [4,H/4,W/4] latents and
// back. After training, per-channel latent mean/std are folded into the two
// 1x1 latent convs, so encoder outputs are zero-mean unit-variance per channel
// with no separate normalization step. The fold is exact because a 1x1 conv is
// pointwise; folding into a padded 3x3 conv would break at the borders.

inline constexpr int kLatentChannels = 4;
inline constexpr int kLatentFactor = 4;
inline constexpr const char* kAeVersion = "ae-v1";

struct AutoEnc {
    ParamStore<float> params;
};

inline void init_ae(ParamStore<float>& ps, Rng& rng) {
    init_conv(ps, "ae.e0", 16, 3, 3, rng);
    init_gn(ps, "ae.en0", 16);
    init_conv(ps, "ae.e1", 32, 16, 3, rng);
    init_gn(ps, "ae.en1", 32);
    init_conv(ps, "ae.e2", 48, 32, 3, rng);
    init_gn(ps, "ae.en2", 48);
    init_conv(ps, "ae.e3", 48, 48, 3, rng);
    init_gn(ps, "ae.en3", 48);
    init_conv(ps, "ae.ez", kLatentChannels, 48, 1, rng);
    init_conv(ps, "ae.dz", 48, kLatentChannels, 1, rng);
    init_gn(ps, "ae.dn0", 48);
    init_conv(ps, "ae.d0", 48, 48, 3, rng);
    init_gn(ps, "ae.dn1", 48);
    init_conv(ps, "ae.d1", 24, 48, 3, rng);
    init_gn(ps, "ae.dn2", 24);
    init_conv(ps, "ae.d2", 12, 24, 3, rng);
    init_gn(ps, "ae.dn3", 12);
    init_conv(ps, "ae.d3", 3, 12, 3, rng);
}

template <typename T>
typename Tape<T>::Var ae_encode_t(Ctx<T>& cx, typename Tape<T>::Var x) {
    auto& t = cx.tape;
    x = t.silu(gn(cx, "ae.en0", conv(cx, "ae.e0", x, 1, 1), 8));
    x = t.silu(gn(cx, "ae.en1", conv(cx, "ae.e1", x, 2, 1), 8));
    x = t.silu(gn(cx, "ae.en2", conv(cx, "ae.e2", x, 2, 1), 8));
    x = t.silu(gn(cx, "ae.en3", conv(cx, "ae.e3", x, 1, 1), 8));
    return conv(cx, "ae.ez", x, 1, 0);
}

template <typename T>
typename Tape<T>::Var ae_decode_t(Ctx<T>& cx, typename Tape<T>::Var z) {
    auto& t = cx.tape;
    auto h = t.silu(gn(cx, "ae.dn0", conv(cx, "ae.dz", z, 1, 0), 8));
    h = t.silu(gn(cx, "ae.dn1", conv(cx, "ae.d0", h, 1, 1), 8));
    h = t.upsample2x(h);
    h = t.silu(gn(cx, "ae.dn2", conv(cx, "ae.d1", h, 1, 1), 8));
    h = t.upsample2x(h);
    h = t.silu(gn(cx, "ae.dn3", conv(cx, "ae.d2", h, 1, 1), 4));
    return t.sigmoid(conv(cx, "ae.d3", h, 1, 1));
}

namespace detail {

inline void check_image_for_encode(const Tensor<float>& img) {
    if (img.ndim() != 3 || img.dim(0) != 3)
        throw ShapeError("encode: need a [3,H,W] image");
    if (img.dim(1) % kLatentFactor != 0 || img.dim(2) % kLatentFactor != 0)
        throw ShapeError("encode: image sides must be multiples of 4");
    if (img.dim(1) < 16 || img.dim(2) < 16)
        throw ShapeError("encode: image sides must be at least 16");
}

}  // namespace detail

inline Tensor<float> encode(const AutoEnc& ae, const Tensor<float>& img) {
    detail::check_image_for_encode(img);
    Tape<float> tape;
    Ctx<float> cx(tape, const_cast<ParamStore<float>&>(ae.params));
    return tape.val(ae_encode_t(cx, tape.leaf(img)));
}

inline Tensor<float> decode(const AutoEnc& ae, const Tensor<float>& z) {
    if (z.ndim() != 3 || z.dim(0) != kLatentChannels)
        throw ShapeError("decode: need a [4,h,w] latent");
    Tape<float> tape;
    Ctx<float> cx(tape, const_cast<ParamStore<float>&>(ae.params));
    return tape.val(ae_decode_t(cx, tape.leaf(z)));
}

inline Tensor<float> roundtrip(const AutoEnc& ae, const Tensor<float>& img) {
    return decode(ae, encode(ae, img));
}

inline void put_ae(TensorArchive& ar, const AutoEnc& ae) {
    ar.put_params(ae.params);
    ar.set_meta("ae_version", kAeVersion);
}

inline AutoEnc get_ae(const TensorArchive& ar) {
    if (!ar.has_meta("ae_version") || ar.meta("ae_version") != kAeVersion)
        throw DependencyError("autoencoder archive has wrong or missing version tag");
    AutoEnc ae;
    Rng rng(0);
    init_ae(ae.params, rng);
    ar.load_params(ae.params);
    return ae;
}

// ---- training ----

struct AETrainConfig {
    int steps = 3000;
    int batch = 16;
    double lr = 8e-3;
    uint64_t seed = 0;
    int stat_samples = 256;  // images used to estimate latent channel stats
    double p_fresh = 0.1;    // fresh procedural renders mixed into the batch
};

// Rescales the latent space so each channel has zero mean and unit variance
// over the given images. Exact: encode/decode compose to the same map before
// and after, only the latent coordinates change.
inline void fold_latent_stats(AutoEnc& ae, const std::vector<FaceSample>& data, int stat_samples) {
    if (data.empty()) throw ConfigError("fold_latent_stats: empty dataset");
    const std::size_t n =
        std::min<std::size_t>(static_cast<std::size_t>(stat_samples), data.size());
    std::array<double, kLatentChannels> sum{}, sq{};
    std::int64_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = i * data.size() / n;
        const Tensor<float> z = encode(ae, data[idx].image);
        const std::int64_t hw = z.dim(1) * z.dim(2);
        for (int c = 0; c < kLatentChannels; ++c)
            for (std::int64_t p = 0; p < hw; ++p) {
                const double v = z[c * hw + p];
                sum[static_cast<std::size_t>(c)] += v;
                sq[static_cast<std::size_t>(c)] += v * v;
            }
        count += hw;
    }
    std::array<double, kLatentChannels> mu{}, sigma{};
    for (int c = 0; c < kLatentChannels; ++c) {
        mu[static_cast<std::size_t>(c)] = sum[static_cast<std::size_t>(c)] / count;
        const double var = sq[static_cast<std::size_t>(c)] / count -
                           mu[static_cast<std::size_t>(c)] * mu[static_cast<std::size_t>(c)];
        if (var < 1e-12) throw NumericError("fold_latent_stats: dead latent channel");
        sigma[static_cast<std::size_t>(c)] = std::sqrt(var);
    }

    // encoder head: z' = (z - mu) / sigma
    Tensor<float>& ew = ae.params.at("ae.ez.w");  // [4, 48, 1, 1]
    Tensor<float>& eb = ae.params.at("ae.ez.b");
    const std::int64_t ein = ew.numel() / kLatentChannels;
    for (int c = 0; c < kLatentChannels; ++c) {
        const float s = static_cast<float>(sigma[static_cast<std::size_t>(c)]);
        for (std::int64_t k = 0; k < ein; ++k) ew[c * ein + k] /= s;
        eb[c] = static_cast<float>((eb[c] - mu[static_cast<std::size_t>(c)]) / s);
    }

    // decoder head consumes z = sigma * z' + mu
    Tensor<float>& dw = ae.params.at("ae.dz.w");  // [48, 4, 1, 1]
    Tensor<float>& db = ae.params.at("ae.dz.b");
    const std::int64_t dout = dw.dim(0);
    for (std::int64_t j = 0; j < dout; ++j) {
        double shift = 0.0;
        for (int c = 0; c < kLatentChannels; ++c) {
            shift += dw[j * kLatentChannels + c] * mu[static_cast<std::size_t>(c)];
            dw[j * kLatentChannels + c] = static_cast<float>(
                dw[j * kLatentChannels + c] * sigma[static_cast<std::size_t>(c)]);
        }
        db[j] = static_cast<float>(db[j] + shift);
    }
}

inline AutoEnc train_ae(const std::vector<FaceSample>& data, const AETrainConfig& cfg,
                        std::ostream* loss_csv = nullptr) {
    if (data.empty()) throw ConfigError("train_ae: empty dataset");

    Rng root(cfg.seed);
    AutoEnc ae;
    {
        Rng irng = root.fork("ae-init");
        init_ae(ae.params, irng);
    }

    Adam<float> opt(static_cast<float>(cfg.lr));
    Rng drw = root.fork("draw");

    const int size = data[0].image.dim(1);
    for (int step = 0; step < cfg.steps; ++step) {
        GradMap<float> grads;
        double loss_acc = 0.0;
        for (int bi = 0; bi < cfg.batch; ++bi) {
            Tensor<float> img;
            if (drw.uniform() < cfg.p_fresh) {
                // keep off-dataset content (plates, two-face composites) in
                // distribution, so round trips of such images stay faithful
                const double kind = drw.uniform();
                if (kind < 0.3) {
                    img = render_background(sample_style(drw), size);
                } else if (kind < 0.5) {
                    img = render_composite_pair(drw, size).image;
                } else {
                    const IdentitySpec id = sample_identity(drw);
                    img = render_face(id, sample_pose(id, drw, size), sample_style(drw), size)
                              .image;
                }
            } else {
                img = data[static_cast<std::size_t>(
                              drw.uniform_int(static_cast<int>(data.size())))]
                          .image;
            }
            Tape<float> tape;
            Ctx<float> cx(tape, ae.params, [](const std::string&) { return true; });
            auto loss = tape.mse(ae_decode_t(cx, ae_encode_t(cx, tape.leaf(img))), img);
            const double lv = tape.val(loss)[0];
            if (!std::isfinite(lv)) throw NumericError("train_ae: loss became non-finite");
            loss_acc += lv;
            tape.backward(loss);
            collect_grads(tape, cx, grads);
        }
        scale_grads(grads, 1.0f / static_cast<float>(cfg.batch));
        clip_global_norm(grads, 10.0);
        opt.set_lr(static_cast<float>(cosine_lr(step, cfg.steps, cfg.lr)));
        opt.step(ae.params, grads);
        if (loss_csv) (*loss_csv) << step << ',' << loss_acc / cfg.batch << '\n';
    }

    fold_latent_stats(ae, data, cfg.stat_samples);
    return ae;
}

// Mean reconstruction PSNR in dB over a sample set.
inline double validate_ae(const AutoEnc& ae, const std::vector<FaceSample>& samples) {
    if (samples.empty()) throw ConfigError("validate_ae: no samples");
    double acc = 0.0;
    for (const FaceSample& s : samples) acc += psnr(s.image, roundtrip(ae, s.image));
    return acc / static_cast<double>(samples.size());
}

}  // namespace instid
