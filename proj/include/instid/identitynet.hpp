#pragma once

#include <string>
#include <vector>

#include "instid/diffcore.hpp"
#include "instid/measure.hpp"

namespace instid {

// Identity-conditioned control branch: a trainable copy of the base UNet
// encoder and middle block. The landmark raster enters through an input zero
// conv added to the noisy latent; cross-attention reads projected identity
// tokens instead of text; each encoder skip and the middle block leaves
// through its own output zero conv. With both zero-conv layers at init, the
// branch contributes exactly nothing until trained.

inline const std::vector<std::string>& idnet_encoder_blocks() {
    static const std::vector<std::string> blocks = {"in.",  "e0r.", "e0a.", "d1.", "e1r.", "e1a.",
                                                    "d2.",  "e2r.", "e2a.", "mr.", "ma."};
    return blocks;
}

// The copied encoder starts from the frozen base weights; the hint conv also
// downsamples the image-resolution raster to latent resolution in one stride.
template <typename T>
void init_idnet(ParamStore<T>& ps, const ParamStore<T>& base) {
    if (base.names_with_prefix("unet.in.").empty())
        throw DependencyError("identitynet init requires the base unet weights");
    init_conv_zero(ps, "idnet.hint", kLatentChannels, 5, 8);
    for (const auto& blk : idnet_encoder_blocks())
        for (const auto& name : base.names_with_prefix("unet." + blk))
            ps.add("idnet." + name.substr(5), base.at(name));
    init_conv_zero(ps, "idnet.tap0", 32, 32, 1);
    init_conv_zero(ps, "idnet.tap1", 64, 64, 1);
    init_conv_zero(ps, "idnet.tap2", 128, 128, 1);
    init_conv_zero(ps, "idnet.tapm", 128, 128, 1);
}

// Runs the copied encoder on z_t plus the raster hint and returns one
// residual per injection point. There is no unconditional mode: identity
// tokens are mandatory, and no text ever reaches this branch.
template <typename T>
ControlTaps<T> control_residuals(Ctx<T>& cx, typename Tape<T>::Var z_t,
                                 typename Tape<T>::Var temb, typename Tape<T>::Var raster,
                                 typename Tape<T>::Var id_tokens, T scale = T(1)) {
    auto& t = cx.tape;
    const auto& Z = t.val(z_t);
    const auto& R = t.val(raster);
    const auto& I = t.val(id_tokens);
    if (I.ndim() != 2 || I.dim(0) < 1 || I.dim(1) != kCtxDim)
        throw ConfigError("identitynet requires id tokens shaped [n," +
                          std::to_string(kCtxDim) + "]");
    if (Z.ndim() != 3 || Z.dim(0) != kLatentChannels)
        throw ShapeError("identitynet: latent must be [4,H,W]");
    if (R.ndim() != 3 || R.dim(0) != 5 || R.dim(1) != Z.dim(1) * kLatentFactor ||
        R.dim(2) != Z.dim(2) * kLatentFactor)
        throw ShapeError("identitynet: raster must be [5,4H,4W] for a [4,H,W] latent");
    auto hint = conv(cx, "idnet.hint", raster, kLatentFactor, 2);
    auto f = unet_encode(cx, "idnet.", t.add(z_t, hint), temb, id_tokens);
    ControlTaps<T> taps;
    taps.enc0 = conv(cx, "idnet.tap0", f.h0, 1, 0);
    taps.enc1 = conv(cx, "idnet.tap1", f.h1, 1, 0);
    taps.enc2 = conv(cx, "idnet.tap2", f.h2, 1, 0);
    taps.mid = conv(cx, "idnet.tapm", f.mid, 1, 0);
    taps.scale = scale;
    return taps;
}

struct ResidualSet {
    Tensor<float> enc0, enc1, enc2, mid;
};

// Plain-tensor evaluation; the timestep embedding comes from the base MLP, so
// the store must hold both "unet.temb*" and "idnet.*" weights.
inline ResidualSet eval_control_residuals(const ParamStore<float>& ps, const Tensor<float>& z_t,
                                          int t, const Tensor<float>& raster,
                                          const Tensor<float>& id_tokens) {
    Tape<float> tape;
    Ctx<float> cx(tape, const_cast<ParamStore<float>&>(ps));
    auto temb = time_mlp(cx, "unet.", t);
    auto taps = control_residuals(cx, tape.leaf(z_t), temb, tape.leaf(raster),
                                  tape.leaf(id_tokens));
    return {tape.val(taps.enc0), tape.val(taps.enc1), tape.val(taps.enc2), tape.val(taps.mid)};
}

}  // namespace instid
