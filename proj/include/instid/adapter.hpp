#pragma once

#include <cmath>
#include <string>

#include "instid/diffcore.hpp"
#include "instid/idembed.hpp"

namespace instid {

// Image adapter: a bias-free projection turning one identity embedding into a
// short sequence of context tokens, plus per-attention-site key/value maps
// whose output is added to the text attention inside each base UNet block.
// Value maps start at zero so a fresh adapter leaves the base model intact.

inline constexpr int kIdTokens = 4;

struct AdapterState {
    Tensor<float> id_tokens;  // [kIdTokens, kCtxDim]
    double lambda = 1.0;
};

inline void validate_adapter_state(const AdapterState& s) {
    if (s.id_tokens.shape != Shape{kIdTokens, kCtxDim})
        throw ShapeError("adapter state: id_tokens must be [" + std::to_string(kIdTokens) + "," +
                         std::to_string(kCtxDim) + "]");
    if (!std::isfinite(s.lambda) || s.lambda < 0.0)
        throw ConfigError("adapter state: lambda must be finite and >= 0");
}

template <typename T>
void init_adapter(ParamStore<T>& ps, Rng& rng) {
    ps.add("adapter.proj.w",
           Tensor<T>::randn(Shape{kIdTokens * kCtxDim, kEmbedDim}, rng, T(0.02)));
    for (const auto& site : unet_attn_sites()) {
        const int c = attn_site_channels(site);
        ps.add("adapter." + site + ".wk.w", Tensor<T>::randn(Shape{c, kCtxDim}, rng, T(0.02)));
        ps.add("adapter." + site + ".wv.w", Tensor<T>(Shape{c, kCtxDim}));
    }
}

// [1, kEmbedDim] -> [kIdTokens, kCtxDim], a pure linear map so scaling the
// embedding scales the tokens.
template <typename T>
typename Tape<T>::Var project_id_t(Ctx<T>& cx, typename Tape<T>::Var emb) {
    if (cx.tape.val(emb).shape != Shape{1, kEmbedDim})
        throw ShapeError("project_id: embedding must be [1," + std::to_string(kEmbedDim) + "]");
    return cx.tape.reshape(cx.tape.matmul_nt(emb, cx.p("adapter.proj.w")),
                           Shape{kIdTokens, kCtxDim});
}

inline Tensor<float> embedding_row(const Tensor<double>& embedding) {
    if (embedding.shape != Shape{1, kEmbedDim})
        throw ShapeError("embedding must be [1," + std::to_string(kEmbedDim) + "]");
    Tensor<float> row(Shape{1, kEmbedDim});
    for (std::int64_t i = 0; i < row.numel(); ++i) row[i] = static_cast<float>(embedding[i]);
    return row;
}

inline Tensor<float> project_id(const ParamStore<float>& ps, const Tensor<double>& embedding) {
    Tape<float> tape;
    Ctx<float> cx(tape, const_cast<ParamStore<float>&>(ps));
    return tape.val(project_id_t(cx, tape.leaf(embedding_row(embedding))));
}

// softmax(q k^T / sqrt(d)) v
template <typename T>
typename Tape<T>::Var sdp_attention(Tape<T>& t, typename Tape<T>::Var q, typename Tape<T>::Var k,
                                    typename Tape<T>::Var v) {
    const int d = t.val(q).dim(1);
    if (t.val(k).dim(1) != d) throw ShapeError("attention: query/key width mismatch");
    return t.matmul(t.softmax_rows(t.scale(t.matmul_nt(q, k), static_cast<T>(1.0 / std::sqrt(d)))),
                    v);
}

// Z = Attention(Q, K_text, V_text) + lambda * Attention(Q, K_id, V_id), with
// text keys/values from the frozen site weights and identity keys/values from
// the adapter's. lambda = 0 skips the identity branch entirely, so the text
// term is untouched bit for bit.
template <typename T>
typename Tape<T>::Var decoupled_attention(Ctx<T>& cx, const std::string& site,
                                          typename Tape<T>::Var q, typename Tape<T>::Var text_ctx,
                                          typename Tape<T>::Var id_tokens, T lambda) {
    if (!std::isfinite(static_cast<double>(lambda)) || lambda < T(0))
        throw ConfigError("decoupled attention: lambda must be finite and >= 0");
    auto& t = cx.tape;
    auto z = sdp_attention(t, q, t.matmul_nt(text_ctx, cx.p(site + ".k.w")),
                           t.matmul_nt(text_ctx, cx.p(site + ".v.w")));
    if (lambda == T(0)) return z;
    auto ki = t.matmul_nt(id_tokens, cx.p("adapter." + site + ".wk.w"));
    auto vi = t.matmul_nt(id_tokens, cx.p("adapter." + site + ".wv.w"));
    return t.add_scaled(z, sdp_attention(t, q, ki, vi), lambda);
}

// Attention addend injected into the base UNet: the identity term of the
// decoupled sum, scaled by lambda. lambda = 0 yields no hook at all, keeping
// the base forward pass bit-identical.
template <typename T>
AttnHook<T> adapter_hook(typename Tape<T>::Var id_tokens, T lambda) {
    if (!std::isfinite(static_cast<double>(lambda)) || lambda < T(0))
        throw ConfigError("adapter hook: lambda must be finite and >= 0");
    if (lambda == T(0)) return nullptr;
    return [id_tokens, lambda](Ctx<T>& cx, const std::string& site, typename Tape<T>::Var q)
               -> std::optional<typename Tape<T>::Var> {
        auto& t = cx.tape;
        auto ki = t.matmul_nt(id_tokens, cx.p("adapter." + site + ".wk.w"));
        auto vi = t.matmul_nt(id_tokens, cx.p("adapter." + site + ".wv.w"));
        return t.scale(sdp_attention(t, q, ki, vi), lambda);
    };
}

}  // namespace instid
