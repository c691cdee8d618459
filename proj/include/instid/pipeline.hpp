#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "instid/adapter.hpp"
#include "instid/idembed.hpp"
#include "instid/identitynet.hpp"
#include "instid/measure.hpp"

namespace instid {

inline constexpr const char* kInstantIDVersion = "instid-v1";

// Frozen autoencoder and base denoiser plus the trainable identity modules,
// merged into one parameter store so one context serves the whole forward
// pass. The hashes pin the frozen groups for checkpoint provenance.
struct InstantID {
    AutoEnc ae;
    ParamStore<float> params;  // unet.*, text.embed, adapter.*, idnet.*
    NoiseSchedule sched;
    std::string unet_hash, text_hash, ae_hash;
};

inline InstantID assemble_instantid(const AutoEnc& ae, const BaseModel& base, uint64_t seed) {
    InstantID m;
    m.ae = ae;
    m.sched = base.sched;
    for (const auto& name : base.params.names_with_prefix(""))
        m.params.add(name, base.params.at(name));
    Rng rng = Rng(seed).fork("adapter");
    init_adapter(m.params, rng);
    init_idnet(m.params, m.params);
    m.unet_hash = params_hash(m.params, "unet.");
    m.text_hash = params_hash(m.params, "text.");
    m.ae_hash = params_hash(m.ae.params, "ae.");
    return m;
}

// ---- checkpoints ----

inline void put_instantid(TensorArchive& ar, const InstantID& m,
                          const std::string& train_meta = "") {
    for (const auto& name : m.params.names_with_prefix("adapter."))
        ar.put(name, m.params.at(name));
    for (const auto& name : m.params.names_with_prefix("idnet."))
        ar.put(name, m.params.at(name));
    ar.set_meta("instid_version", kInstantIDVersion);
    ar.set_meta("hash_unet", m.unet_hash);
    ar.set_meta("hash_text", m.text_hash);
    ar.set_meta("hash_ae", m.ae_hash);
    if (!train_meta.empty()) ar.set_meta("train_config", train_meta);
}

// Loads the trained identity modules into an assembled model. The archive
// must reference exactly the frozen weights the model was assembled from.
inline void load_instantid(InstantID& m, const TensorArchive& ar) {
    if (!ar.has_meta("instid_version") || ar.meta("instid_version") != kInstantIDVersion)
        throw DependencyError("checkpoint archive has wrong or missing version tag");
    if (ar.meta("hash_unet") != m.unet_hash || ar.meta("hash_text") != m.text_hash ||
        ar.meta("hash_ae") != m.ae_hash)
        throw DependencyError("checkpoint was trained against a different frozen base");
    for (const auto& name : ar.names_with_prefix("")) {
        if (!name.starts_with("adapter.") && !name.starts_with("idnet."))
            throw DependencyError("checkpoint holds a foreign tensor: " + name);
        m.params.at(name) = ar.get<float>(name);
    }
}

// ---- training ----

struct InstantIDTrainConfig {
    int steps = 4000;
    int batch = 16;
    double lr = 1e-3;
    uint64_t seed = 0;
    double clip = 10.0;
};

inline std::string train_config_meta(const InstantIDTrainConfig& c) {
    std::ostringstream os;
    os << "steps=" << c.steps << ";batch=" << c.batch << ";lr=" << c.lr << ";seed=" << c.seed
       << ";clip=" << c.clip;
    return os.str();
}

// Denoising objective with both identity conditions attached: the adapter
// reads the projected tokens at every attention site, the control branch
// reads them plus the sample's own landmark raster (self-reconstruction).
// Conditions are never dropped, and only adapter.* / idnet.* receive updates.
inline void train_instantid(InstantID& m, const std::vector<FaceSample>& data,
                            const InstantIDTrainConfig& cfg, std::ostream* loss_csv = nullptr) {
    if (data.empty()) throw ConfigError("train_instantid: empty dataset");
    if (cfg.steps < 1 || cfg.batch < 1) throw ConfigError("train_instantid: bad steps/batch");
    if (params_hash(m.params, "unet.") != m.unet_hash ||
        params_hash(m.params, "text.") != m.text_hash ||
        params_hash(m.ae.params, "ae.") != m.ae_hash)
        throw DependencyError("train_instantid: frozen weights do not match their recorded hashes");

    const EmbedOracle oracle = make_embed_oracle();
    std::vector<Tensor<float>> lat(data.size());
    std::vector<TextContext> ctx(data.size());
    std::vector<Tensor<float>> emb(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        lat[i] = encode(m.ae, data[i].image);
        ctx[i] = tokenize(data[i].caption);
        emb[i] = embedding_row(oracle.embed(data[i].identity));
    }

    auto trainable = [](const std::string& n) {
        return n.starts_with("adapter.") || n.starts_with("idnet.");
    };
    Adam<float> opt(static_cast<float>(cfg.lr));
    Rng draw = Rng(cfg.seed).fork("draw");
    if (loss_csv) *loss_csv << "step,loss\n";
    for (int step = 0; step < cfg.steps; ++step) {
        GradMap<float> grads;
        double loss_acc = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto i = static_cast<std::size_t>(
                draw.uniform_int(static_cast<std::int64_t>(data.size())));
            const int t = static_cast<int>(draw.uniform_int(m.sched.T));
            const Tensor<float> eps = Tensor<float>::randn(lat[i].shape, draw);
            const Tensor<float> z_t = add_noise(m.sched, lat[i], t, eps);
            const LandmarkMap raster =
                rasterize_landmarks(data[i].landmarks, data[i].image.dim(1));

            Tape<float> tape;
            Ctx<float> cx(tape, m.params, trainable);
            auto temb = time_mlp(cx, "unet.", t);
            auto ctxv = text_embed(cx, ctx[i]);
            auto zv = tape.leaf(z_t);
            auto tokens = project_id_t(cx, tape.leaf(emb[i]));
            auto hook = adapter_hook<float>(tokens, 1.0f);
            auto taps = control_residuals(cx, zv, temb, tape.leaf(raster.map), tokens, 1.0f);
            auto pred = unet_apply(cx, "unet.", zv, temb, ctxv, hook, &taps);
            auto loss = tape.mse(pred, eps);
            tape.backward(loss);
            collect_grads(tape, cx, grads);
            loss_acc += tape.val(loss)[0];
        }
        const double mean_loss = loss_acc / cfg.batch;
        if (!std::isfinite(mean_loss))
            throw NumericError("train_instantid: non-finite loss at step " + std::to_string(step));
        scale_grads(grads, 1.0f / static_cast<float>(cfg.batch));
        clip_global_norm(grads, cfg.clip);
        opt.set_lr(static_cast<float>(cosine_lr(step, cfg.steps, cfg.lr)));
        opt.step(m.params, grads);
        if (loss_csv) *loss_csv << step << ',' << mean_loss << '\n';
    }
}

// ---- generation ----

struct GenerationConfig {
    double adapter_scale = 1.0;  // weight of the identity attention term
    double idnet_scale = 1.0;    // weight of the control residuals
    int steps = 50;
    uint64_t seed = 0;
    std::string prompt;  // empty maps to the null token
    std::optional<Landmarks> target_landmarks;
    int image_size = 64;
};

inline void validate_generation_config(const GenerationConfig& c) {
    if (!std::isfinite(c.adapter_scale) || c.adapter_scale < 0.0)
        throw ConfigError("generation: adapter scale must be finite and >= 0");
    if (!std::isfinite(c.idnet_scale) || c.idnet_scale < 0.0)
        throw ConfigError("generation: control scale must be finite and >= 0");
    if (c.steps < 1) throw ConfigError("generation: steps must be >= 1");
    if (c.image_size < 32 || c.image_size % 16 != 0)
        throw ConfigError("generation: image size must be a multiple of 16, at least 32");
    if (c.idnet_scale > 0.0 && !c.target_landmarks)
        throw ConfigError("generation: target landmarks required when the control branch is on");
}

// Identity-conditioned sampling. References are averaged into one embedding,
// projected once per denoiser call, and shared by both branches. A zero
// strength skips its branch entirely, so the zero/zero corner reproduces the
// base model bit for bit.
inline Tensor<float> generate(const InstantID& model, const std::vector<Tensor<double>>& references,
                              const GenerationConfig& cfg) {
    validate_generation_config(cfg);
    if (references.empty()) throw ConfigError("generate: need at least one reference embedding");
    InstantID& m = const_cast<InstantID&>(model);
    const Tensor<float> row = embedding_row(embed_average(references));
    const bool use_adapter = cfg.adapter_scale > 0.0;
    const bool use_idnet = cfg.idnet_scale > 0.0;
    Tensor<float> raster;
    if (use_idnet) raster = rasterize_landmarks(*cfg.target_landmarks, cfg.image_size).map;
    const TextContext text = tokenize(cfg.prompt);

    auto eps_fn = [&](const Tensor<float>& z, int t) {
        Tape<float> tape;
        Ctx<float> cx(tape, m.params);
        auto temb = time_mlp(cx, "unet.", t);
        auto ctxv = text_embed(cx, text);
        auto zv = tape.leaf(z);
        AttnHook<float> hook = nullptr;
        ControlTaps<float> taps;
        const ControlTaps<float>* taps_ptr = nullptr;
        if (use_adapter || use_idnet) {
            auto tokens = project_id_t(cx, tape.leaf(row));
            if (use_adapter)
                hook = adapter_hook<float>(tokens, static_cast<float>(cfg.adapter_scale));
            if (use_idnet) {
                taps = control_residuals(cx, zv, temb, tape.leaf(raster), tokens,
                                         static_cast<float>(cfg.idnet_scale));
                taps_ptr = &taps;
            }
        }
        return tape.val(unet_apply(cx, "unet.", zv, temb, ctxv, hook, taps_ptr));
    };

    const int zsize = cfg.image_size / kLatentFactor;
    Rng rng = Rng(cfg.seed).fork("ddim-init");
    Tensor<float> z = Tensor<float>::randn(Shape{kLatentChannels, zsize, zsize}, rng);
    z = ddim_trajectory(m.sched, eps_fn, std::move(z), cfg.steps);
    return decode(m.ae, z);
}

// ---- metrics helpers ----

inline double landmark_mean_error(const Landmarks& a, const Landmarks& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += std::hypot(a[i].x - b[i].x, a[i].y - b[i].y);
    return acc / static_cast<double>(a.size());
}

// Fraction of style attributes named in the prompt that the measured image
// matches. A prompt without style tokens constrains nothing and scores 1.
inline double prompt_adherence(const Tensor<float>& img, const Landmarks& lm,
                               const std::string& prompt) {
    const MeasuredStyle ms = measure_style(img, lm);
    int constrained = 0, matched = 0;
    std::istringstream is(prompt);
    std::string tok;
    while (is >> tok) {
        if (tok.size() == 3 && tok.starts_with("bg") && tok[2] >= '0' && tok[2] <= '7') {
            ++constrained;
            matched += ms.hue_bucket == tok[2] - '0';
        } else if (tok == "flat" || tok == "stripes" || tok == "dots") {
            ++constrained;
            matched += ms.texture == texture_from(tok);
        } else if (tok == "glasses" || tok == "hat") {
            ++constrained;
            matched += ms.accessory == accessory_from(tok);
        } else if (tok == "plain") {
            ++constrained;
            matched += ms.accessory == Accessory::none;
        }
    }
    return constrained == 0 ? 1.0 : static_cast<double>(matched) / constrained;
}

// ---- strength sweeps ----

struct SweepCell {
    double adapter_scale = 0.0, idnet_scale = 0.0;
    Tensor<float> image;
    double identity_similarity = 0.0;
    double prompt_adherence = 1.0;
};

// One generation per (adapter, control) strength pair, adapter-major order,
// all sharing the prototype's seed, prompt, and landmarks.
inline std::vector<SweepCell> sweep_strengths(const InstantID& m, IdExtractor& ex,
                                              const EmbedOracle& oracle,
                                              const Tensor<double>& reference,
                                              const std::vector<double>& adapter_grid,
                                              const std::vector<double>& idnet_grid,
                                              const GenerationConfig& proto) {
    if (adapter_grid.empty() || idnet_grid.empty()) throw ConfigError("sweep: empty grid");
    if (!proto.target_landmarks) throw ConfigError("sweep: target landmarks required");
    std::vector<SweepCell> cells;
    cells.reserve(adapter_grid.size() * idnet_grid.size());
    for (double a : adapter_grid)
        for (double s : idnet_grid) {
            GenerationConfig c = proto;
            c.adapter_scale = a;
            c.idnet_scale = s;
            SweepCell cell;
            cell.adapter_scale = a;
            cell.idnet_scale = s;
            cell.image = generate(m, {reference}, c);
            const Landmarks det = detect_landmarks(cell.image, *proto.target_landmarks);
            const ExtractResult r = embed_from_image(ex, oracle, cell.image, det);
            cell.identity_similarity = cosine(r.embedding, reference);
            cell.prompt_adherence = prompt_adherence(cell.image, det, proto.prompt);
            cells.push_back(std::move(cell));
        }
    return cells;
}

inline std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream os;
    os << "adapter_scale,idnet_scale,identity_similarity,prompt_adherence\n";
    for (const auto& c : cells)
        os << c.adapter_scale << ',' << c.idnet_scale << ',' << c.identity_similarity << ','
           << c.prompt_adherence << '\n';
    return os.str();
}

// ---- pose and identity sequences ----

// One generation per pose, landmarks derived from the reference identity's
// geometry, embedding and everything else held fixed.
inline std::vector<Tensor<float>> novel_view(const InstantID& m, const Tensor<double>& reference,
                                             const IdentitySpec& id,
                                             const std::vector<PoseSpec>& poses,
                                             const GenerationConfig& proto) {
    if (poses.empty()) throw ConfigError("novel_view: empty pose sequence");
    std::vector<Tensor<float>> out;
    out.reserve(poses.size());
    for (const PoseSpec& p : poses) {
        GenerationConfig c = proto;
        c.target_landmarks = landmarks_of(id, p, proto.image_size);
        if (rasterize_landmarks(*c.target_landmarks, proto.image_size).any_out_of_frame)
            throw ConfigError("novel_view: pose pushes landmarks out of frame");
        out.push_back(generate(m, {reference}, c));
    }
    return out;
}

// Geodesic sweep between two identities; endpoints reproduce the plain
// single-reference generations.
inline std::vector<Tensor<float>> interpolate_identities(const InstantID& m,
                                                         const Tensor<double>& ref_a,
                                                         const Tensor<double>& ref_b, int n_steps,
                                                         const GenerationConfig& proto) {
    if (n_steps < 2) throw ConfigError("interpolate: need at least 2 steps");
    std::vector<Tensor<float>> out;
    out.reserve(static_cast<std::size_t>(n_steps));
    for (int k = 0; k < n_steps; ++k) {
        const double t = static_cast<double>(k) / (n_steps - 1);
        out.push_back(generate(m, {interpolate_embeddings(ref_a, ref_b, t)}, proto));
    }
    return out;
}

// ---- multi-identity regional control ----

struct IdRegion {
    Tensor<float> mask;        // [H,W] in [0,1] at image resolution
    Tensor<double> embedding;  // [1, kEmbedDim]
    Landmarks landmarks;
};

namespace detail {

// Box-average downsample of an image-resolution mask to side s.
inline Tensor<float> downsample_mask(const Tensor<float>& mask, int s) {
    const int h = mask.dim(0);
    const int f = h / s;
    Tensor<float> out(Shape{s, s});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double acc = 0.0;
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx) acc += mask.at(y * f + dy, x * f + dx);
            out.at(y, x) = static_cast<float>(acc / (f * f));
        }
    return out;
}

// Mask tiled across channels, [c, s, s].
inline Tensor<float> mask_chw(const Tensor<float>& m, int c) {
    const int s = m.dim(0);
    Tensor<float> out(Shape{c, s, s});
    for (int ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < m.numel(); ++i) out[ch * m.numel() + i] = m[i];
    return out;
}

// Mask flattened to token rows and tiled across feature columns, [s*s, c].
inline Tensor<float> mask_tokens(const Tensor<float>& m, int c) {
    Tensor<float> out(Shape{m.numel(), c});
    for (std::int64_t i = 0; i < m.numel(); ++i)
        for (int j = 0; j < c; ++j) out[i * c + j] = m[i];
    return out;
}

}  // namespace detail

// Shared denoising trajectory with per-region identity injection: each
// region's control residuals and attention addends are multiplied by its mask
// (downsampled to the active resolution) and summed. A single full-frame
// region reproduces plain generation exactly.
inline Tensor<float> generate_multi_identity(const InstantID& model,
                                             const std::vector<IdRegion>& regions,
                                             const GenerationConfig& cfg) {
    if (regions.empty()) throw ConfigError("multi-identity: need at least one region");
    GenerationConfig probe = cfg;
    probe.target_landmarks = regions.front().landmarks;
    validate_generation_config(probe);
    const int H = cfg.image_size;
    for (const auto& r : regions) {
        if (r.mask.shape != Shape{H, H})
            throw ShapeError("multi-identity: mask must match the image size");
        for (float v : r.mask.data)
            if (!(v >= 0.0f && v <= 1.0f))
                throw ConfigError("multi-identity: mask values must lie in [0,1]");
    }
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * H; ++i) {
        int covered = 0;
        for (const auto& r : regions) covered += r.mask[i] > 0.0f;
        if (covered > 1) throw ConfigError("multi-identity: masks overlap");
    }

    InstantID& m = const_cast<InstantID&>(model);
    const bool use_adapter = cfg.adapter_scale > 0.0;
    const bool use_idnet = cfg.idnet_scale > 0.0;
    const int zsize = cfg.image_size / kLatentFactor;
    const TextContext text = tokenize(cfg.prompt);

    struct RegionData {
        Tensor<float> row, raster;
        Tensor<float> m0, m1, m2;  // masks at latent, half, quarter sides
    };
    std::vector<RegionData> rd;
    rd.reserve(regions.size());
    for (const auto& r : regions) {
        RegionData d;
        d.row = embedding_row(embed_average({r.embedding}));
        if (use_idnet) d.raster = rasterize_landmarks(r.landmarks, H).map;
        d.m0 = detail::downsample_mask(r.mask, zsize);
        d.m1 = detail::downsample_mask(r.mask, zsize / 2);
        d.m2 = detail::downsample_mask(r.mask, zsize / 4);
        rd.push_back(std::move(d));
    }

    auto eps_fn = [&](const Tensor<float>& z, int t) {
        Tape<float> tape;
        Ctx<float> cx(tape, m.params);
        auto temb = time_mlp(cx, "unet.", t);
        auto ctxv = text_embed(cx, text);
        auto zv = tape.leaf(z);

        std::vector<typename Tape<float>::Var> tokens(rd.size());
        if (use_adapter || use_idnet)
            for (std::size_t r = 0; r < rd.size(); ++r)
                tokens[r] = project_id_t(cx, tape.leaf(rd[r].row));

        auto mask_at = [&](std::size_t r, int side) -> const Tensor<float>& {
            if (side == zsize) return rd[r].m0;
            if (side == zsize / 2) return rd[r].m1;
            return rd[r].m2;
        };

        ControlTaps<float> taps;
        const ControlTaps<float>* taps_ptr = nullptr;
        if (use_idnet) {
            for (std::size_t r = 0; r < rd.size(); ++r) {
                auto rt = control_residuals(cx, zv, temb, tape.leaf(rd[r].raster), tokens[r], 1.0f);
                rt.enc0 = tape.mul(rt.enc0, tape.leaf(detail::mask_chw(rd[r].m0, 32)));
                rt.enc1 = tape.mul(rt.enc1, tape.leaf(detail::mask_chw(rd[r].m1, 64)));
                rt.enc2 = tape.mul(rt.enc2, tape.leaf(detail::mask_chw(rd[r].m2, 128)));
                rt.mid = tape.mul(rt.mid, tape.leaf(detail::mask_chw(rd[r].m2, 128)));
                if (r == 0) {
                    taps = rt;
                } else {
                    taps.enc0 = tape.add(taps.enc0, rt.enc0);
                    taps.enc1 = tape.add(taps.enc1, rt.enc1);
                    taps.enc2 = tape.add(taps.enc2, rt.enc2);
                    taps.mid = tape.add(taps.mid, rt.mid);
                }
            }
            taps.scale = static_cast<float>(cfg.idnet_scale);
            taps_ptr = &taps;
        }

        AttnHook<float> hook = nullptr;
        if (use_adapter) {
            const float lambda = static_cast<float>(cfg.adapter_scale);
            hook = [&, lambda](Ctx<float>& hx, const std::string& site,
                               typename Tape<float>::Var q)
                -> std::optional<typename Tape<float>::Var> {
                auto& ht = hx.tape;
                const int rows = ht.val(q).dim(0);
                const int side = static_cast<int>(std::lround(std::sqrt(rows)));
                const int c = attn_site_channels(site);
                typename Tape<float>::Var acc;
                for (std::size_t r = 0; r < rd.size(); ++r) {
                    auto ki = ht.matmul_nt(tokens[r], hx.p("adapter." + site + ".wk.w"));
                    auto vi = ht.matmul_nt(tokens[r], hx.p("adapter." + site + ".wv.w"));
                    auto a = ht.mul(sdp_attention(ht, q, ki, vi),
                                    ht.leaf(detail::mask_tokens(mask_at(r, side), c)));
                    acc = r == 0 ? a : ht.add(acc, a);
                }
                return ht.scale(acc, lambda);
            };
        }
        return tape.val(unet_apply(cx, "unet.", zv, temb, ctxv, hook, taps_ptr));
    };

    Rng rng = Rng(cfg.seed).fork("ddim-init");
    Tensor<float> z = Tensor<float>::randn(Shape{kLatentChannels, zsize, zsize}, rng);
    z = ddim_trajectory(m.sched, eps_fn, std::move(z), cfg.steps);
    return decode(m.ae, z);
}

// ---- evaluation ----

struct EvalTrial {
    int id_index = 0, trial = 0;
    double identity_similarity = 0.0;
    double shuffled_similarity = 0.0;
    double prompt_adherence = 0.0;
    double landmark_error = 0.0;
};

struct EvalReport {
    int heldout_ids = 0, trials_per_id = 0;
    uint64_t seed = 0;
    double identity_similarity = 0.0;
    double shuffled_similarity = 0.0;
    double prompt_adherence = 0.0;
    double landmark_error = 0.0;
    std::vector<EvalTrial> trials;
};

// Conditioned generation on freshly sampled held-out identities, scored with
// the trained extractor. The shuffled baseline pairs each output with the
// next identity's reference, so it calibrates chance-level similarity.
inline EvalReport evaluate(const InstantID& m, IdExtractor& ex, const EmbedOracle& oracle,
                           int heldout_ids, int trials_per_id, uint64_t seed,
                           const GenerationConfig& proto) {
    if (heldout_ids < 2) throw ConfigError("evaluate: need >= 2 held-out identities");
    if (trials_per_id < 1) throw ConfigError("evaluate: need >= 1 trial per identity");
    if (ex.params.names_with_prefix("").empty())
        throw DependencyError("evaluate: extractor unavailable");

    EvalReport rep;
    rep.heldout_ids = heldout_ids;
    rep.trials_per_id = trials_per_id;
    rep.seed = seed;

    Rng root(seed);
    Rng ids_rng = root.fork("ids");
    std::vector<IdentitySpec> ids(static_cast<std::size_t>(heldout_ids));
    std::vector<Tensor<double>> refs(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        ids[i] = sample_identity(ids_rng);
        refs[i] = oracle.embed(ids[i]);
    }

    Rng trial_rng = root.fork("trials");
    for (int i = 0; i < heldout_ids; ++i) {
        for (int k = 0; k < trials_per_id; ++k) {
            const auto ui = static_cast<std::size_t>(i);
            const PoseSpec pose = sample_pose(ids[ui], trial_rng, proto.image_size);
            const StyleSpec style = sample_style(trial_rng);
            GenerationConfig c = proto;
            c.prompt = caption_of(style);
            c.target_landmarks = landmarks_of(ids[ui], pose, proto.image_size);
            c.seed = static_cast<uint64_t>(
                trial_rng.uniform_int(std::numeric_limits<std::int64_t>::max()));
            const Tensor<float> img = generate(m, {refs[ui]}, c);
            const Landmarks det = detect_landmarks(img, *c.target_landmarks);
            const ExtractResult r = embed_from_image(ex, oracle, img, det);

            EvalTrial tr;
            tr.id_index = i;
            tr.trial = k;
            tr.identity_similarity = cosine(r.embedding, refs[ui]);
            tr.shuffled_similarity =
                cosine(r.embedding, refs[static_cast<std::size_t>((i + 1) % heldout_ids)]);
            tr.prompt_adherence = prompt_adherence(img, det, c.prompt);
            tr.landmark_error = landmark_mean_error(det, *c.target_landmarks);
            rep.identity_similarity += tr.identity_similarity;
            rep.shuffled_similarity += tr.shuffled_similarity;
            rep.prompt_adherence += tr.prompt_adherence;
            rep.landmark_error += tr.landmark_error;
            rep.trials.push_back(tr);
        }
    }
    const double n = static_cast<double>(rep.trials.size());
    rep.identity_similarity /= n;
    rep.shuffled_similarity /= n;
    rep.prompt_adherence /= n;
    rep.landmark_error /= n;
    return rep;
}

inline std::string eval_report_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "id_index,trial,identity_similarity,shuffled_similarity,prompt_adherence,"
          "landmark_error\n";
    for (const auto& t : r.trials)
        os << t.id_index << ',' << t.trial << ',' << t.identity_similarity << ','
           << t.shuffled_similarity << ',' << t.prompt_adherence << ',' << t.landmark_error
           << '\n';
    return os.str();
}

inline std::string eval_report_summary(const EvalReport& r) {
    std::ostringstream os;
    os << "held-out identities: " << r.heldout_ids << ", trials per identity: " << r.trials_per_id
       << ", seed: " << r.seed << '\n'
       << "identity similarity: " << r.identity_similarity << '\n'
       << "shuffled baseline:   " << r.shuffled_similarity << '\n'
       << "prompt adherence:    " << r.prompt_adherence << '\n'
       << "landmark error:      " << r.landmark_error << " px\n";
    return os.str();
}

}  // namespace instid
