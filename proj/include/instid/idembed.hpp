#pragma once

#include <Eigen/Core>
#include <Eigen/QR>

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "instid/archive.hpp"
#include "instid/measure.hpp"
#include "instid/nn.hpp"
#include "instid/synthfaces.hpp"

namespace instid {

// Identity embeddings: unit vectors in a 32-dimensional space. The oracle
// maps ground-truth identity vectors through a frozen orthonormal linear map,
// so embedding cosines equal identity-vector cosines exactly. The learned
// extractor recovers the identity vector from pixels, which is what scoring a
// generated image has to rely on.

inline constexpr int kEmbedDim = 32;
inline constexpr uint64_t kEmbedOracleSeed = 0x1dbedd01u;
inline constexpr const char* kIdembedVersion = "idembed-v1";

inline double cosine(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.numel() != b.numel()) throw ShapeError("cosine: size mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) throw NumericError("cosine: zero vector");
    return dot / std::sqrt(na * nb);
}

// ---- frozen oracle ----

struct EmbedOracle {
    Tensor<double> q;  // [kEmbedDim, kIdDim], orthonormal columns

    Tensor<double> embed_vec(const std::array<double, kIdDim>& v) const {
        Tensor<double> out(Shape{1, kEmbedDim});
        double nrm = 0.0;
        for (int r = 0; r < kEmbedDim; ++r) {
            double acc = 0.0;
            for (int c = 0; c < kIdDim; ++c)
                acc += q[static_cast<std::int64_t>(r) * kIdDim + c] * v[static_cast<std::size_t>(c)];
            out[r] = acc;
            nrm += acc * acc;
        }
        nrm = std::sqrt(nrm);
        if (nrm < 1e-9) throw NumericError("embed: identity vector maps to zero");
        for (int r = 0; r < kEmbedDim; ++r) out[r] /= nrm;
        return out;
    }

    Tensor<double> embed(const IdentitySpec& id) const { return embed_vec(id.v); }
};

inline EmbedOracle make_embed_oracle(uint64_t seed = kEmbedOracleSeed) {
    Rng rng(seed);
    Eigen::MatrixXd g(kEmbedDim, kIdDim);
    for (int r = 0; r < kEmbedDim; ++r)
        for (int c = 0; c < kIdDim; ++c) g(r, c) = rng.gaussian();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd thin =
        qr.householderQ() * Eigen::MatrixXd::Identity(kEmbedDim, kIdDim);
    const Eigen::MatrixXd r = qr.matrixQR().topRows(kIdDim).triangularView<Eigen::Upper>();
    for (int c = 0; c < kIdDim; ++c)
        if (r(c, c) < 0.0) thin.col(c) = -thin.col(c);

    EmbedOracle o;
    o.q = Tensor<double>(Shape{kEmbedDim, kIdDim});
    for (int i = 0; i < kEmbedDim; ++i)
        for (int j = 0; j < kIdDim; ++j) o.q[static_cast<std::int64_t>(i) * kIdDim + j] = thin(i, j);
    return o;
}

inline void put_embed_oracle(TensorArchive& ar, const EmbedOracle& o) {
    ar.put("embed_oracle.q", o.q);
    ar.set_meta("idembed_version", kIdembedVersion);
}

inline EmbedOracle get_embed_oracle(const TensorArchive& ar) {
    if (!ar.has_meta("idembed_version") || ar.meta("idembed_version") != kIdembedVersion)
        throw DependencyError("embed oracle archive has wrong or missing version tag");
    EmbedOracle o;
    o.q = ar.get<double>("embed_oracle.q");
    if (o.q.shape != Shape{kEmbedDim, kIdDim})
        throw DependencyError("embed oracle tensor has unexpected shape");
    return o;
}

// ---- embedding-space operations ----

inline Tensor<double> embed_average(const std::vector<Tensor<double>>& embs) {
    if (embs.empty()) throw ConfigError("embed_average: no embeddings");
    Tensor<double> mean(Shape{1, kEmbedDim});
    for (const auto& e : embs) {
        if (e.numel() != kEmbedDim) throw ShapeError("embed_average: wrong embedding size");
        for (int i = 0; i < kEmbedDim; ++i) mean[i] += e[i];
    }
    double nrm = 0.0;
    for (int i = 0; i < kEmbedDim; ++i) {
        mean[i] /= static_cast<double>(embs.size());
        nrm += mean[i] * mean[i];
    }
    nrm = std::sqrt(nrm);
    if (nrm < 1e-6) throw NumericError("embed_average: embeddings cancel to zero");
    for (int i = 0; i < kEmbedDim; ++i) mean[i] /= nrm;
    return mean;
}

// Geodesic interpolation on the unit sphere. Endpoints are returned verbatim.
inline Tensor<double> interpolate_embeddings(const Tensor<double>& a, const Tensor<double>& b,
                                             double t) {
    if (a.numel() != kEmbedDim || b.numel() != kEmbedDim)
        throw ShapeError("interpolate_embeddings: wrong embedding size");
    if (t < 0.0 || t > 1.0) throw ConfigError("interpolate_embeddings: t outside [0,1]");
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    double dot = 0.0;
    for (int i = 0; i < kEmbedDim; ++i) dot += a[i] * b[i];
    dot = std::clamp(dot, -1.0, 1.0);
    if (dot < -1.0 + 1e-9)
        throw NumericError("interpolate_embeddings: endpoints are antipodal, path is ambiguous");
    const double ang = std::acos(dot);
    if (ang < 1e-9) return a;
    const double sa = std::sin((1.0 - t) * ang) / std::sin(ang);
    const double sb = std::sin(t * ang) / std::sin(ang);
    Tensor<double> out(Shape{1, kEmbedDim});
    double nrm = 0.0;
    for (int i = 0; i < kEmbedDim; ++i) {
        out[i] = sa * a[i] + sb * b[i];
        nrm += out[i] * out[i];
    }
    nrm = std::sqrt(nrm);
    for (int i = 0; i < kEmbedDim; ++i) out[i] /= nrm;
    return out;
}

// ---- learned extractor ----

// CNN from image plus landmark raster to the 8 identity components and a
// face-presence confidence logit.
inline void init_extractor(ParamStore<float>& ps, Rng& rng) {
    init_conv(ps, "extractor.e0", 16, 8, 3, rng);
    init_gn(ps, "extractor.n0", 16);
    init_conv(ps, "extractor.e1", 32, 16, 3, rng);
    init_gn(ps, "extractor.n1", 32);
    init_conv(ps, "extractor.e2", 64, 32, 3, rng);
    init_gn(ps, "extractor.n2", 64);
    init_conv(ps, "extractor.e3", 64, 64, 3, rng);
    init_gn(ps, "extractor.n3", 64);
    init_linear(ps, "extractor.h", 128, 64 * 4 * 4, rng);
    init_linear(ps, "extractor.id", kIdDim, 128, rng);
    init_linear(ps, "extractor.conf", 1, 128, rng);
}

template <typename T>
struct ExtractorHeads {
    typename Tape<T>::Var id;    // [1,8]
    typename Tape<T>::Var conf;  // [1,1] logit
};

template <typename T>
ExtractorHeads<T> extractor_forward(Ctx<T>& cx, typename Tape<T>::Var x) {
    auto& t = cx.tape;
    x = t.silu(gn(cx, "extractor.n0", conv(cx, "extractor.e0", x, 2, 1), 4));
    x = t.silu(gn(cx, "extractor.n1", conv(cx, "extractor.e1", x, 2, 1), 8));
    x = t.silu(gn(cx, "extractor.n2", conv(cx, "extractor.e2", x, 2, 1), 8));
    x = t.silu(gn(cx, "extractor.n3", conv(cx, "extractor.e3", x, 2, 1), 8));
    x = t.reshape(x, Shape{1, 64 * 4 * 4});
    x = t.silu(lin(cx, "extractor.h", x));
    return {lin(cx, "extractor.id", x), lin(cx, "extractor.conf", x)};
}

inline Tensor<float> extractor_input(const Tensor<float>& image, const Tensor<float>& raster) {
    if (image.ndim() != 3 || raster.ndim() != 3 || image.dim(0) != 3 || raster.dim(0) != 5 ||
        image.dim(1) != raster.dim(1) || image.dim(2) != raster.dim(2))
        throw ShapeError("extractor_input: need [3,H,W] image and [5,H,W] raster");
    Tensor<float> in(Shape{8, image.dim(1), image.dim(2)});
    std::copy(image.data.begin(), image.data.end(), in.data.begin());
    std::copy(raster.data.begin(), raster.data.end(),
              in.data.begin() + image.numel());
    return in;
}

struct IdExtractor {
    ParamStore<float> params;
    double conf_threshold = 0.5;
};

struct ExtractResult {
    Tensor<double> embedding;  // [1, kEmbedDim], unit norm
    std::array<double, kIdDim> id_vec{};
    double confidence = 0.0;
    bool low_confidence = false;
};

inline ExtractResult embed_from_image(IdExtractor& ex, const EmbedOracle& oracle,
                                      const Tensor<float>& image, const Landmarks& lm) {
    const LandmarkMap raster = rasterize_landmarks(lm, image.dim(1));
    Tape<float> tape;
    Ctx<float> cx(tape, ex.params);
    auto heads = extractor_forward(cx, tape.leaf(extractor_input(image, raster.map)));
    ExtractResult r;
    for (int i = 0; i < kIdDim; ++i)
        r.id_vec[static_cast<std::size_t>(i)] = tape.val(heads.id)[i];
    r.confidence = 1.0 / (1.0 + std::exp(-static_cast<double>(tape.val(heads.conf)[0])));
    r.low_confidence = r.confidence < ex.conf_threshold;
    r.embedding = oracle.embed_vec(r.id_vec);
    return r;
}

inline void put_extractor(TensorArchive& ar, const IdExtractor& ex) {
    ar.put_params(ex.params);
    ar.set_meta("idembed_version", kIdembedVersion);
    ar.set_meta("conf_threshold", std::to_string(ex.conf_threshold));
}

inline IdExtractor get_extractor(const TensorArchive& ar) {
    if (!ar.has_meta("idembed_version") || ar.meta("idembed_version") != kIdembedVersion)
        throw DependencyError("extractor archive has wrong or missing version tag");
    IdExtractor ex;
    Rng rng(0);
    init_extractor(ex.params, rng);
    ar.load_params(ex.params);
    ex.conf_threshold = std::stod(ar.meta("conf_threshold"));
    return ex;
}

// ---- extractor training ----

using RoundtripFn = std::function<Tensor<float>(const Tensor<float>&)>;

struct ExtractorTrainConfig {
    int steps = 6000;
    int batch = 32;
    double lr = 1e-3;
    uint64_t seed = 0;
    int image_size = 64;
    double p_composite = 0.2;
    double p_negative = 0.1;
    double p_roundtrip = 0.5;
    double p_noise = 0.3;
    double p_raster_drop = 0.15;
    double noise_sigma = 0.05;
    double conf_loss_weight = 0.2;
};

// Confidence alone, with or without a landmark raster.
inline double extract_confidence(IdExtractor& ex, const Tensor<float>& image,
                                 const Landmarks* lm) {
    const int size = image.dim(1);
    Tensor<float> raster =
        lm ? rasterize_landmarks(*lm, size).map : Tensor<float>(Shape{5, size, size});
    Tape<float> tape;
    Ctx<float> cx(tape, ex.params);
    auto heads = extractor_forward(cx, tape.leaf(extractor_input(image, raster)));
    return 1.0 / (1.0 + std::exp(-static_cast<double>(tape.val(heads.conf)[0])));
}

// Every training example is rendered fresh from the procedural world, so the
// extractor never sees the same pixels twice and cannot memorize its way out
// of learning the attribute mapping.
inline IdExtractor train_extractor(const RoundtripFn& rt, const ExtractorTrainConfig& cfg,
                                   std::ostream* loss_csv = nullptr) {
    const int size = cfg.image_size;
    if (size < 32) throw ConfigError("train_extractor: image_size below 32");

    Rng root(cfg.seed);

    IdExtractor ex;
    {
        Rng irng = root.fork("extractor-init");
        init_extractor(ex.params, irng);
    }

    Adam<float> opt(static_cast<float>(cfg.lr));
    Rng drw = root.fork("draw");
    const Tensor<float> zero_raster(Shape{5, size, size});

    for (int step = 0; step < cfg.steps; ++step) {
        GradMap<float> grads;
        double loss_acc = 0.0;
        for (int bi = 0; bi < cfg.batch; ++bi) {
            const double kind = drw.uniform();
            Tensor<float> img;
            Landmarks lm{};
            std::array<double, kIdDim> idv{};
            bool is_face = true, has_raster = true;

            if (kind < cfg.p_composite) {
                const CompositePair cp = render_composite_pair(drw, size);
                const bool right = drw.uniform() < 0.5;
                img = cp.image;
                lm = right ? cp.right_landmarks : cp.left_landmarks;
                idv = right ? cp.right_id : cp.left_id;
            } else if (kind < cfg.p_composite + cfg.p_negative) {
                img = render_background(sample_style(drw), size);
                is_face = false;
                if (drw.uniform() < 0.5) {
                    const IdentitySpec id = sample_identity(drw);
                    PoseSpec p;
                    p.rotation = drw.uniform(-M_PI / 4.0, M_PI / 4.0);
                    p.scale = drw.uniform(0.6, 1.0);
                    p.cx = drw.uniform(20.0, size - 20.0);
                    p.cy = drw.uniform(20.0, size - 20.0);
                    lm = landmarks_of(id, p, size);
                } else {
                    has_raster = false;
                }
            } else {
                const IdentitySpec id = sample_identity(drw);
                const PoseSpec pose = sample_pose(id, drw, size);
                const FaceSample s = render_face(id, pose, sample_style(drw), size);
                img = s.image;
                lm = s.landmarks;
                idv = id.v;
                if (drw.uniform() < cfg.p_raster_drop) has_raster = false;
            }

            if (rt && drw.uniform() < cfg.p_roundtrip) img = rt(img);
            if (drw.uniform() < cfg.p_noise) {
                for (auto& v : img.data)
                    v = std::clamp(v + static_cast<float>(drw.gaussian() * cfg.noise_sigma), 0.0f,
                                   1.0f);
            }

            Tensor<float> raster = has_raster ? rasterize_landmarks(lm, size).map : zero_raster;

            Tape<float> tape;
            Ctx<float> cx(tape, ex.params, [](const std::string&) { return true; });
            auto heads = extractor_forward(cx, tape.leaf(extractor_input(img, raster)));

            Tensor<float> conf_label(Shape{1, 1}, is_face ? 1.0f : 0.0f);
            auto loss = tape.scale(tape.bce_logits(heads.conf, conf_label),
                                   static_cast<float>(cfg.conf_loss_weight));
            if (is_face) {
                Tensor<float> target(Shape{1, kIdDim});
                for (int i = 0; i < kIdDim; ++i)
                    target[i] = static_cast<float>(idv[static_cast<std::size_t>(i)]);
                loss = tape.add(loss, tape.mse(heads.id, target));
            }
            const double lv = tape.val(loss)[0];
            if (!std::isfinite(lv)) throw NumericError("train_extractor: loss became non-finite");
            loss_acc += lv;
            tape.backward(loss);
            collect_grads(tape, cx, grads);
        }
        scale_grads(grads, 1.0f / static_cast<float>(cfg.batch));
        clip_global_norm(grads, 10.0);
        opt.set_lr(static_cast<float>(cosine_lr(step, cfg.steps, cfg.lr)));
        opt.step(ex.params, grads);
        if (loss_csv) (*loss_csv) << step << ',' << loss_acc / cfg.batch << '\n';
    }

    // confidence threshold: midpoint between fresh positive and negative
    // confidence means
    {
        Rng cal = root.fork("calibrate");
        double pos = 0.0, neg = 0.0;
        const int n = 64;
        for (int i = 0; i < n; ++i) {
            const IdentitySpec id = sample_identity(cal);
            const FaceSample s = render_face(id, sample_pose(id, cal, size), sample_style(cal), size);
            pos += extract_confidence(ex, s.image, &s.landmarks);
            const Tensor<float> bg = render_background(sample_style(cal), size);
            neg += extract_confidence(ex, bg, nullptr);
        }
        ex.conf_threshold = std::clamp(0.5 * (pos / n + neg / n), 0.05, 0.95);
    }
    return ex;
}

// Mean embedding cosine between extractor output and oracle ground truth.
inline double validate_extractor(IdExtractor& ex, const EmbedOracle& oracle,
                                 const std::vector<FaceSample>& samples) {
    if (samples.empty()) throw ConfigError("validate_extractor: no samples");
    double acc = 0.0;
    for (const FaceSample& s : samples) {
        const ExtractResult r = embed_from_image(ex, oracle, s.image, s.landmarks);
        acc += cosine(r.embedding, oracle.embed(s.identity));
    }
    return acc / static_cast<double>(samples.size());
}

}  // namespace instid
