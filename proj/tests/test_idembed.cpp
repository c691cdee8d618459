#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <sstream>

#include "instid/idembed.hpp"

using namespace instid;

TEST_CASE("oracle embeddings are unit length with orthonormal columns") {
    const EmbedOracle o = make_embed_oracle();

    // Q^T Q = I
    for (int a = 0; a < kIdDim; ++a)
        for (int b = 0; b < kIdDim; ++b) {
            double dot = 0.0;
            for (int r = 0; r < kEmbedDim; ++r)
                dot += o.q[static_cast<std::int64_t>(r) * kIdDim + a] *
                       o.q[static_cast<std::int64_t>(r) * kIdDim + b];
            CHECK(dot == Catch::Approx(a == b ? 1.0 : 0.0).margin(1e-12));
        }

    Rng rng(31);
    for (int i = 0; i < 100; ++i) {
        const Tensor<double> e = o.embed(sample_identity(rng));
        double n = 0.0;
        for (int k = 0; k < kEmbedDim; ++k) n += e[k] * e[k];
        CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-6);
    }
}

TEST_CASE("embedding cosine equals identity-vector cosine") {
    const EmbedOracle o = make_embed_oracle();
    Rng rng(32);
    for (int i = 0; i < 50; ++i) {
        const IdentitySpec a = sample_identity(rng), b = sample_identity(rng);
        double dot = 0, na = 0, nb = 0;
        for (int k = 0; k < kIdDim; ++k) {
            dot += a.v[static_cast<std::size_t>(k)] * b.v[static_cast<std::size_t>(k)];
            na += a.v[static_cast<std::size_t>(k)] * a.v[static_cast<std::size_t>(k)];
            nb += b.v[static_cast<std::size_t>(k)] * b.v[static_cast<std::size_t>(k)];
        }
        const double id_cos = dot / std::sqrt(na * nb);
        CHECK(cosine(o.embed(a), o.embed(b)) == Catch::Approx(id_cos).margin(1e-9));
    }
}

TEST_CASE("100 sampled identities embed to pairwise-distinct directions") {
    const EmbedOracle o = make_embed_oracle();
    Rng rng(33);
    std::vector<Tensor<double>> embs;
    for (int i = 0; i < 100; ++i) embs.push_back(o.embed(sample_identity(rng)));
    double worst = -1.0;
    for (std::size_t i = 0; i < embs.size(); ++i)
        for (std::size_t j = i + 1; j < embs.size(); ++j)
            worst = std::max(worst, cosine(embs[i], embs[j]));
    CHECK(worst < 0.99);
}

TEST_CASE("oracle is deterministic in its seed and rejects the zero identity") {
    const EmbedOracle a = make_embed_oracle(7), b = make_embed_oracle(7), c = make_embed_oracle(8);
    CHECK(max_abs_diff(a.q, b.q) == 0.0);
    CHECK(max_abs_diff(a.q, c.q) > 0.0);

    IdentitySpec zero;
    CHECK_THROWS_AS(a.embed(zero), NumericError);
}

TEST_CASE("oracle archive round trip enforces the version tag") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "instid_oracle_test.bin";

    const EmbedOracle o = make_embed_oracle();
    TensorArchive ar;
    put_embed_oracle(ar, o);
    ar.save(path);

    const TensorArchive back = TensorArchive::load(path);
    const EmbedOracle o2 = get_embed_oracle(back);
    CHECK(max_abs_diff(o.q, o2.q) == 0.0);

    TensorArchive wrong;
    wrong.put("embed_oracle.q", o.q);
    wrong.set_meta("idembed_version", "idembed-v999");
    CHECK_THROWS_AS(get_embed_oracle(wrong), DependencyError);

    TensorArchive missing;
    missing.put("embed_oracle.q", o.q);
    CHECK_THROWS_AS(get_embed_oracle(missing), DependencyError);
    fs::remove(path);
}

TEST_CASE("embedding averages renormalize and reject cancellation") {
    const EmbedOracle o = make_embed_oracle();
    Rng rng(34);
    const Tensor<double> e = o.embed(sample_identity(rng));

    const Tensor<double> same = embed_average({e, e, e});
    CHECK(max_abs_diff(same, e) <= 1e-12);

    Tensor<double> neg = e;
    for (auto& v : neg.data) v = -v;
    CHECK_THROWS_AS(embed_average({e, neg}), NumericError);
    CHECK_THROWS_AS(embed_average({}), ConfigError);
}

TEST_CASE("averaging more noisy references approaches the clean embedding") {
    const EmbedOracle o = make_embed_oracle();
    Rng rng(35);
    const int trials = 60;
    double mean_cos[4] = {0, 0, 0, 0};
    const int ks[4] = {1, 2, 4, 8};
    for (int tr = 0; tr < trials; ++tr) {
        IdentitySpec id = sample_identity(rng);
        // keep away from the domain edge so noisy copies stay renderable-like
        for (auto& v : id.v) v *= 0.8;
        const Tensor<double> clean = o.embed(id);
        for (int ki = 0; ki < 4; ++ki) {
            std::vector<Tensor<double>> noisy;
            for (int k = 0; k < ks[ki]; ++k) {
                IdentitySpec nd = id;
                for (auto& v : nd.v) v += rng.gaussian() * 0.1;
                noisy.push_back(o.embed(nd));
            }
            mean_cos[ki] += cosine(embed_average(noisy), clean);
        }
    }
    for (int ki = 0; ki < 3; ++ki) {
        CHECK(mean_cos[ki] <= mean_cos[ki + 1] + 1e-9);
    }
    CHECK(mean_cos[3] / trials > mean_cos[0] / trials);
}

TEST_CASE("interpolation follows the great circle") {
    const EmbedOracle o = make_embed_oracle();
    Rng rng(36);
    const Tensor<double> a = o.embed(sample_identity(rng));
    const Tensor<double> b = o.embed(sample_identity(rng));

    SECTION("endpoints are returned verbatim") {
        CHECK(max_abs_diff(interpolate_embeddings(a, b, 0.0), a) == 0.0);
        CHECK(max_abs_diff(interpolate_embeddings(a, b, 1.0), b) == 0.0);
    }

    SECTION("angle grows linearly in t") {
        const double theta = std::acos(std::clamp(cosine(a, b), -1.0, 1.0));
        for (double t : {0.25, 0.5, 0.75}) {
            const Tensor<double> m = interpolate_embeddings(a, b, t);
            const double ang = std::acos(std::clamp(cosine(a, m), -1.0, 1.0));
            CHECK(ang == Catch::Approx(t * theta).margin(1e-6));
        }
    }

    SECTION("midpoint of orthogonal embeddings is the normalized sum") {
        // Gram-Schmidt an orthogonal pair out of a and b
        Tensor<double> u = a;
        const double d = cosine(a, b);
        Tensor<double> w(Shape{1, kEmbedDim});
        double nw = 0.0;
        for (int i = 0; i < kEmbedDim; ++i) {
            w[i] = b[i] - d * a[i];
            nw += w[i] * w[i];
        }
        nw = std::sqrt(nw);
        for (int i = 0; i < kEmbedDim; ++i) w[i] /= nw;
        const Tensor<double> mid = interpolate_embeddings(u, w, 0.5);
        for (int i = 0; i < kEmbedDim; ++i)
            CHECK(mid[i] == Catch::Approx((u[i] + w[i]) / std::sqrt(2.0)).margin(1e-9));
    }

    SECTION("antipodal endpoints are rejected") {
        Tensor<double> neg = a;
        for (auto& v : neg.data) v = -v;
        CHECK_THROWS_AS(interpolate_embeddings(a, neg, 0.5), NumericError);
    }

    SECTION("t outside [0,1] is rejected") {
        CHECK_THROWS_AS(interpolate_embeddings(a, b, -0.1), ConfigError);
        CHECK_THROWS_AS(interpolate_embeddings(a, b, 1.1), ConfigError);
    }
}

TEST_CASE("landmark raster disks integrate to their area") {
    Landmarks lm{};
    lm[0] = {32.0, 32.0};
    lm[1] = {10.0, 50.0};
    lm[2] = {5.0, 5.0};
    lm[3] = {60.0, 32.0};
    lm[4] = {32.0, 60.0};
    const LandmarkMap m = rasterize_landmarks(lm);
    CHECK_FALSE(m.any_out_of_frame);
    // center disk: sum of coverage = pi r^2 within 15%
    double sum = 0.0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) sum += m.map.at(0, y, x);
    const double area = M_PI * 9.0;
    CHECK(sum > area * 0.85);
    CHECK(sum < area * 1.15);
    // values are coverage fractions
    for (float v : m.map.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("out-of-frame landmarks leave an empty channel and raise the flag") {
    Landmarks lm{};
    lm[0] = {-3.0, 10.0};
    lm[1] = {20.0, 20.0};
    lm[2] = {30.0, 30.0};
    lm[3] = {25.0, 40.0};
    lm[4] = {40.0, 40.0};
    const LandmarkMap m = rasterize_landmarks(lm);
    CHECK(m.any_out_of_frame);
    double ch0 = 0.0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) ch0 += m.map.at(0, y, x);
    CHECK(ch0 == 0.0);
    double ch1 = 0.0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) ch1 += m.map.at(1, y, x);
    CHECK(ch1 > 0.0);
}

TEST_CASE("composite plates hold two distinct faces in their halves") {
    Rng rng(37);
    for (int i = 0; i < 5; ++i) {
        const CompositePair cp = render_composite_pair(rng);
        // left landmarks in left half, right in right half
        for (const Pt& p : cp.left_landmarks) CHECK(p.x < 32.0);
        for (const Pt& p : cp.right_landmarks) CHECK(p.x >= 32.0);
        CHECK(cp.left_id != cp.right_id);
    }
}

TEST_CASE("a short extractor training run learns the task") {
    ExtractorTrainConfig cfg;
    cfg.steps = 300;
    cfg.batch = 16;
    cfg.seed = 5;

    std::ostringstream log;
    IdExtractor ex = train_extractor(nullptr, cfg, &log);

    // loss decreased between the first and last quarter of training
    std::vector<double> losses;
    std::istringstream in(log.str());
    std::string line2;
    while (std::getline(in, line2)) {
        const auto comma = line2.find(',');
        REQUIRE(comma != std::string::npos);
        losses.push_back(std::stod(line2.substr(comma + 1)));
    }
    REQUIRE(losses.size() == 300);
    double head = 0, tail = 0;
    for (int i = 0; i < 75; ++i) {
        head += losses[static_cast<std::size_t>(i)];
        tail += losses[losses.size() - 75 + static_cast<std::size_t>(i)];
    }
    CHECK(tail < head * 0.8);

    // confidence separates faces from plates
    Rng rng(38);
    double pos = 0, neg = 0;
    for (int i = 0; i < 10; ++i) {
        const IdentitySpec id = sample_identity(rng);
        const PoseSpec pose = sample_pose(id, rng);
        const FaceSample s = render_face(id, pose, sample_style(rng));
        pos += extract_confidence(ex, s.image, &s.landmarks);
        neg += extract_confidence(ex, render_background(sample_style(rng)), nullptr);
    }
    CHECK(pos / 10 > neg / 10 + 0.2);
    CHECK(ex.conf_threshold > 0.0);
    CHECK(ex.conf_threshold < 1.0);

    // identity regression points the right way even at smoke scale; the
    // trainer streams fresh renders, so unseen faces are the only case
    const EmbedOracle o = make_embed_oracle();
    std::vector<FaceSample> val;
    Rng vr(93);
    for (int i = 0; i < 16; ++i) {
        const IdentitySpec id = sample_identity(vr);
        val.push_back(render_face(id, sample_pose(id, vr), sample_style(vr)));
    }
    CHECK(validate_extractor(ex, o, val) > 0.2);

    // deterministic: same config, same result
    std::ostringstream log2;
    IdExtractor ex2 = train_extractor(nullptr, cfg, &log2);
    CHECK(log2.str() == log.str());
    for (const auto& name : ex.params.order())
        CHECK(max_abs_diff(ex.params.at(name), ex2.params.at(name)) == 0.0);

    // archive round trip
    TensorArchive ar;
    put_extractor(ar, ex);
    IdExtractor back = get_extractor(ar);
    CHECK(back.conf_threshold == Catch::Approx(ex.conf_threshold));
    for (const auto& name : ex.params.order())
        CHECK(max_abs_diff(ex.params.at(name), back.params.at(name)) == 0.0);
}
