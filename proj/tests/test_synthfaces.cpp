#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "instid/synthfaces.hpp"

using namespace instid;

namespace {

IdentitySpec zero_id() { return IdentitySpec{}; }

PoseSpec centered_pose(double scale = 0.8) {
    PoseSpec p;
    p.rotation = 0.0;
    p.scale = scale;
    p.cx = 32.0;
    p.cy = 32.0;
    return p;
}

}  // namespace

TEST_CASE("neutral identity with centered pose puts the nose at the image center") {
    const Landmarks lm = landmarks_of(zero_id(), centered_pose());
    CHECK(lm[2].x == Catch::Approx(32.0).margin(1e-12));
    CHECK(lm[2].y == Catch::Approx(32.0).margin(1e-12));
}

TEST_CASE("eyes are mirror images about the vertical axis when unrotated") {
    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        const IdentitySpec id = sample_identity(rng);
        const Landmarks lm = landmarks_of(id, centered_pose(0.7));
        CHECK(lm[0].x + lm[1].x == Catch::Approx(64.0).margin(1e-9));
        CHECK(lm[0].y == Catch::Approx(lm[1].y).margin(1e-9));
        CHECK(lm[1].x > lm[0].x);
        CHECK(lm[3].x + lm[4].x == Catch::Approx(64.0).margin(1e-9));
    }
}

TEST_CASE("rotated landmarks match a direct rotation-matrix computation") {
    const IdentitySpec id = zero_id();
    PoseSpec pose = centered_pose(0.7);
    pose.rotation = M_PI / 6.0;
    pose.cx = 30.0;
    pose.cy = 34.0;

    PoseSpec flat = pose;
    flat.rotation = 0.0;
    const Landmarks base = landmarks_of(id, flat);
    const Landmarks rot = landmarks_of(id, pose);

    const double c = std::cos(M_PI / 6.0), s = std::sin(M_PI / 6.0);
    for (int k = 0; k < 5; ++k) {
        const double qx = base[static_cast<std::size_t>(k)].x - 30.0;
        const double qy = base[static_cast<std::size_t>(k)].y - 34.0;
        CHECK(rot[static_cast<std::size_t>(k)].x == Catch::Approx(c * qx - s * qy + 30.0).margin(1e-9));
        CHECK(rot[static_cast<std::size_t>(k)].y == Catch::Approx(s * qx + c * qy + 34.0).margin(1e-9));
    }
}

TEST_CASE("landmarks are pose-equivariant: face-local coordinates are pose independent") {
    Rng rng(5);
    const IdentitySpec id = sample_identity(rng);
    PoseSpec a = centered_pose(0.8);
    PoseSpec b;
    b.rotation = -0.4;
    b.scale = 0.8;
    b.cx = 27.0;
    b.cy = 36.0;

    const FaceGeom ga(id, a, 64), gb(id, b, 64);
    const Landmarks la = landmarks_of(id, a), lb = landmarks_of(id, b);
    for (int k = 0; k < 5; ++k) {
        double ax, ay, bx, by;
        ga.to_face(la[static_cast<std::size_t>(k)].x, la[static_cast<std::size_t>(k)].y, ax, ay);
        gb.to_face(lb[static_cast<std::size_t>(k)].x, lb[static_cast<std::size_t>(k)].y, bx, by);
        CHECK(ax == Catch::Approx(bx).margin(1e-9));
        CHECK(ay == Catch::Approx(by).margin(1e-9));
    }
}

TEST_CASE("eye spacing is a local attribute: nose and mouth center stay put") {
    IdentitySpec a = zero_id(), b = zero_id();
    b.v[1] = 0.8;
    const Landmarks la = landmarks_of(a, centered_pose());
    const Landmarks lb = landmarks_of(b, centered_pose());
    CHECK(lb[2].x == Catch::Approx(la[2].x).margin(1e-12));
    CHECK(lb[2].y == Catch::Approx(la[2].y).margin(1e-12));
    CHECK(std::abs(lb[0].x - la[0].x) > 0.5);
    CHECK(std::abs(lb[1].x - la[1].x) > 0.5);
    CHECK(lb[3].x == Catch::Approx(la[3].x).margin(1e-12));
}

TEST_CASE("rendering is deterministic") {
    Rng rng(3);
    const IdentitySpec id = sample_identity(rng);
    const PoseSpec pose = sample_pose(id, rng);
    const StyleSpec style = sample_style(rng);
    const FaceSample s1 = render_face(id, pose, style);
    const FaceSample s2 = render_face(id, pose, style);
    CHECK(max_abs_diff(s1.image, s2.image) == 0.0);
}

TEST_CASE("renderer rejects invalid inputs") {
    SECTION("face extends outside the canvas") {
        PoseSpec p = centered_pose(1.0);
        p.cx = 6.0;
        CHECK_THROWS_AS(render_face(zero_id(), p, StyleSpec{}), ConfigError);
    }
    SECTION("canvas too small") {
        CHECK_THROWS_AS(render_face(zero_id(), centered_pose(), StyleSpec{}, 16), ConfigError);
    }
    SECTION("identity component out of range") {
        IdentitySpec id = zero_id();
        id.v[3] = 1.5;
        CHECK_THROWS_AS(render_face(id, centered_pose(), StyleSpec{}), ConfigError);
    }
    SECTION("a centered pose at default scale is accepted") {
        CHECK_NOTHROW(render_face(zero_id(), centered_pose(), StyleSpec{}));
    }
}

TEST_CASE("caption text follows the fixed template and closed vocabulary") {
    StyleSpec st;
    st.background_hue = 0.5;
    st.texture = Texture::dots;
    st.accessory = Accessory::hat;
    CHECK(caption_of(st) == "a face with hat on bg4 dots background");

    st.accessory = Accessory::none;
    st.texture = Texture::flat;
    st.background_hue = 0.01;
    CHECK(caption_of(st) == "a face with plain on bg0 flat background");

    CHECK(caption_vocab().size() == 20);
    CHECK(caption_vocab()[0] == "[NULL]");
    CHECK(vocab_id("[NULL]") == 0);
    CHECK_THROWS_AS(vocab_id("cat"), ConfigError);

    // every word of every reachable caption tokenizes
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        const std::string cap = caption_of(sample_style(rng));
        std::size_t pos = 0;
        while (pos < cap.size()) {
            std::size_t sp = cap.find(' ', pos);
            if (sp == std::string::npos) sp = cap.size();
            CHECK_NOTHROW(vocab_id(cap.substr(pos, sp - pos)));
            pos = sp + 1;
        }
    }
}

TEST_CASE("sampled poses always land the face fully inside the frame") {
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
        const IdentitySpec id = sample_identity(rng);
        const PoseSpec pose = sample_pose(id, rng);
        CHECK(pose_in_frame(id, pose, 64));
        const Landmarks lm = landmarks_of(id, pose);
        for (const Pt& p : lm) {
            CHECK(p.x >= 0.0);
            CHECK(p.x <= 64.0);
            CHECK(p.y >= 0.0);
            CHECK(p.y <= 64.0);
        }
    }
}

TEST_CASE("dataset generation: counts, grouping, determinism") {
    const auto ds = make_dataset(10, 4, 7);
    REQUIRE(ds.size() == 40);
    std::set<std::array<double, kIdDim>> distinct;
    for (int s = 0; s < 40; ++s) {
        CHECK(ds[static_cast<std::size_t>(s)].id_index == s / 4);
        distinct.insert(ds[static_cast<std::size_t>(s)].identity.v);
    }
    CHECK(distinct.size() == 10);

    const auto ds2 = make_dataset(10, 4, 7);
    for (std::size_t s = 0; s < ds.size(); ++s) {
        CHECK(max_abs_diff(ds[s].image, ds2[s].image) == 0.0);
        CHECK(ds[s].caption == ds2[s].caption);
    }

    const auto ds3 = make_dataset(10, 4, 8);
    CHECK(max_abs_diff(ds[0].image, ds3[0].image) > 0.0);

    CHECK_THROWS_AS(make_dataset(0, 4, 7), ConfigError);
    CHECK_THROWS_AS(make_dataset(4, 0, 7), ConfigError);
}

TEST_CASE("dataset generation at full working size") {
    const auto ds = make_dataset(200, 20, 7);
    REQUIRE(ds.size() == 4000);
    std::set<std::array<double, kIdDim>> distinct;
    for (const auto& s : ds) distinct.insert(s.identity.v);
    CHECK(distinct.size() == 200);
}

TEST_CASE("identity sampling does not collide across 100 seeds") {
    std::set<std::array<double, kIdDim>> seen;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng root(seed);
        Rng r = root.fork("identity", 0);
        seen.insert(sample_identity(r).v);
    }
    CHECK(seen.size() == 100);
}

TEST_CASE("dataset round-trips through disk byte-exactly") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "instid_ds_test";
    fs::remove_all(dir);

    const auto ds = make_dataset(3, 2, 21);
    write_dataset(dir, ds);
    const auto back = load_dataset(dir);
    REQUIRE(back.size() == ds.size());
    for (std::size_t s = 0; s < ds.size(); ++s) {
        CHECK(max_abs_diff(back[s].image, ds[s].image) == 0.0);
        CHECK(back[s].identity == ds[s].identity);
        CHECK(back[s].id_index == ds[s].id_index);
        CHECK(back[s].caption == ds[s].caption);
        CHECK(back[s].pose.rotation == ds[s].pose.rotation);
        CHECK(back[s].pose.scale == ds[s].pose.scale);
        CHECK(back[s].pose.cx == ds[s].pose.cx);
        CHECK(back[s].style.background_hue == ds[s].style.background_hue);
        CHECK(back[s].style.texture == ds[s].style.texture);
        CHECK(back[s].style.accessory == ds[s].style.accessory);
        for (int k = 0; k < 5; ++k) {
            CHECK(back[s].landmarks[static_cast<std::size_t>(k)].x ==
                  ds[s].landmarks[static_cast<std::size_t>(k)].x);
            CHECK(back[s].landmarks[static_cast<std::size_t>(k)].y ==
                  ds[s].landmarks[static_cast<std::size_t>(k)].y);
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("loading a corrupt or missing dataset fails cleanly") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "instid_ds_bad";
    fs::remove_all(dir);
    CHECK_THROWS_AS(load_dataset(dir), DependencyError);

    fs::create_directories(dir);
    {
        std::ofstream mf(dir / "manifest.jsonl");
        mf << "this is not json\n";
    }
    CHECK_THROWS_AS(load_dataset(dir), DependencyError);
    fs::remove_all(dir);
}
