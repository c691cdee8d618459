#include <catch2/catch_amalgamated.hpp>

#include "instid/rng.hpp"
#include "instid/tensor.hpp"

using instid::Shape;
using instid::Tensor;

TEST_CASE("tensor construction and fill") {
    Tensor<float> t(Shape{2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.ndim() == 2);
    for (int i = 0; i < 6; ++i) REQUIRE(t[i] == 0.0f);
    t.fill(2.5f);
    REQUIRE(t.at(1, 2) == 2.5f);
}

TEST_CASE("from rejects mismatched value count") {
    REQUIRE_THROWS_AS(Tensor<float>::from(Shape{2, 2}, {1.0f, 2.0f, 3.0f}), instid::ShapeError);
    auto t = Tensor<float>::from(Shape{2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    REQUIRE(t.at(1, 0) == 3.0f);
}

TEST_CASE("at is row major") {
    auto t = Tensor<int>::from(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
    REQUIRE(t.at(0, 2) == 2);
    REQUIRE(t.at(1, 0) == 3);
    auto u = Tensor<int>::from(Shape{2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    REQUIRE(u.at(1, 0, 1) == 5);
}

TEST_CASE("reshaped keeps data, checks numel") {
    auto t = Tensor<int>::from(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
    auto r = t.reshaped(Shape{3, 2});
    REQUIRE(r.at(2, 1) == 5);
    REQUIRE_THROWS_AS(t.reshaped(Shape{4, 2}), instid::ShapeError);
}

TEST_CASE("cast converts element type") {
    auto t = Tensor<float>::from(Shape{2}, {1.5f, -2.25f});
    auto d = t.cast<double>();
    REQUIRE(d[0] == 1.5);
    REQUIRE(d[1] == -2.25);
}

TEST_CASE("randn uses given rng deterministically") {
    instid::Rng a(5), b(5);
    auto x = Tensor<float>::randn(Shape{16}, a);
    auto y = Tensor<float>::randn(Shape{16}, b);
    REQUIRE(instid::max_abs_diff(x, y) == 0.0f);
    auto z = Tensor<float>::randn(Shape{16}, a, 0.01f);
    REQUIRE(z.abs_max() < 0.1f);
}

TEST_CASE("all_finite flags nan and inf") {
    Tensor<float> t(Shape{3}, 1.0f);
    REQUIRE(t.all_finite());
    t[1] = std::numeric_limits<float>::infinity();
    REQUIRE_FALSE(t.all_finite());
    t[1] = std::numeric_limits<float>::quiet_NaN();
    REQUIRE_FALSE(t.all_finite());
}

TEST_CASE("diff helpers") {
    auto a = Tensor<float>::from(Shape{2}, {1.0f, 2.0f});
    auto b = Tensor<float>::from(Shape{2}, {1.5f, 1.0f});
    REQUIRE(instid::max_abs_diff(a, b) == 1.0f);
    REQUIRE(instid::mean_abs_diff(a, b) == Catch::Approx(0.75));
}
