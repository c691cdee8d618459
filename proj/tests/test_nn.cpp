#include <catch2/catch_amalgamated.hpp>

#include "instid/nn.hpp"

using namespace instid;
using DTape = instid::Tape<double>;

TEST_CASE("param store rejects duplicates and unknown names") {
    ParamStore<double> ps;
    ps.add("a.w", Tensor<double>(Shape{2}));
    REQUIRE_THROWS_AS(ps.add("a.w", Tensor<double>(Shape{2})), ConfigError);
    REQUIRE_THROWS_AS(ps.at("b.w"), DependencyError);
    REQUIRE(ps.has("a.w"));
}

TEST_CASE("param store prefix queries") {
    ParamStore<double> ps;
    ps.add("unet.c1.w", Tensor<double>(Shape{4}));
    ps.add("unet.c1.b", Tensor<double>(Shape{2}));
    ps.add("adapter.p.w", Tensor<double>(Shape{3}));
    REQUIRE(ps.names_with_prefix("unet.").size() == 2);
    REQUIRE(ps.numel_with_prefix("unet.") == 6);
    REQUIRE(ps.numel_with_prefix("adapter.") == 3);
}

TEST_CASE("adam minimizes a quadratic") {
    ParamStore<double> ps;
    ps.add("p", Tensor<double>::from(Shape{1}, {-4.0}));
    Adam<double> opt(0.1);
    for (int i = 0; i < 400; ++i) {
        GradMap<double> g;
        g["p"] = Tensor<double>::from(Shape{1}, {2.0 * (ps.at("p")[0] - 3.0)});
        opt.step(ps, g);
    }
    REQUIRE(std::abs(ps.at("p")[0] - 3.0) < 1e-3);
}

TEST_CASE("ctx respects the trainable predicate") {
    ParamStore<double> ps;
    Rng rng(1);
    init_linear(ps, "frozen.l", 2, 3, rng);
    init_linear(ps, "live.l", 2, 2, rng);
    const Tensor<double> frozen_before = ps.at("frozen.l.w");

    Tensor<double> x = Tensor<double>::randn(Shape{4, 3}, rng);
    Tensor<double> target(Shape{4, 2}, 0.5);

    Adam<double> opt(0.05);
    for (int step = 0; step < 50; ++step) {
        DTape tape;
        Ctx<double> ctx{tape, ps, [](const std::string& n) { return n.rfind("live.", 0) == 0; }};
        auto h = lin(ctx, "frozen.l", tape.leaf(x));
        auto y = lin(ctx, "live.l", h);
        auto loss = tape.mse(y, target);
        tape.backward(loss);
        GradMap<double> g;
        collect_grads(tape, ctx, g);
        REQUIRE(g.count("frozen.l.w") == 0);
        REQUIRE(g.count("live.l.w") == 1);
        opt.step(ps, g);
    }
    REQUIRE(max_abs_diff(ps.at("frozen.l.w"), frozen_before) == 0.0);
}

TEST_CASE("linear regression converges end to end") {
    Rng rng(7);
    Tensor<double> w_true = Tensor<double>::randn(Shape{2, 3}, rng);
    Tensor<double> x = Tensor<double>::randn(Shape{32, 3}, rng);
    Tensor<double> y(Shape{32, 2});
    for (int i = 0; i < 32; ++i)
        for (int o = 0; o < 2; ++o) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += x.at(i, k) * w_true.at(o, k);
            y.at(i, o) = acc + 0.3;
        }

    ParamStore<double> ps;
    init_linear(ps, "fit", 2, 3, rng);
    Adam<double> opt(0.05);
    double first = -1.0, last = -1.0;
    for (int step = 0; step < 300; ++step) {
        DTape tape;
        Ctx<double> ctx{tape, ps, [](const std::string&) { return true; }};
        auto loss = tape.mse(lin(ctx, "fit", tape.leaf(x)), y);
        tape.backward(loss);
        if (step == 0) first = tape.val(loss)[0];
        last = tape.val(loss)[0];
        GradMap<double> g;
        collect_grads(tape, ctx, g);
        opt.step(ps, g);
    }
    REQUIRE(last < first * 1e-4);
    REQUIRE(std::abs(ps.at("fit.b")[0] - 0.3) < 1e-2);
}

TEST_CASE("collect_grads accumulates across tapes") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>::from(Shape{2}, {1.0, 2.0}));
    GradMap<double> acc;
    for (int rep = 0; rep < 3; ++rep) {
        DTape tape;
        Ctx<double> ctx{tape, ps, [](const std::string&) { return true; }};
        auto loss = tape.sum(ctx.p("w"));
        tape.backward(loss);
        collect_grads(tape, ctx, acc);
    }
    REQUIRE(acc.at("w")[0] == 3.0);
    REQUIRE(acc.at("w")[1] == 3.0);
}

TEST_CASE("gradient clipping rescales to the cap") {
    GradMap<double> g;
    g["a"] = Tensor<double>::from(Shape{2}, {3.0, 0.0});
    g["b"] = Tensor<double>::from(Shape{1}, {4.0});
    REQUIRE(grad_global_norm(g) == Catch::Approx(5.0));
    clip_global_norm(g, 1.0);
    REQUIRE(grad_global_norm(g) == Catch::Approx(1.0));
    REQUIRE(g["a"][0] == Catch::Approx(0.6));
    clip_global_norm(g, 10.0);  // below cap: unchanged
    REQUIRE(grad_global_norm(g) == Catch::Approx(1.0));
}

TEST_CASE("initializers produce expected shapes and zeros") {
    ParamStore<float> ps;
    Rng rng(3);
    init_conv(ps, "c", 8, 4, 3, rng);
    REQUIRE(ps.at("c.w").shape == Shape{8, 4, 3, 3});
    REQUIRE(ps.at("c.b").abs_max() == 0.0f);
    init_conv_zero(ps, "z", 2, 2, 1);
    REQUIRE(ps.at("z.w").abs_max() == 0.0f);
    init_gn(ps, "n", 16);
    REQUIRE(ps.at("n.g")[0] == 1.0f);
    REQUIRE(ps.at("n.b")[15] == 0.0f);
}
