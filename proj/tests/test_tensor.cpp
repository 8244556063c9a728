#include "doctest.h"

#include <cmath>

#include "garnet/tensor.hpp"
#include "test_util.hpp"

using namespace garnet;
using namespace garnet::test;

TEST_SUITE_BEGIN("tensor");

namespace {

// Wraps a tensor op into a scalar function with a fixed random functional so
// gradient checks exercise a non-trivial output gradient.
Tensor weigh(const Tensor& t, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> c(static_cast<size_t>(t.numel()));
    for (double& v : c) v = rng.normal();
    return reduce_sum(mul(t, Tensor::from_data(t.shape(), std::move(c))));
}

} // namespace

TEST_CASE("conv 1d identity kernel preserves values") {
    Tensor x = Tensor::from_data({1, 3}, {2.0, 5.0, 7.0});
    Tensor w = Tensor::from_data({1, 1, 1}, {1.0});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv(x, w, b, {.dims = 1, .stride = 1, .pad = 0});
    CHECK(y.shape() == Shape{1, 3});
    CHECK(y.at(0) == 2.0);
    CHECK(y.at(1) == 5.0);
    CHECK(y.at(2) == 7.0);
}

TEST_CASE("conv 2d all-ones 3x3 kernel on constant grid") {
    Tensor x = Tensor::full({1, 5, 5}, 1.0);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor b = Tensor::zeros({1});
    Tensor y = conv(x, w, b, {.dims = 2, .stride = 1, .pad = 0});
    REQUIRE(y.shape() == Shape{1, 3, 3});
    for (int i = 0; i < 9; ++i) CHECK(y.at(i) == doctest::Approx(9.0).epsilon(1e-15));
}

TEST_CASE("transposed conv 3d shape arithmetic") {
    Rng rng(7);
    Tensor x = random_tensor({3, 2, 2, 2}, rng);
    Tensor w = random_tensor({5, 3, 4, 4, 4}, rng);
    Tensor b = random_tensor({5}, rng);
    Tensor y = conv(x, w, b, {.dims = 3, .stride = 2, .pad = 1, .transposed = true});
    CHECK(y.shape() == Shape{5, 4, 4, 4});
}

TEST_CASE("conv matches the direct-definition oracle") {
    struct Case {
        int dims, c_in, c_out, extent, k, stride, pad;
        bool transposed;
    };
    const Case cases[] = {
        {1, 2, 3, 7, 3, 1, 1, false}, {1, 2, 3, 8, 4, 2, 1, false}, {2, 2, 2, 6, 3, 1, 1, false},
        {2, 3, 2, 7, 3, 2, 0, false}, {3, 2, 3, 5, 3, 1, 1, false}, {3, 2, 2, 4, 4, 2, 1, false},
        {1, 2, 2, 5, 3, 1, 1, true},  {2, 2, 2, 4, 4, 2, 1, true},  {3, 2, 2, 3, 4, 2, 1, true},
        {3, 1, 2, 4, 1, 1, 0, true},
    };
    for (const Case& c : cases) {
        CAPTURE(c.dims);
        CAPTURE(c.k);
        CAPTURE(c.stride);
        CAPTURE(c.transposed);
        Rng rng(static_cast<uint64_t>(c.dims * 1000 + c.k * 100 + c.stride * 10 + c.transposed));
        Shape xs{c.c_in};
        Shape ws{c.c_out, c.c_in};
        for (int d = 0; d < c.dims; ++d) {
            xs.push_back(c.extent);
            ws.push_back(c.k);
        }
        Tensor x = random_tensor(xs, rng);
        Tensor w = random_tensor(ws, rng);
        Tensor b = random_tensor({c.c_out}, rng);
        Tensor y = conv(x, w, b, {.dims = c.dims, .stride = c.stride, .pad = c.pad, .transposed = c.transposed});

        OracleConvArgs a;
        a.c_in = c.c_in;
        a.c_out = c.c_out;
        a.transposed = c.transposed;
        for (int d = 0; d < c.dims; ++d) {
            const int axis = 3 - c.dims + d;
            a.in[axis] = c.extent;
            a.k[axis] = c.k;
            a.s[axis] = c.stride;
            a.p[axis] = c.pad;
        }
        int out_ext[3];
        std::vector<double> xe(x.data().begin(), x.data().end());
        std::vector<double> we(w.data().begin(), w.data().end());
        std::vector<double> be(b.data().begin(), b.data().end());
        std::vector<double> expect = oracle_conv(xe, we, be, a, out_ext);
        REQUIRE(expect.size() == static_cast<size_t>(y.numel()));
        CHECK(max_abs_diff(y.data(), expect) < 1e-12);
    }
}

TEST_CASE("transposed conv is the adjoint of conv") {
    // <conv(x; w), y> == <x, tconv(y; w~)> with channel-swapped weights, for
    // geometries where the transposed output extent matches x exactly.
    struct Geo {
        int dims, extent, k, stride, pad;
    };
    const Geo geos[] = {{1, 8, 3, 1, 1}, {2, 6, 4, 2, 1}, {3, 6, 4, 2, 1}, {3, 5, 3, 1, 1}};
    for (const Geo& g : geos) {
        Rng rng(static_cast<uint64_t>(g.dims * 31 + g.k));
        const int ci = 2, co = 3;
        Shape xs{ci}, ws{co, ci}, wts{ci, co};
        for (int d = 0; d < g.dims; ++d) {
            xs.push_back(g.extent);
            ws.push_back(g.k);
            wts.push_back(g.k);
        }
        Tensor x = random_tensor(xs, rng);
        Tensor w = random_tensor(ws, rng);
        Tensor y_probe;
        Tensor fwd = conv(x, w, Tensor::zeros({co}), {.dims = g.dims, .stride = g.stride, .pad = g.pad});
        y_probe = random_tensor(fwd.shape(), rng);

        // w~[ci, co, k] = w[co, ci, k]
        std::vector<double> wt(w.data().size());
        int64_t ksz = 1;
        for (int d = 0; d < g.dims; ++d) ksz *= g.k;
        for (int a = 0; a < co; ++a)
            for (int bch = 0; bch < ci; ++bch)
                for (int64_t t = 0; t < ksz; ++t)
                    wt[static_cast<size_t>((bch * co + a) * ksz + t)] =
                        w.data()[static_cast<size_t>((a * ci + bch) * ksz + t)];
        Tensor wswap = Tensor::from_data(wts, std::move(wt));
        Tensor back = conv(y_probe, wswap, Tensor::zeros({ci}),
                           {.dims = g.dims, .stride = g.stride, .pad = g.pad, .transposed = true});
        REQUIRE(back.shape() == x.shape());

        double lhs = 0.0, rhs = 0.0;
        for (int64_t i = 0; i < fwd.numel(); ++i) lhs += fwd.at(i) * y_probe.at(i);
        for (int64_t i = 0; i < x.numel(); ++i) rhs += x.at(i) * back.at(i);
        CHECK(std::fabs(lhs - rhs) < 1e-9);
    }
}

TEST_CASE("global and channel pooling examples") {
    Tensor x = Tensor::from_data({2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, -1});
    Tensor mx = global_pool(x, PoolKind::kMax);
    CHECK(mx.shape() == Shape{2});
    CHECK(mx.at(0) == 4.0);
    CHECK(mx.at(1) == 0.0);
    Tensor av = global_pool(x, PoolKind::kAvg);
    CHECK(av.at(0) == doctest::Approx(2.5));
    CHECK(av.at(1) == doctest::Approx(-0.25));

    Tensor cell = Tensor::from_data({2, 1, 1}, {1.0, -3.0});
    Tensor cm = channel_pool(cell, PoolKind::kMax);
    CHECK(cm.shape() == Shape{1, 1, 1});
    CHECK(cm.at(0) == 1.0);
}

TEST_CASE("activation examples") {
    Tensor x = Tensor::from_data({3}, {-1.5, 0.0, -1.0});
    CHECK(relu(x).at(0) == 0.0);
    CHECK(sigmoid(x).at(1) == 0.5);
    CHECK(leaky_relu(x, 0.2).at(2) == doctest::Approx(-0.2));
}

TEST_CASE("softmax over branches: analytic cases") {
    Tensor a = Tensor::full({2, 3}, 0.7);
    Tensor b = Tensor::full({2, 3}, 0.7);
    auto equal = softmax_over_branches({a, b});
    for (const Tensor& t : equal)
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(t.at(i) == doctest::Approx(0.5).epsilon(1e-12));

    auto single = softmax_over_branches({a});
    for (int64_t i = 0; i < single[0].numel(); ++i) CHECK(single[0].at(i) == 1.0);

    Tensor z = Tensor::full({1, 4}, 0.0);
    Tensor l3 = Tensor::full({1, 4}, std::log(3.0));
    auto pair = softmax_over_branches({z, l3});
    CHECK(pair[0].at(0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(pair[1].at(0) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax with one branch has exactly zero input gradient") {
    Tensor x = Tensor::from_data({2, 2}, {0.3, -1.0, 2.0, 0.1}, true);
    auto outs = softmax_over_branches({x});
    backward(reduce_sum(outs[0]));
    REQUIRE(x.has_grad());
    for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("softmax properties: normalization and shift invariance") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed);
        const int n = 2 + static_cast<int>(seed % 4);
        std::vector<Tensor> logits, shifted;
        Tensor c = random_tensor({3, 4}, rng);
        for (int i = 0; i < n; ++i) {
            Tensor t = random_tensor({3, 4}, rng);
            logits.push_back(t);
            shifted.push_back(add(t, c));
        }
        auto s0 = softmax_over_branches(logits);
        auto s1 = softmax_over_branches(shifted);
        for (int64_t i = 0; i < s0[0].numel(); ++i) {
            double total = 0.0;
            for (int br = 0; br < n; ++br) total += s0[static_cast<size_t>(br)].at(i);
            CHECK(std::fabs(total - 1.0) < 1e-9);
            for (int br = 0; br < n; ++br)
                CHECK(std::fabs(s0[static_cast<size_t>(br)].at(i) - s1[static_cast<size_t>(br)].at(i)) < 1e-9);
        }
    }
}

TEST_CASE("linear identity, concat shape, reduce_sum example") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor eye = Tensor::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor y = linear(x, eye, Tensor::zeros({3}));
    CHECK(all_close(y.data(), x.data(), 0.0));

    Tensor a = Tensor::full({4, 32, 32, 32}, 0.5);
    Tensor b = Tensor::full({1, 32, 32, 32}, 0.25);
    Tensor cat = concat({a, b}, 0);
    CHECK(cat.shape() == Shape{5, 32, 32, 32});
    CHECK(cat.at(4 * 32768) == 0.25);

    CHECK(reduce_sum(x).item() == 6.0);
}

TEST_CASE("backward basics and accumulation") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    backward(reduce_sum(x));
    REQUIRE(x.has_grad());
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 1.0);

    Tensor y = Tensor::from_data({1}, {2.0}, true);
    Tensor loss = reduce_sum(mul(y, y));
    backward(loss);
    CHECK(y.grad()[0] == 4.0);
    backward(loss); // repeated call accumulates
    CHECK(y.grad()[0] == 8.0);
}

TEST_CASE("backward rejects non-scalar and disconnected losses") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(add(x, x)), contract_error);
    Tensor c = Tensor::from_data({1}, {3.0});
    CHECK_THROWS_AS(backward(c), contract_error);
}

TEST_CASE("grad_check of sum is exactly zero") {
    // Dyadic values and a dyadic step keep every float operation exact.
    Tensor x = Tensor::from_data({4}, {0.5, -0.25, 0.375, 1.0}, true);
    const double err = grad_check([](const Tensor& t) { return reduce_sum(t); }, x, 0x1.0p-17);
    CHECK(err == 0.0);
}

TEST_CASE("finite differences agree for every primitive") {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Rng rng(seed * 77 + 1);
        const double eps = 1e-5, tol = 1e-4;

        auto fd = [&](const char* name, const std::function<Tensor(const Tensor&)>& f, Tensor x) {
            CAPTURE(name);
            CAPTURE(seed);
            CHECK(grad_check(f, x, eps) < tol);
        };

        Tensor other = random_tensor({2, 3, 4}, rng);
        fd("add", [&](const Tensor& t) { return weigh(add(t, other), seed); }, random_tensor({2, 3, 4}, rng, true));
        fd("sub", [&](const Tensor& t) { return weigh(sub(other, t), seed); }, random_tensor({2, 3, 4}, rng, true));
        fd("mul", [&](const Tensor& t) { return weigh(mul(t, other), seed); }, random_tensor({2, 3, 4}, rng, true));
        fd("div_num", [&](const Tensor& t) { return weigh(div(t, add_const(abs(other), 0.5)), seed); },
           random_tensor({2, 3, 4}, rng, true));
        fd("div_den", [&](const Tensor& t) { return weigh(div(other, add_const(mul(t, t), 0.5)), seed); },
           random_tensor({2, 3, 4}, rng, true));
        fd("scale", [&](const Tensor& t) { return weigh(scale(t, -2.5), seed); }, random_tensor({5}, rng, true));
        fd("relu", [&](const Tensor& t) { return weigh(relu(t), seed); }, random_tensor({3, 4}, rng, true));
        fd("leaky_relu", [&](const Tensor& t) { return weigh(leaky_relu(t, 0.2), seed); },
           random_tensor({3, 4}, rng, true));
        fd("sigmoid", [&](const Tensor& t) { return weigh(sigmoid(t), seed); }, random_tensor({3, 4}, rng, true));
        fd("log", [&](const Tensor& t) { return weigh(log(add_const(abs(t), 0.5)), seed); },
           random_tensor({3, 4}, rng, true));
        fd("sqrt", [&](const Tensor& t) { return weigh(sqrt(add_const(mul(t, t), 0.3)), seed); },
           random_tensor({3, 4}, rng, true));
        fd("abs", [&](const Tensor& t) { return weigh(abs(t), seed); }, random_tensor({3, 4}, rng, true));
        fd("clamp", [&](const Tensor& t) { return weigh(clamp(t, -1.31, 1.37), seed); },
           random_tensor({3, 4}, rng, true));
        fd("concat", [&](const Tensor& t) { return weigh(concat({t, other}, 1), seed); },
           random_tensor({2, 3, 4}, rng, true));
        fd("reduce_mean", [&](const Tensor& t) { return reduce_mean(mul(t, t)); },
           random_tensor({3, 4}, rng, true));
        fd("broadcast_channels", [&](const Tensor& t) { return weigh(broadcast_channels(t, {3, 2, 2}), seed); },
           random_tensor({3}, rng, true));
        fd("broadcast_spatial", [&](const Tensor& t) { return weigh(broadcast_spatial(t, 4), seed); },
           random_tensor({1, 2, 3}, rng, true));
        fd("global_max", [&](const Tensor& t) { return weigh(global_pool(t, PoolKind::kMax), seed); },
           random_tensor({3, 2, 4}, rng, true));
        fd("global_avg", [&](const Tensor& t) { return weigh(global_pool(t, PoolKind::kAvg), seed); },
           random_tensor({3, 2, 4}, rng, true));
        fd("channel_max", [&](const Tensor& t) { return weigh(channel_pool(t, PoolKind::kMax), seed); },
           random_tensor({3, 2, 4}, rng, true));
        fd("channel_avg", [&](const Tensor& t) { return weigh(channel_pool(t, PoolKind::kAvg), seed); },
           random_tensor({3, 2, 4}, rng, true));
        fd("avg_pool2d", [&](const Tensor& t) { return weigh(avg_pool2d(t, 2, 2), seed); },
           random_tensor({2, 4, 4}, rng, true));

        Tensor lw = random_tensor({3, 5}, rng);
        Tensor lb = random_tensor({3}, rng);
        fd("linear_x", [&](const Tensor& t) { return weigh(linear(t, lw, lb), seed); },
           random_tensor({5}, rng, true));
        Tensor lx = random_tensor({5}, rng);
        fd("linear_w", [&](const Tensor& t) { return weigh(linear(lx, t, lb), seed); },
           random_tensor({3, 5}, rng, true));
        fd("linear_b", [&](const Tensor& t) { return weigh(linear(lx, lw, t), seed); },
           random_tensor({3}, rng, true));

        // conv: x, w and b paths, normal and transposed
        Tensor cw = random_tensor({2, 2, 3, 3}, rng);
        Tensor cb = random_tensor({2}, rng);
        ConvSpec c2{.dims = 2, .stride = 1, .pad = 1};
        fd("conv_x", [&](const Tensor& t) { return weigh(conv(t, cw, cb, c2), seed); },
           random_tensor({2, 5, 5}, rng, true));
        Tensor cx = random_tensor({2, 5, 5}, rng);
        fd("conv_w", [&](const Tensor& t) { return weigh(conv(cx, t, cb, c2), seed); },
           random_tensor({2, 2, 3, 3}, rng, true));
        fd("conv_b", [&](const Tensor& t) { return weigh(conv(cx, cw, t, c2), seed); },
           random_tensor({2}, rng, true));
        ConvSpec ct{.dims = 3, .stride = 2, .pad = 1, .transposed = true};
        Tensor tw = random_tensor({2, 2, 4, 4, 4}, rng);
        fd("tconv_x", [&](const Tensor& t) { return weigh(conv(t, tw, cb, ct), seed); },
           random_tensor({2, 3, 3, 3}, rng, true));
        Tensor tx = random_tensor({2, 3, 3, 3}, rng);
        fd("tconv_w", [&](const Tensor& t) { return weigh(conv(tx, t, cb, ct), seed); },
           random_tensor({2, 2, 4, 4, 4}, rng, true));

        // softmax across branches, gradient through one branch
        Tensor s1 = random_tensor({2, 3}, rng);
        fd("softmax_branches",
           [&](const Tensor& t) {
               auto outs = softmax_over_branches({t, s1});
               return add(weigh(outs[0], seed), weigh(outs[1], seed + 1));
           },
           random_tensor({2, 3}, rng, true));
    }
}

TEST_CASE("forward passes are bitwise deterministic") {
    Rng rng(404);
    Tensor x = random_tensor({3, 6, 6}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    Tensor y1 = conv(x, w, b, {.dims = 2, .stride = 1, .pad = 1});
    Tensor y2 = conv(x, w, b, {.dims = 2, .stride = 1, .pad = 1});
    for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));
}

TEST_CASE("contract violations name the offending axis") {
    Tensor x = Tensor::zeros({3, 5, 5});
    Tensor w = Tensor::zeros({4, 2, 3, 3}); // wrong in-channels
    CHECK_THROWS_WITH_AS(conv(x, w, Tensor::zeros({4}), ConvSpec{.dims = 2}),
                         doctest::Contains("axis 1"), contract_error);
    CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), contract_error);
    CHECK_THROWS_AS(softmax_over_branches({}), contract_error);
    CHECK_THROWS_AS(linear(Tensor::zeros({3}), Tensor::zeros({2, 4}), Tensor::zeros({2})), contract_error);
}

TEST_SUITE_END();
