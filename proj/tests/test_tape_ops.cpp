#include <catch2/catch_amalgamated.hpp>

#include "gtok/gradcheck.hpp"
#include "gtok/ops.hpp"
#include "gtok/tape.hpp"

using namespace gtok;
using Catch::Approx;

namespace {

template <typename T>
Var leafv(Tape<T>& t, std::vector<T> v, Shape s, bool grad = true) {
    return t.leaf(Tensor<T>::from(std::move(v), std::move(s)), grad);
}

}  // namespace

TEST_CASE("finite difference gradient suite") {
    GradCheckReport rep = gradient_check(0);
    CAPTURE(rep.worst_op()->op, rep.worst());
    REQUIRE(rep.ops.size() >= 30);
    REQUIRE(rep.ok(1e-4));
}

TEST_CASE("conv1d identity kernel preserves the signal") {
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3, 4, 5}, {1, 5});
    Var w = leafv(t, {1}, {1, 1, 1});
    Var y = ops::conv1d(t, x, w, Var{}, ops::ConvSpec{});
    for (int i = 0; i < 5; ++i) {
        REQUIRE(t.val(y)[i] == Approx(i + 1.0));
    }
}

TEST_CASE("conv1d strided example") {
    // kernel [1,1], stride 2, no padding over [1,2,3,4] gives [3,7]
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3, 4}, {1, 4});
    Var w = leafv(t, {1, 1}, {1, 1, 2});
    Var y = ops::conv1d(t, x, w, Var{}, ops::ConvSpec{2, 0, 0, 1});
    REQUIRE(t.val(y).shape() == Shape{1, 2});
    REQUIRE(t.val(y)[0] == Approx(3.0));
    REQUIRE(t.val(y)[1] == Approx(7.0));
}

TEST_CASE("conv1d zero padding contributes zeros") {
    Tape<double> t;
    Var x = leafv(t, {1, 1}, {1, 2});
    Var w = leafv(t, {1, 1, 1}, {1, 1, 3});
    Var y = ops::conv1d(t, x, w, Var{}, ops::ConvSpec{1, 1, 1, 1});
    REQUIRE(t.val(y).shape() == Shape{1, 2});
    REQUIRE(t.val(y)[0] == Approx(2.0));  // 0+1+1
    REQUIRE(t.val(y)[1] == Approx(2.0));  // 1+1+0
}

TEST_CASE("conv1d rejects shape mismatch with a diagnostic") {
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3}, {1, 3});
    Var w = leafv(t, {1, 1}, {1, 2, 1});  // expects Cin=2
    try {
        ops::conv1d(t, x, w, Var{}, ops::ConvSpec{});
        FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("conv1d") != std::string::npos);
        REQUIRE(msg.find('[') != std::string::npos);
    }
}

TEST_CASE("conv1d_transpose doubles length with k4 s2 p1") {
    Tape<double> t;
    Rng rng(5);
    Tensor<double> x({3, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        x[i] = rng.normal();
    }
    Tensor<double> w({3, 2, 4});
    for (std::int64_t i = 0; i < w.numel(); ++i) {
        w[i] = rng.normal();
    }
    Var y = ops::conv1d_transpose(t, t.leaf(x, false), t.leaf(w, false), Var{}, 2, 1);
    REQUIRE(t.val(y).shape() == Shape{2, 12});

    // oracle: direct scatter sum
    Tensor<double> want({2, 12});
    for (std::int64_t ci = 0; ci < 3; ++ci) {
        for (std::int64_t l = 0; l < 6; ++l) {
            for (std::int64_t co = 0; co < 2; ++co) {
                for (std::int64_t k = 0; k < 4; ++k) {
                    const std::int64_t j = l * 2 + k - 1;
                    if (j >= 0 && j < 12) {
                        want.at(co, j) += x.at(ci, l) * w.at(ci, co, k);
                    }
                }
            }
        }
    }
    for (std::int64_t i = 0; i < want.numel(); ++i) {
        REQUIRE(t.val(y)[i] == Approx(want[i]).margin(1e-12));
    }
}

TEST_CASE("matmul hand example and fan-out accumulation") {
    Tape<double> t;
    Var a = leafv(t, {1, 2, 3, 4}, {2, 2});
    Var b = leafv(t, {5, 6, 7, 8}, {2, 2});
    Var y = ops::matmul(t, a, b);
    REQUIRE(t.val(y)[0] == Approx(19.0));
    REQUIRE(t.val(y)[1] == Approx(22.0));
    REQUIRE(t.val(y)[2] == Approx(43.0));
    REQUIRE(t.val(y)[3] == Approx(50.0));

    Var s = ops::add(t, a, a);
    t.backward(ops::sum_all(t, s));
    for (int i = 0; i < 4; ++i) {
        REQUIRE(t.grad(a)[i] == Approx(2.0));
    }
}

TEST_CASE("sum of squares gradient is 2x") {
    Tape<double> t;
    Var x = leafv(t, {1, -2, 3}, {3});
    Var y = ops::mul(t, x, x);
    t.backward(ops::sum_all(t, y));
    REQUIRE(t.grad(x)[0] == Approx(2.0));
    REQUIRE(t.grad(x)[1] == Approx(-4.0));
    REQUIRE(t.grad(x)[2] == Approx(6.0));
}

TEST_CASE("relu gradient is zero on the negative side") {
    Tape<double> t;
    Var x = leafv(t, {-1.0}, {1});
    Var y = ops::relu(t, x);
    REQUIRE(t.val(y)[0] == 0.0);
    t.backward(ops::sum_all(t, y));
    REQUIRE(t.grad(x)[0] == 0.0);
}

TEST_CASE("leaky_relu applies the slope below zero") {
    Tape<double> t;
    Var x = leafv(t, {-2.0, 3.0}, {2});
    Var y = ops::leaky_relu(t, x, 0.3);
    REQUIRE(t.val(y)[0] == Approx(-0.6));
    REQUIRE(t.val(y)[1] == Approx(3.0));
    t.backward(ops::sum_all(t, y));
    REQUIRE(t.grad(x)[0] == Approx(0.3));
    REQUIRE(t.grad(x)[1] == Approx(1.0));
}

TEST_CASE("softmax of uniform logits is uniform and sums to one") {
    Tape<double> t;
    Var x = leafv(t, {0.7, 0.7, 0.7, 0.7}, {4});
    Var y = ops::softmax(t, x);
    for (int i = 0; i < 4; ++i) {
        REQUIRE(t.val(y)[i] == Approx(0.25));
    }
    Tape<double> t2;
    Rng rng(1);
    Tensor<double> r({6, 9});
    for (std::int64_t i = 0; i < r.numel(); ++i) {
        r[i] = rng.normal() * 3;
    }
    Var z = ops::softmax(t2, t2.leaf(r, false));
    for (std::int64_t i = 0; i < 6; ++i) {
        double s = 0.0;
        for (std::int64_t j = 0; j < 9; ++j) {
            const double p = t2.val(z).at(i, j);
            REQUIRE(p >= 0.0);
            s += p;
        }
        REQUIRE(s == Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("log_softmax agrees with log of softmax") {
    Tape<double> t;
    Var x = leafv(t, {0.2, -1.4, 2.0, 0.0, 1.0, -3.0}, {2, 3});
    Var ls = ops::log_softmax(t, x);
    Var sm = ops::softmax(t, x);
    for (std::int64_t i = 0; i < 6; ++i) {
        REQUIRE(t.val(ls)[i] == Approx(std::log(t.val(sm)[i])).epsilon(1e-9));
    }
}

TEST_CASE("layer_norm maps constant rows to beta") {
    Tape<double> t;
    Var x = leafv(t, {3, 3, 3, 3, -1, -1, -1, -1}, {2, 4});
    Var gamma = leafv(t, {2, 2, 2, 2}, {4});
    Var beta = leafv(t, {0.5, 0.5, 0.5, 0.5}, {4});
    Var y = ops::layer_norm(t, x, gamma, beta);
    for (std::int64_t i = 0; i < 8; ++i) {
        REQUIRE(t.val(y)[i] == Approx(0.5).margin(1e-4));
    }
}

TEST_CASE("group_norm normalizes per group") {
    // 4 channels, 2 groups: group stats must not mix across groups
    Tape<double> t;
    Var x = leafv(t, {1, 1, 3, 3, 100, 100, 102, 102}, {4, 2});
    Var gamma = leafv(t, {1, 1, 1, 1}, {4});
    Var beta = leafv(t, {0, 0, 0, 0}, {4});
    Var y = ops::group_norm(t, x, 2, gamma, beta, 0.0);
    // both groups have mean 2 / 101, std 1, so normalized output is the same
    REQUIRE(t.val(y).at(0, 0) == Approx(-1.0).margin(1e-6));
    REQUIRE(t.val(y).at(1, 1) == Approx(1.0).margin(1e-6));
    REQUIRE(t.val(y).at(2, 0) == Approx(-1.0).margin(1e-6));
    REQUIRE(t.val(y).at(3, 1) == Approx(1.0).margin(1e-6));
    REQUIRE_THROWS_AS(ops::group_norm(t, x, 3, gamma, beta), std::invalid_argument);
}

TEST_CASE("batch_norm1d updates running statistics") {
    Tape<float> t;
    Var x = leafv<float>(t, {1, 3, 2, 4}, {2, 2});
    Var gamma = leafv<float>(t, {1, 1}, {2});
    Var beta = leafv<float>(t, {0, 0}, {2});
    Tensor<float> rm({2});
    Tensor<float> rv({2}, 1.0f);
    ops::batch_norm1d(t, x, gamma, beta, rm, rv, 0.1, 1e-5, true);
    // channel 0: mean 2, unbiased var 2; channel 1: mean 3, unbiased var 2
    REQUIRE(rm[0] == Approx(0.9f * 0.0f + 0.1f * 2.0f));
    REQUIRE(rm[1] == Approx(0.1f * 3.0f));
    REQUIRE(rv[0] == Approx(0.9f * 1.0f + 0.1f * 2.0f));
    REQUIRE(rv[1] == Approx(0.9f * 1.0f + 0.1f * 2.0f));

    // eval mode uses running statistics and leaves them untouched
    Tensor<float> rm2 = rm, rv2 = rv;
    Var ye = ops::batch_norm1d(t, x, gamma, beta, rm2, rv2, 0.1, 1e-5, false);
    REQUIRE(rm2[0] == rm[0]);
    REQUIRE(rv2[1] == rv[1]);
    const float want = (1.0f - rm[0]) / std::sqrt(rv[0] + 1e-5f);
    REQUIRE(t.val(ye).at(0, 0) == Approx(want).margin(1e-5));
}

TEST_CASE("embedding looks up rows and freezes the padding row") {
    Tape<double> t;
    Var table = leafv(t, {1, 2, 3, 4, 0, 0}, {3, 2});
    Var y = ops::embedding(t, table, {1, 2, 0, 2}, 2);
    REQUIRE(t.val(y).shape() == Shape{4, 2});
    REQUIRE(t.val(y).at(0, 0) == Approx(3.0));
    REQUIRE(t.val(y).at(1, 0) == Approx(0.0));
    REQUIRE(t.val(y).at(2, 1) == Approx(2.0));
    t.backward(ops::sum_all(t, y));
    const Tensor<double>& g = t.grad(table);
    REQUIRE(g.at(0, 0) == Approx(1.0));  // id 0 used once
    REQUIRE(g.at(1, 0) == Approx(1.0));  // id 1 used once
    REQUIRE(g.at(2, 0) == 0.0);          // padding row frozen
    REQUIRE(g.at(2, 1) == 0.0);
    REQUIRE_THROWS_AS(ops::embedding(t, table, {5}), std::invalid_argument);
}

TEST_CASE("causal attention at position zero returns v0 exactly") {
    Tape<double> t;
    Rng rng(2);
    Tensor<double> q({4, 6}), k({4, 6}), v({4, 6});
    for (std::int64_t i = 0; i < q.numel(); ++i) {
        q[i] = rng.normal();
        k[i] = rng.normal();
        v[i] = rng.normal();
    }
    Var y = ops::attention(t, t.leaf(q, false), t.leaf(k, false), t.leaf(v, false), 2, ops::AttnMask::causal, 0,
                           0.0, false, nullptr);
    for (std::int64_t j = 0; j < 6; ++j) {
        REQUIRE(t.val(y).at(0, j) == Approx(v.at(0, j)).margin(1e-12));
    }
}

TEST_CASE("block_causal attention stays inside its block") {
    // two blocks of 2; make keys in the other block enormous so any leak
    // would dominate the output
    Tape<double> t;
    Tensor<double> q({4, 2}, 1.0), k({4, 2}), v({4, 2});
    k.at(0, 0) = 100.0;
    k.at(1, 0) = 100.0;
    v.at(0, 0) = 999.0;
    v.at(1, 0) = 999.0;
    v.at(2, 0) = 1.0;
    v.at(3, 0) = 2.0;
    Var y = ops::attention(t, t.leaf(q, false), t.leaf(k, false), t.leaf(v, false), 1,
                           ops::AttnMask::block_causal, 2, 0.0, false, nullptr);
    REQUIRE(t.val(y).at(2, 0) == Approx(1.0).margin(1e-9));
    REQUIRE(t.val(y).at(3, 0) > 1.0);
    REQUIRE(t.val(y).at(3, 0) < 2.0 + 1e-9);
}

TEST_CASE("stop_gradient blocks flow exactly") {
    Tape<double> t;
    Var x = leafv(t, {2.0, -3.0}, {2});
    Var y = ops::mul(t, x, ops::stop_gradient(t, x));  // x * sg(x)
    t.backward(ops::sum_all(t, y));
    // d/dx of x*sg(x) is sg(x), not 2x
    REQUIRE(t.grad(x)[0] == Approx(2.0));
    REQUIRE(t.grad(x)[1] == Approx(-3.0));
}

TEST_CASE("straight_through substitutes the value and forwards the gradient") {
    Tape<double> t;
    Var z = leafv(t, {1.0, 2.0}, {2});
    Var zq = ops::straight_through(t, z, Tensor<double>::from({10.0, 20.0}, {2}));
    REQUIRE(t.val(zq)[0] == 10.0);
    Var w = t.constant(Tensor<double>::from({3.0, 5.0}, {2}));
    t.backward(ops::sum_all(t, ops::mul(t, zq, w)));
    REQUIRE(t.grad(z)[0] == Approx(3.0));
    REQUIRE(t.grad(z)[1] == Approx(5.0));
}

TEST_CASE("mask_column pins logits to -inf with zero gradient") {
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3, 4, 5, 6}, {2, 3});
    Var y = ops::mask_column(t, x, 2);
    REQUIRE(t.val(y).at(0, 2) == -std::numeric_limits<double>::infinity());
    REQUIRE(t.val(y).at(1, 2) == -std::numeric_limits<double>::infinity());
    REQUIRE(t.val(y).at(0, 0) == 1.0);
    Var p = ops::softmax(t, y);
    REQUIRE(t.val(p).at(0, 2) == 0.0);
    REQUIRE(t.val(p).at(1, 2) == 0.0);
    t.backward(ops::sum_all(t, ops::gather_rows(t, p, {0, 1})));
    REQUIRE(t.grad(x).at(0, 2) == 0.0);
}

TEST_CASE("dropout eval mode is the identity without consuming rng") {
    Tape<float> t;
    Var x = leafv<float>(t, {1, 2, 3}, {3});
    Var y = ops::dropout(t, x, 0.5, false, nullptr);
    REQUIRE(y.id == x.id);
}

TEST_CASE("avg_pool_rows means consecutive rows") {
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3, 4, 5, 6, 7, 8}, {4, 2});
    Var y = ops::avg_pool_rows(t, x, 2, 2);
    REQUIRE(t.val(y).shape() == Shape{2, 2});
    REQUIRE(t.val(y).at(0, 0) == Approx(2.0));
    REQUIRE(t.val(y).at(0, 1) == Approx(3.0));
    REQUIRE(t.val(y).at(1, 0) == Approx(6.0));
}

TEST_CASE("shifted_block_cumsum produces shifted prefix sums per block") {
    Tape<double> t;
    Var x = leafv(t, {1, 2, 3, 10, 20, 30}, {6, 1});
    Var y = ops::shifted_block_cumsum(t, x, 3);
    const Tensor<double>& yv = t.val(y);
    REQUIRE(yv[0] == 0.0);
    REQUIRE(yv[1] == 1.0);
    REQUIRE(yv[2] == 3.0);
    REQUIRE(yv[3] == 0.0);
    REQUIRE(yv[4] == 10.0);
    REQUIRE(yv[5] == 30.0);
}

TEST_CASE("expand_rows_strided scatters h into block heads") {
    Tape<double> t;
    Var h = leafv(t, {5, 6}, {2, 1});
    Var y = ops::expand_rows_strided(t, h, 3);
    const Tensor<double>& yv = t.val(y);
    REQUIRE(yv[0] == 5.0);
    REQUIRE(yv[1] == 0.0);
    REQUIRE(yv[2] == 0.0);
    REQUIRE(yv[3] == 6.0);
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> t;
    Var x = leafv(t, {1, 2}, {2});
    REQUIRE_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("concat slice transpose round trips") {
    Tape<double> t;
    Var a = leafv(t, {1, 2, 3, 4}, {2, 2});
    Var b = leafv(t, {5, 6}, {1, 2});
    Var c = ops::concat(t, a, b, 0);
    REQUIRE(t.val(c).shape() == Shape{3, 2});
    Var s = ops::slice_rows(t, c, 2, 1);
    REQUIRE(t.val(s)[0] == 5.0);
    Var tr = ops::transpose(t, a);
    REQUIRE(t.val(tr).at(0, 1) == 3.0);
    Var cc = ops::concat(t, a, tr, 1);
    REQUIRE(t.val(cc).shape() == Shape{2, 4});
    REQUIRE(t.val(cc).at(0, 2) == 1.0);
    REQUIRE(t.val(cc).at(0, 3) == 3.0);
}
