#include <catch2/catch_amalgamated.hpp>

#include "gtok/ops.hpp"
#include "gtok/optim.hpp"

using namespace gtok;
using Catch::Approx;

TEST_CASE("adamw first step matches the hand-computed update") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.1;
    AdamW<double> opt(cfg);

    ParameterSet<double> ps;
    ps.add("theta", Tensor<double>::from({1.0}, {1}));
    std::vector<Tensor<double>> grads(1);
    grads[0] = Tensor<double>::from({0.5}, {1});
    REQUIRE(opt.step(ps, grads));

    // independent computation of one bias-corrected step
    const double g = 0.5;
    const double m = (1.0 - cfg.beta1) * g;
    const double v = (1.0 - cfg.beta2) * g * g;
    const double mhat = m / (1.0 - cfg.beta1);
    const double vhat = v / (1.0 - cfg.beta2);
    const double want = 1.0 - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * 1.0);
    REQUIRE(ps.value(0)[0] == Approx(want).epsilon(1e-12));
    REQUIRE(opt.steps() == 1);
}

TEST_CASE("adamw weight decay is decoupled") {
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.5;
    AdamW<double> opt(cfg);
    ParameterSet<double> ps;
    ps.add("theta", Tensor<double>::from({2.0}, {1}));
    std::vector<Tensor<double>> grads(1);
    grads[0] = Tensor<double>::from({0.0}, {1});
    REQUIRE(opt.step(ps, grads));
    // zero gradient: the only movement is -lr * wd * theta
    REQUIRE(ps.value(0)[0] == Approx(2.0 - 0.01 * 0.5 * 2.0).epsilon(1e-12));
}

TEST_CASE("adamw refuses non-finite updates without mutating state") {
    AdamW<float> opt;
    ParameterSet<float> ps;
    ps.add("theta", Tensor<float>::from({1.0f, 2.0f}, {2}));
    std::vector<Tensor<float>> grads(1);
    grads[0] = Tensor<float>::from({0.1f, std::numeric_limits<float>::quiet_NaN()}, {2});
    REQUIRE_FALSE(opt.step(ps, grads));
    REQUIRE(ps.value(0)[0] == 1.0f);
    REQUIRE(ps.value(0)[1] == 2.0f);
    REQUIRE(opt.steps() == 0);
}

TEST_CASE("adamw skips non-trainable entries") {
    AdamW<double> opt;
    ParameterSet<double> ps;
    ps.add("w", Tensor<double>::from({1.0}, {1}), true);
    ps.add("running", Tensor<double>::from({5.0}, {1}), false);
    std::vector<Tensor<double>> grads(2);
    grads[0] = Tensor<double>::from({1.0}, {1});
    grads[1] = Tensor<double>::from({1.0}, {1});
    REQUIRE(opt.step(ps, grads));
    REQUIRE(ps.value(1)[0] == 5.0);
    REQUIRE(ps.value(0)[0] < 1.0);
}

TEST_CASE("param binding reuses one leaf per parameter per step") {
    ParameterSet<double> ps;
    const int wi = ps.add("w", Tensor<double>::from({3.0}, {1}));
    ParamBinding<double> bind(ps);
    bind.reset();
    Tape<double> t;
    Var a = bind.var(t, wi);
    Var b = bind.var(t, wi);
    REQUIRE(a.id == b.id);

    // fan-out: loss = w*c1 + w*c2 so dL/dw = c1 + c2
    Var y1 = ops::mul(t, a, t.constant(Tensor<double>::from({2.0}, {1})));
    Var y2 = ops::mul(t, b, t.constant(Tensor<double>::from({7.0}, {1})));
    t.backward(ops::sum_all(t, ops::add(t, y1, y2)));
    std::vector<Tensor<double>> grads = bind.collect(t);
    REQUIRE(grads[0][0] == Approx(9.0));

    // a fresh step binds a fresh leaf
    bind.reset();
    Tape<double> t2;
    Var c = bind.var(t2, wi);
    REQUIRE(c.id == 0);
}

TEST_CASE("parameter set rejects duplicate names and finds entries") {
    ParameterSet<float> ps;
    ps.add("a.w", Tensor<float>({2, 2}));
    REQUIRE_THROWS_AS(ps.add("a.w", Tensor<float>({1})), std::invalid_argument);
    REQUIRE(ps.find("a.w") == 0);
    REQUIRE(ps.find("missing") == -1);
    REQUIRE(ps.numel() == 4);
}
