#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "gtok/rqvae.hpp"
#include "gtok/synthgest.hpp"

using namespace gtok;

namespace {

DatasetStats flat_stats(double var = 1.0) {
    DatasetStats s;
    s.mean.assign(skel::kPoseDims, 0.0);
    s.var.assign(skel::kPoseDims, var);
    return s;
}

RunConfig small_cfg() {
    RunConfig cfg;
    cfg.reduction = 2;
    cfg.codebook_size = 32;
    cfg.depth = 2;
    return cfg;
}

// 2-d toy codebook {e1=(1,0), e2=(0,1)} living in a scratch parameter set.
struct ToyBook {
    ParameterSet<double> ps;
    Codebook<double> cb;
    ToyBook() {
        Rng rng(7);
        cb = Codebook<double>(ps, 2, 2, rng);
        const double e0[2] = {1.0, 0.0};
        const double e1[2] = {0.0, 1.0};
        cb.set_code(ps, 0, e0);
        cb.set_code(ps, 1, e1);
    }
};

// Independent exhaustive search with the same tie rule, different arithmetic
// order (norm expansion) to avoid sharing code with the implementation.
template <typename T>
std::int64_t oracle_nearest(const Tensor<T>& table, std::int64_t n, const T* v, std::int64_t dim) {
    std::int64_t best = -1;
    double best_d = 0.0;
    for (std::int64_t i = n; i-- > 0;) {
        double vv = 0.0, ee = 0.0, ve = 0.0;
        for (std::int64_t j = 0; j < dim; ++j) {
            vv += double(v[j]) * double(v[j]);
            ee += double(table.at(i, j)) * double(table.at(i, j));
            ve += double(v[j]) * double(table.at(i, j));
        }
        const double d = vv + ee - 2.0 * ve;
        if (best < 0 || d < best_d || (d == best_d && i < best)) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("nearest_code hand cases and tie rule") {
    ToyBook toy;
    const double v1[2] = {0.9, 0.4};
    CHECK(toy.cb.nearest(toy.ps, v1) == 0);
    const double v2[2] = {0.0, 1.0};
    CHECK(toy.cb.nearest(toy.ps, v2) == 1);
    const double tie[2] = {0.5, 0.5};
    CHECK(toy.cb.nearest(toy.ps, tie) == 0);
}

TEST_CASE("nearest_code matches exhaustive oracle on 1000 vectors") {
    ParameterSet<float> ps;
    Rng rng(99);
    Codebook<float> cb(ps, 256, 8, rng);
    // spread the codes out so distances are nontrivial
    Tensor<float>& e = ps.value(cb.emb);
    for (std::int64_t i = 0; i < 256; ++i) {
        for (std::int64_t j = 0; j < 8; ++j) {
            e.at(i, j) = float(rng.normal());
        }
    }
    std::vector<float> v(8);
    for (int trial = 0; trial < 1000; ++trial) {
        for (auto& x : v) {
            x = float(rng.normal());
        }
        CHECK(cb.nearest(ps, v.data()) == oracle_nearest(e, 256, v.data(), 8));
    }
}

TEST_CASE("rq_quantize hand recursion") {
    ToyBook toy;
    Tensor<double> z({1, 2});
    z.at(0, 0) = 0.9;
    z.at(0, 1) = 0.4;
    CodeStack st = rq_quantize(toy.ps, toy.cb, z, 2);
    REQUIRE(st.steps == 1);
    REQUIRE(st.depth == 2);
    CHECK(st.code(0, 0) == 0);
    CHECK(st.code(0, 1) == 1);
    // zhat = e1 + e2 = (1,1)
    CHECK(st.cumulative.at(0, 1, 0) == Catch::Approx(1.0));
    CHECK(st.cumulative.at(0, 1, 1) == Catch::Approx(1.0));
    // final residual (-0.1, -0.6)
    CHECK(st.residuals.at(0, 2, 0) == Catch::Approx(-0.1));
    CHECK(st.residuals.at(0, 2, 1) == Catch::Approx(-0.6));
    // r_{t,0} = z
    CHECK(st.residuals.at(0, 0, 0) == Catch::Approx(0.9));
    // dequantize sum matches
    Tensor<double> back = rq_dequantize(toy.ps, toy.cb, st.codes, 1, 2);
    CHECK(back.at(0, 0) == Catch::Approx(1.0));
    CHECK(back.at(0, 1) == Catch::Approx(1.0));
}

TEST_CASE("rq depth one is plain VQ and idempotent on code vectors") {
    ParameterSet<float> ps;
    Rng rng(3);
    Codebook<float> cb(ps, 16, 4, rng);
    Tensor<float>& e = ps.value(cb.emb);
    for (std::int64_t i = 0; i < 16; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) {
            e.at(i, j) = float(rng.normal());
        }
    }
    Tensor<float> z({8, 4});
    for (auto& x : z.raw()) {
        x = float(rng.normal());
    }
    CodeStack st = rq_quantize(ps, cb, z, 1);
    for (std::int64_t t = 0; t < 8; ++t) {
        // plain VQ reference
        const std::int64_t want = oracle_nearest(e, 16, z.data() + t * 4, 4);
        CHECK(st.code(t, 0) == want);
        for (std::int64_t j = 0; j < 4; ++j) {
            CHECK(st.cumulative.at(t, 0, j) == Catch::Approx(double(e.at(want, j))));
        }
    }
    // quantizing a codebook vector returns it exactly with zero residual
    Tensor<float> zk({1, 4});
    for (std::int64_t j = 0; j < 4; ++j) {
        zk.at(0, j) = e.at(5, j);
    }
    CodeStack st2 = rq_quantize(ps, cb, zk, 1);
    CHECK(st2.code(0, 0) == 5);
    for (std::int64_t j = 0; j < 4; ++j) {
        CHECK(std::abs(st2.residuals.at(0, 1, j)) < 1e-7);
    }
}

TEST_CASE("residual identity holds on random input") {
    ParameterSet<float> ps;
    Rng rng(11);
    Codebook<float> cb(ps, 64, 6, rng);
    Tensor<float> z({16, 6});
    for (auto& x : z.raw()) {
        x = float(rng.normal());
    }
    CodeStack st = rq_quantize(ps, cb, z, 4);
    for (std::int64_t t = 0; t < 16; ++t) {
        for (std::int64_t d = 0; d < 4; ++d) {
            for (std::int64_t j = 0; j < 6; ++j) {
                const double lhs = st.residuals.at(t, d + 1, j) + st.cumulative.at(t, d, j);
                CHECK(std::abs(lhs - double(z.at(t, j))) < 1e-5);
            }
        }
    }
}

TEST_CASE("rq_dequantize padding and range") {
    ToyBook toy;
    std::vector<std::int64_t> pad{2, 2};  // padding index = n = 2
    Tensor<double> zp = rq_dequantize(toy.ps, toy.cb, pad, 1, 2);
    CHECK(zp.at(0, 0) == 0.0);
    CHECK(zp.at(0, 1) == 0.0);
    std::vector<std::int64_t> bad{3, 0};
    CHECK_THROWS_AS(rq_dequantize(toy.ps, toy.cb, bad, 1, 2), std::invalid_argument);
}

TEST_CASE("ema_update worked example and invariants") {
    ToyBook toy;
    // code 0: count 1, sum (1,0); receives one vector (0,0) at gamma 0.5
    std::vector<std::int64_t> codes{0};
    Tensor<double> vecs({1, 2});
    ema_update(toy.ps, toy.cb, codes, vecs, 0.5);
    const Tensor<double>& e = toy.ps.value(toy.cb.emb);
    CHECK(std::abs(e.at(0, 0) - 0.5) < 1e-4);
    CHECK(std::abs(e.at(0, 1) - 0.0) < 1e-6);
    // unassigned code 1 unchanged up to epsilon
    CHECK(std::abs(e.at(1, 1) - 1.0) < 1e-4);
    // invariant e = sum/(count+eps)
    const Tensor<double>& c = toy.ps.value(toy.cb.count);
    const Tensor<double>& s = toy.ps.value(toy.cb.sum);
    for (std::int64_t i = 0; i < 2; ++i) {
        for (std::int64_t j = 0; j < 2; ++j) {
            CHECK(e.at(i, j) == Catch::Approx(s.at(i, j) / (c[i] + toy.cb.eps)).margin(1e-12));
        }
    }
}

TEST_CASE("ema_update gamma zero gives the batch mean") {
    ToyBook toy;
    std::vector<std::int64_t> codes{0, 0};
    Tensor<double> vecs({2, 2});
    vecs.at(0, 0) = 2.0;
    vecs.at(1, 0) = 4.0;
    ema_update(toy.ps, toy.cb, codes, vecs, 0.0);
    const Tensor<double>& e = toy.ps.value(toy.cb.emb);
    CHECK(std::abs(e.at(0, 0) - 3.0) < 1e-3);
    CHECK(std::abs(e.at(0, 1) - 0.0) < 1e-6);
}

TEST_CASE("ema_update with no assignments keeps codes") {
    ToyBook toy;
    std::vector<std::int64_t> codes;
    Tensor<double> vecs;
    ema_update(toy.ps, toy.cb, codes, vecs, 0.99);
    const Tensor<double>& e = toy.ps.value(toy.cb.emb);
    CHECK(std::abs(e.at(0, 0) - 1.0) < 1e-4);
    CHECK(std::abs(e.at(1, 1) - 1.0) < 1e-4);
}

TEST_CASE("reset_dead_codes") {
    ToyBook toy;
    Tensor<double> latents({3, 2});
    latents.at(0, 0) = 7.0;
    latents.at(1, 0) = 8.0;
    latents.at(2, 0) = 9.0;
    std::vector<double> alive{5.0, 5.0};
    Rng r1(123);
    CHECK(reset_dead_codes(toy.ps, toy.cb, alive, latents, 1, r1) == 0);
    std::vector<double> dead{5.0, 0.0};
    Rng r2(123);
    const std::int64_t n = reset_dead_codes(toy.ps, toy.cb, dead, latents, 1, r2);
    CHECK(n == 1);
    const Tensor<double>& e = toy.ps.value(toy.cb.emb);
    const double got = e.at(1, 0);
    CHECK((got == 7.0 || got == 8.0 || got == 9.0));
    CHECK(e.at(1, 1) == 0.0);
    // deterministic for a fixed rng seed
    ToyBook toy2;
    Rng r3(123);
    reset_dead_codes(toy2.ps, toy2.cb, dead, latents, 1, r3);
    CHECK(toy2.ps.value(toy2.cb.emb).at(1, 0) == got);
    // empty batch is a no-op
    Tensor<double> none;
    ToyBook toy3;
    Rng r4(5);
    CHECK(reset_dead_codes(toy3.ps, toy3.cb, dead, none, 1, r4) == 0);
}

TEST_CASE("encoder and decoder shapes") {
    RunConfig cfg;
    cfg.reduction = 4;
    RQVAE<float> m4(cfg, flat_stats(), 1);
    Tensor<float> pose({kWindowFrames, skel::kPoseDims});
    {
        Tape<float> tape;
        ParamBinding<float> bind(m4.params);
        Ctx<float> c{tape, bind, false, nullptr};
        Var z = m4.encode(c, tape.constant(pose));
        REQUIRE(tape.val(z).shape() == Shape{16, 64});
        CHECK(tape.val(z).all_finite());
        Var back = m4.decode(c, z);
        REQUIRE(tape.val(back).shape() == Shape{64, 126});
        CHECK(tape.val(back).all_finite());
    }
    cfg.reduction = 2;
    RQVAE<float> m2(cfg, flat_stats(), 1);
    {
        Tape<float> tape;
        ParamBinding<float> bind(m2.params);
        Ctx<float> c{tape, bind, false, nullptr};
        Var z = m2.encode(c, tape.constant(pose));
        REQUIRE(tape.val(z).shape() == Shape{32, 64});
    }
    // frame count not divisible by the reduction is rejected
    cfg.reduction = 4;
    RQVAE<float> m4b(cfg, flat_stats(), 1);
    Tensor<float> odd({62, skel::kPoseDims});
    Tape<float> tape;
    ParamBinding<float> bind(m4b.params);
    Ctx<float> c{tape, bind, false, nullptr};
    CHECK_THROWS_AS(m4b.encode(c, tape.constant(odd)), std::invalid_argument);
}

TEST_CASE("vae_loss components") {
    RunConfig cfg = small_cfg();
    RQVAE<float> model(cfg, flat_stats(4.0), 2);
    Tape<float> tape;
    ParamBinding<float> bind(model.params);
    Ctx<float> c{tape, bind, false, nullptr};

    Tensor<float> x({kWindowFrames, skel::kPoseDims});
    Tensor<float> xr({kWindowFrames, skel::kPoseDims}, 1.0f);
    Var pose = tape.constant(x);
    Var recon = tape.constant(xr);

    // stack whose cumulative quantization equals z exactly -> zero commitment
    const std::int64_t T = 4;
    Tensor<float> zt({T, cfg.latent_dim});
    Rng rng(4);
    for (auto& v : zt.raw()) {
        v = float(rng.normal());
    }
    CodeStack st;
    st.steps = T;
    st.depth = 1;
    st.codes.assign(T, 0);
    st.residuals = Tensor<double>({T, 2, cfg.latent_dim});
    st.cumulative = Tensor<double>({T, 1, cfg.latent_dim});
    for (std::int64_t t = 0; t < T; ++t) {
        for (std::int64_t j = 0; j < cfg.latent_dim; ++j) {
            st.cumulative.at(t, 0, j) = double(zt.at(t, j));
        }
    }
    Var z = tape.constant(zt);

    VAELoss L = model.loss(c, pose, recon, z, st);
    // raw MSE 1 with uniform variance 4 -> 0.25; commitment exactly zero
    CHECK(tape.val(L.norm_mse)[0] == Catch::Approx(0.25).epsilon(1e-6));
    CHECK(tape.val(L.commit)[0] == Catch::Approx(0.0).margin(1e-12));
    CHECK(tape.val(L.total)[0] == Catch::Approx(0.25).epsilon(1e-6));
    CHECK(L.l1 == Catch::Approx(1.0).epsilon(1e-6));

    // identical pose and latent -> zero loss
    VAELoss Z = model.loss(c, pose, pose, z, st);
    CHECK(tape.val(Z.total)[0] == Catch::Approx(0.0).margin(1e-12));

    // doubling beta doubles only the commitment part
    Tensor<float> z2 = zt;
    for (auto& v : z2.raw()) {
        v += 0.5f;
    }
    Var zv2 = tape.constant(z2);
    VAELoss A = model.loss(c, pose, recon, zv2, st);
    RunConfig cfg2 = cfg;
    cfg2.beta = cfg.beta * 2.0;
    RQVAE<float> model2(cfg2, flat_stats(4.0), 2);
    Tape<float> tape2;
    ParamBinding<float> bind2(model2.params);
    Ctx<float> c2{tape2, bind2, false, nullptr};
    VAELoss B = model2.loss(c2, tape2.constant(x), tape2.constant(xr), tape2.constant(z2), st);
    const double commit_a = tape.val(A.total)[0] - tape.val(A.norm_mse)[0];
    const double commit_b = tape2.val(B.total)[0] - tape2.val(B.norm_mse)[0];
    CHECK(commit_b == Catch::Approx(2.0 * commit_a).epsilon(1e-5));
}

TEST_CASE("straight-through gradient at the bottleneck") {
    RunConfig cfg = small_cfg();
    RQVAE<double> model(cfg, flat_stats(2.0), 5);
    Rng rng(17);
    Tensor<double> pose({kWindowFrames, skel::kPoseDims});
    for (auto& v : pose.raw()) {
        v = rng.normal(0.0, 0.5);
    }

    // full graph, keeping handles on z and the bridge
    Tape<double> tape;
    ParamBinding<double> bind(model.params);
    Ctx<double> c{tape, bind, false, nullptr};
    Var pv = tape.constant(pose);
    Var z = model.encode(c, pv);
    CodeStack st = rq_quantize(model.params, model.codebook, tape.val(z), cfg.depth);
    Tensor<double> zq({st.steps, cfg.latent_dim});
    for (std::int64_t t = 0; t < st.steps; ++t) {
        for (std::int64_t j = 0; j < cfg.latent_dim; ++j) {
            zq.at(t, j) = st.cumulative.at(t, st.depth - 1, j);
        }
    }
    Var bridge = ops::straight_through(tape, z, zq);
    Var recon = model.decode(c, bridge);
    VAELoss L = model.loss(c, pv, recon, z, st);
    tape.backward(L.total);
    const Tensor<double> gz = tape.grad(z);
    const Tensor<double> gb = tape.grad(bridge);
    const Tensor<double>& zval = tape.val(z);

    // analytic: dL/dz = dL/d(bridge) + beta * sum_d 2 (z - cum_d)/numel
    const double numel = double(st.steps * cfg.latent_dim);
    double worst = 0.0;
    for (std::int64_t t = 0; t < st.steps; ++t) {
        for (std::int64_t j = 0; j < cfg.latent_dim; ++j) {
            double commit = 0.0;
            for (std::int64_t d = 0; d < st.depth; ++d) {
                commit += 2.0 * (zval.at(t, j) - st.cumulative.at(t, d, j)) / numel;
            }
            const double want = gb.at(t, j) + cfg.beta * commit;
            worst = std::max(worst, std::abs(want - gz.at(t, j)));
        }
    }
    CHECK(worst < 1e-9);

    // finite differences on the decoder input confirm the bridge gradient
    const std::int64_t t0 = 3, j0 = 11;
    auto rec_loss = [&](double bump) {
        Tape<double> t2;
        ParamBinding<double> b2(model.params);
        Ctx<double> c2{t2, b2, false, nullptr};
        Tensor<double> zin = zq;
        zin.at(t0, j0) += bump;
        Var r = model.decode(c2, t2.constant(zin));
        Tensor<double> inv({skel::kPoseDims}, 0.5);  // 1/var with var=2
        Var d = ops::sub(t2, t2.constant(pose), r);
        Var sq = ops::mul(t2, d, d);
        Var m = ops::mean_all(t2, ops::scale_cols(t2, sq, inv));
        return t2.val(m)[0];
    };
    const double h = 1e-5;
    const double fd = (rec_loss(h) - rec_loss(-h)) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(gb.at(t0, j0)), 1e-2});
    CHECK(std::abs(fd - gb.at(t0, j0)) / denom < 1e-4);
}

TEST_CASE("train_stage1 runs, is deterministic, and exercises resets") {
    RunConfig cfg = small_cfg();
    cfg.batch = 4;
    cfg.reset_period = 2;
    SynthConfig sc;
    sc.min_frames = 128;
    std::vector<GestureClip> clips;
    for (int i = 0; i < 2; ++i) {
        SynthSequence seq = synth_sequence(sc, 77, std::uint64_t(i));
        auto w = extract_windows(seq.motion);
        clips.insert(clips.end(), w.begin(), w.end());
    }
    REQUIRE(clips.size() >= 8);
    clips.resize(8);
    DatasetStats stats = dataset_stats(clips);

    auto run = [&]() {
        RQVAE<float> model(cfg, stats, 42);
        std::ostringstream log;
        Stage1Result r = train_stage1(model, clips, 2, 42, &log);
        REQUIRE(!r.diverged);
        REQUIRE(r.curve.size() == 2);
        Checkpoint ck = vae_checkpoint(model, "x");
        return std::make_pair(encode_checkpoint(ck), r);
    };
    auto [bytes1, r1] = run();
    auto [bytes2, r2] = run();
    CHECK(bytes1 == bytes2);
    CHECK(r1.curve.back().norm_mse == r2.curve.back().norm_mse);
    for (const auto& row : r1.curve) {
        CHECK(std::isfinite(row.norm_mse));
        CHECK(std::isfinite(row.l1));
        CHECK(row.usage >= 0.0);
        CHECK(row.usage <= 1.0);
    }
    // loss should move downward on this tiny corpus
    CHECK(r1.curve.back().norm_mse < r1.curve.front().norm_mse * 1.5);
}

TEST_CASE("vae checkpoint round trip restores behaviour") {
    RunConfig cfg = small_cfg();
    RQVAE<float> a(cfg, flat_stats(), 9);
    Tensor<float> pose({kWindowFrames, skel::kPoseDims});
    Rng rng(1);
    for (auto& v : pose.raw()) {
        v = float(rng.normal(0.0, 0.3));
    }
    Tensor<float> ra = a.reconstruct(pose);
    Checkpoint ck = vae_checkpoint(a, "cfg");
    std::string bytes = encode_checkpoint(ck);

    RQVAE<float> b(cfg, flat_stats(), 1234);  // different init
    vae_restore(b, decode_checkpoint(bytes));
    Tensor<float> rb = b.reconstruct(pose);
    REQUIRE(ra.shape() == rb.shape());
    for (std::int64_t i = 0; i < ra.numel(); ++i) {
        REQUIRE(ra[i] == rb[i]);
    }
    // wrong kind rejected
    Checkpoint prior;
    prior.kind = CkptKind::prior;
    CHECK_THROWS_AS(vae_restore(b, prior), IncompatibleCheckpoint);
}
