#pragma once

#include <string>

#include "gtok/ops.hpp"
#include "gtok/optim.hpp"
#include "gtok/rng.hpp"

namespace gtok {

/// Everything a forward pass needs: the tape, the parameter binding for this
/// step, the train/eval switch and the rng for dropout draws.
template <typename T>
struct Ctx {
    Tape<T>& tape;
    ParamBinding<T>& bind;
    bool training = false;
    Rng* rng = nullptr;

    Var p(int idx) { return bind.var(tape, idx); }
    ParameterSet<T>& params() { return bind.params(); }
};

namespace nn {

template <typename T>
Tensor<T> normal_init(Rng& rng, Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<T>(rng.normal(0.0, stddev));
    }
    return t;
}

template <typename T>
Tensor<T> uniform_init(Rng& rng, Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    return t;
}

/// x [N,in] -> [N,out]; weights stored [in,out], init N(0, 0.02).
template <typename T>
struct Linear {
    int w = -1, b = -1;

    Linear() = default;
    Linear(ParameterSet<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
           bool bias = true) {
        w = ps.add(name + ".w", normal_init<T>(rng, {in, out}, 0.02));
        if (bias) {
            b = ps.add(name + ".b", Tensor<T>({out}));
        }
    }

    Var operator()(Ctx<T>& c, Var x) const { return ops::linear(c.tape, x, c.p(w), b >= 0 ? c.p(b) : Var{}); }
};

/// x [Cin,L] -> [Cout,Lout]; torch-style uniform init with bound 1/sqrt(fan).
template <typename T>
struct Conv1d {
    int w = -1, b = -1;
    ops::ConvSpec spec;

    Conv1d() = default;
    Conv1d(ParameterSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, std::int64_t k,
           Rng& rng, ops::ConvSpec sp = {}, bool bias = true)
        : spec(sp) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
        w = ps.add(name + ".w", uniform_init<T>(rng, {cout, cin, k}, bound));
        if (bias) {
            b = ps.add(name + ".b", uniform_init<T>(rng, {cout}, bound));
        }
    }

    Var operator()(Ctx<T>& c, Var x) const {
        return ops::conv1d(c.tape, x, c.p(w), b >= 0 ? c.p(b) : Var{}, spec);
    }
};

template <typename T>
struct ConvTranspose1d {
    int w = -1, b = -1;
    std::int64_t stride = 1, pad = 0;

    ConvTranspose1d() = default;
    ConvTranspose1d(ParameterSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout,
                    std::int64_t k, std::int64_t stride_, std::int64_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k));
        w = ps.add(name + ".w", uniform_init<T>(rng, {cin, cout, k}, bound));
        b = ps.add(name + ".b", uniform_init<T>(rng, {cout}, bound));
    }

    Var operator()(Ctx<T>& c, Var x) const {
        return ops::conv1d_transpose(c.tape, x, c.p(w), c.p(b), stride, pad);
    }
};

template <typename T>
struct GroupNorm {
    int g = -1, b = -1;
    std::int64_t groups = 32;
    double eps = 1e-6;

    GroupNorm() = default;
    GroupNorm(ParameterSet<T>& ps, const std::string& name, std::int64_t channels, std::int64_t groups_ = 32,
              double eps_ = 1e-6)
        : groups(groups_), eps(eps_) {
        g = ps.add(name + ".g", Tensor<T>({channels}, T(1)));
        b = ps.add(name + ".b", Tensor<T>({channels}));
    }

    Var operator()(Ctx<T>& c, Var x) const { return ops::group_norm(c.tape, x, groups, c.p(g), c.p(b), eps); }
};

template <typename T>
struct LayerNorm {
    int g = -1, b = -1;

    LayerNorm() = default;
    LayerNorm(ParameterSet<T>& ps, const std::string& name, std::int64_t width) {
        g = ps.add(name + ".g", Tensor<T>({width}, T(1)));
        b = ps.add(name + ".b", Tensor<T>({width}));
    }

    Var operator()(Ctx<T>& c, Var x) const { return ops::layer_norm(c.tape, x, c.p(g), c.p(b)); }
};

/// Running statistics live in the parameter set as non-trainable entries so
/// they ride along in checkpoints.
template <typename T>
struct BatchNorm1d {
    int g = -1, b = -1, rm = -1, rv = -1;
    double momentum = 0.1, eps = 1e-5;

    BatchNorm1d() = default;
    BatchNorm1d(ParameterSet<T>& ps, const std::string& name, std::int64_t channels) {
        g = ps.add(name + ".g", Tensor<T>({channels}, T(1)));
        b = ps.add(name + ".b", Tensor<T>({channels}));
        rm = ps.add(name + ".rm", Tensor<T>({channels}), false);
        rv = ps.add(name + ".rv", Tensor<T>({channels}, T(1)), false);
    }

    Var operator()(Ctx<T>& c, Var x) const {
        return ops::batch_norm1d(c.tape, x, c.p(g), c.p(b), c.params().value(rm), c.params().value(rv), momentum,
                                 eps, c.training);
    }
};

template <typename T>
struct Embedding {
    int table = -1;
    std::int64_t padding_idx = -1;

    Embedding() = default;
    Embedding(ParameterSet<T>& ps, const std::string& name, std::int64_t vocab, std::int64_t dim, Rng& rng,
              std::int64_t padding_idx_ = -1)
        : padding_idx(padding_idx_) {
        Tensor<T> t = normal_init<T>(rng, {vocab, dim}, 0.02);
        if (padding_idx >= 0) {
            for (std::int64_t j = 0; j < dim; ++j) {
                t.at(padding_idx, j) = T(0);
            }
        }
        table = ps.add(name + ".w", std::move(t));
    }

    Var operator()(Ctx<T>& c, const std::vector<std::int64_t>& ids) const {
        return ops::embedding(c.tape, c.p(table), ids, padding_idx);
    }
};

/// Pre-norm residual conv block; 1x1 shortcut when the width changes.
template <typename T>
struct ResnetBlock {
    GroupNorm<T> norm1, norm2;
    Conv1d<T> conv1, conv2, shortcut;
    bool has_shortcut = false;
    double drop = 0.0;

    ResnetBlock() = default;
    ResnetBlock(ParameterSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout, Rng& rng,
                double drop_ = 0.0)
        : drop(drop_) {
        norm1 = GroupNorm<T>(ps, name + ".norm1", cin);
        conv1 = Conv1d<T>(ps, name + ".conv1", cin, cout, 3, rng, ops::ConvSpec{1, 1, 1, 1});
        norm2 = GroupNorm<T>(ps, name + ".norm2", cout);
        conv2 = Conv1d<T>(ps, name + ".conv2", cout, cout, 3, rng, ops::ConvSpec{1, 1, 1, 1});
        if (cin != cout) {
            has_shortcut = true;
            shortcut = Conv1d<T>(ps, name + ".nin_shortcut", cin, cout, 1, rng);
        }
    }

    Var operator()(Ctx<T>& c, Var x) const {
        Var h = conv1(c, ops::relu(c.tape, norm1(c, x)));
        h = ops::relu(c.tape, norm2(c, h));
        h = ops::dropout(c.tape, h, drop, c.training, c.rng);
        h = conv2(c, h);
        Var skip = has_shortcut ? shortcut(c, x) : x;
        return ops::add(c.tape, skip, h);
    }
};

/// Single-head full attention over the time axis of a [C,L] feature map,
/// with 1x1 convs for q, k, v and the output projection.
template <typename T>
struct ConvAttnBlock {
    GroupNorm<T> norm;
    Conv1d<T> q, k, v, proj;

    ConvAttnBlock() = default;
    ConvAttnBlock(ParameterSet<T>& ps, const std::string& name, std::int64_t channels, Rng& rng) {
        norm = GroupNorm<T>(ps, name + ".norm", channels);
        q = Conv1d<T>(ps, name + ".q", channels, channels, 1, rng);
        k = Conv1d<T>(ps, name + ".k", channels, channels, 1, rng);
        v = Conv1d<T>(ps, name + ".v", channels, channels, 1, rng);
        proj = Conv1d<T>(ps, name + ".proj_out", channels, channels, 1, rng);
    }

    Var operator()(Ctx<T>& c, Var x) const {
        Var h = norm(c, x);
        Var qt = ops::transpose(c.tape, q(c, h));
        Var kt = ops::transpose(c.tape, k(c, h));
        Var vt = ops::transpose(c.tape, v(c, h));
        Var att = ops::attention(c.tape, qt, kt, vt, 1, ops::AttnMask::none, 0, 0.0, false, nullptr);
        Var out = proj(c, ops::transpose(c.tape, att));
        return ops::add(c.tape, x, out);
    }
};

/// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
template <typename T>
struct SelfAttnBlock {
    LayerNorm<T> ln1, ln2;
    Linear<T> key, query, value, proj, fc1, fc2;
    std::int64_t heads = 4;
    double attn_drop = 0.1, resid_drop = 0.1;

    SelfAttnBlock() = default;
    SelfAttnBlock(ParameterSet<T>& ps, const std::string& name, std::int64_t width, std::int64_t heads_, Rng& rng,
                  double attn_drop_ = 0.1, double resid_drop_ = 0.1)
        : heads(heads_), attn_drop(attn_drop_), resid_drop(resid_drop_) {
        ln1 = LayerNorm<T>(ps, name + ".ln1", width);
        ln2 = LayerNorm<T>(ps, name + ".ln2", width);
        key = Linear<T>(ps, name + ".attn.key", width, width, rng);
        query = Linear<T>(ps, name + ".attn.query", width, width, rng);
        value = Linear<T>(ps, name + ".attn.value", width, width, rng);
        proj = Linear<T>(ps, name + ".attn.proj", width, width, rng);
        fc1 = Linear<T>(ps, name + ".mlp.fc1", width, width * 4, rng);
        fc2 = Linear<T>(ps, name + ".mlp.fc2", width * 4, width, rng);
    }

    Var operator()(Ctx<T>& c, Var x, ops::AttnMask mask, std::int64_t block = 0) const {
        Var a = ln1(c, x);
        Var att = ops::attention(c.tape, query(c, a), key(c, a), value(c, a), heads, mask, block, attn_drop,
                                 c.training, c.rng);
        att = ops::dropout(c.tape, proj(c, att), resid_drop, c.training, c.rng);
        x = ops::add(c.tape, x, att);
        Var m = ops::relu(c.tape, fc1(c, ln2(c, x)));
        m = ops::dropout(c.tape, fc2(c, m), resid_drop, c.training, c.rng);
        return ops::add(c.tape, x, m);
    }
};

/// Dilated causal TCN block (two k=2 convs, left padding, residual).
template <typename T>
struct TemporalBlock {
    Conv1d<T> conv1, conv2, down;
    bool has_down = false;
    double drop = 0.1;

    TemporalBlock() = default;
    TemporalBlock(ParameterSet<T>& ps, const std::string& name, std::int64_t cin, std::int64_t cout,
                  std::int64_t dilation, Rng& rng, double drop_ = 0.1)
        : drop(drop_) {
        conv1 = Conv1d<T>(ps, name + ".conv1", cin, cout, 2, rng, ops::ConvSpec{1, dilation, 0, dilation});
        conv2 = Conv1d<T>(ps, name + ".conv2", cout, cout, 2, rng, ops::ConvSpec{1, dilation, 0, dilation});
        if (cin != cout) {
            has_down = true;
            down = Conv1d<T>(ps, name + ".downsample", cin, cout, 1, rng);
        }
    }

    Var operator()(Ctx<T>& c, Var x) const {
        Var h = ops::dropout(c.tape, ops::relu(c.tape, conv1(c, x)), drop, c.training, c.rng);
        h = ops::dropout(c.tape, ops::relu(c.tape, conv2(c, h)), drop, c.training, c.rng);
        Var skip = has_down ? down(c, x) : x;
        return ops::relu(c.tape, ops::add(c.tape, skip, h));
    }
};

}  // namespace nn
}  // namespace gtok
