#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gtok/ops.hpp"
#include "gtok/rng.hpp"
#include "gtok/tape.hpp"
#include "gtok/tensor.hpp"

namespace gtok {

struct OpCheck {
    std::string op;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<OpCheck> ops;

    double worst() const {
        double w = 0.0;
        for (const OpCheck& c : ops) {
            w = std::max(w, c.max_rel_err);
        }
        return w;
    }

    const OpCheck* worst_op() const {
        const OpCheck* w = nullptr;
        for (const OpCheck& c : ops) {
            if (!w || c.max_rel_err > w->max_rel_err) {
                w = &c;
            }
        }
        return w;
    }

    bool ok(double tol = 1e-4) const { return worst() <= tol; }
};

namespace gradcheck_detail {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline Tensor<double> rand_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        t[i] = rng.uniform(lo, hi);
    }
    return t;
}

/// Keeps values away from the kinks of relu-like ops so central differences
/// stay two-sided on the same branch.
inline Tensor<double> rand_tensor_off_kink(Rng& rng, Shape shape) {
    Tensor<double> t = rand_tensor(rng, std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        if (std::abs(t[i]) < 0.15) {
            t[i] = t[i] < 0 ? t[i] - 0.15 : t[i] + 0.15;
        }
    }
    return t;
}

/// Checks d(sum(w*f(x)))/dx against central differences. The weight tensor
/// has the output shape; entries may be zeroed to skip non-finite outputs.
inline double check_op(const std::vector<Tensor<double>>& inputs, const Builder& build, Rng& rng,
                       const Tensor<double>* fixed_weights = nullptr, double h = 1e-5) {
    Tensor<double> weights;
    {
        Tape<double> tape;
        std::vector<Var> vars;
        for (const Tensor<double>& in : inputs) {
            vars.push_back(tape.leaf(in, false));
        }
        Var y = build(tape, vars);
        weights = fixed_weights ? *fixed_weights : rand_tensor(rng, tape.val(y).shape());
    }
    auto run = [&](const std::vector<Tensor<double>>& ins, bool with_grad,
                   std::vector<Tensor<double>>* grads) -> double {
        Tape<double> tape;
        std::vector<Var> vars;
        vars.reserve(ins.size());
        for (const Tensor<double>& in : ins) {
            vars.push_back(tape.leaf(in, with_grad));
        }
        Var y = build(tape, vars);
        Var loss = ops::sum_all(tape, ops::mul(tape, y, tape.constant(weights)));
        const double lv = tape.val(loss)[0];
        if (with_grad) {
            tape.backward(loss);
            grads->clear();
            for (Var v : vars) {
                grads->push_back(tape.grad(v));
            }
        }
        return lv;
    };

    std::vector<Tensor<double>> analytic;
    run(inputs, true, &analytic);

    double worst = 0.0;
    std::vector<Tensor<double>> work = inputs;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::int64_t j = 0; j < inputs[i].numel(); ++j) {
            const double orig = work[i][j];
            work[i][j] = orig + h;
            const double fp = run(work, false, nullptr);
            work[i][j] = orig - h;
            const double fm = run(work, false, nullptr);
            work[i][j] = orig;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[i][j];
            const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-2});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace gradcheck_detail

/// Finite-difference verification of the whole op suite in double precision.
/// Central differences with step h = 1e-5; every analytic gradient must agree
/// to a relative error of 1e-4 or better.
inline GradCheckReport gradient_check(std::uint64_t seed) {
    using namespace gradcheck_detail;
    Rng rng(derive_seed(seed, "gradcheck"));
    GradCheckReport report;
    auto add = [&](const std::string& name, const std::vector<Tensor<double>>& inputs, const Builder& build,
                   const Tensor<double>* wfix = nullptr) {
        report.ops.push_back(OpCheck{name, check_op(inputs, build, rng, wfix)});
    };

    add("add", {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::add(t, v[0], v[1]); });
    add("sub", {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::sub(t, v[0], v[1]); });
    add("mul", {rand_tensor(rng, {3, 4}), rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::mul(t, v[0], v[1]); });
    add("scale", {rand_tensor(rng, {5})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::scale(t, v[0], -1.7); });
    {
        Tensor<double> w = rand_tensor(rng, {4});
        add("scale_cols", {rand_tensor(rng, {3, 4})},
            [w](Tape<double>& t, const std::vector<Var>& v) { return ops::scale_cols(t, v[0], w); });
    }
    add("relu", {rand_tensor_off_kink(rng, {4, 5})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::relu(t, v[0]); });
    add("leaky_relu", {rand_tensor_off_kink(rng, {4, 5})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::leaky_relu(t, v[0], 0.3); });
    add("matmul", {rand_tensor(rng, {3, 4}), rand_tensor(rng, {4, 5})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::matmul(t, v[0], v[1]); });
    add("bias_add", {rand_tensor(rng, {3, 4}), rand_tensor(rng, {4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::bias_add(t, v[0], v[1]); });
    add("sum", {rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::sum_all(t, v[0]); });
    add("mean", {rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::mean_all(t, v[0]); });

    add("conv1d", {rand_tensor(rng, {3, 11}), rand_tensor(rng, {4, 3, 3}), rand_tensor(rng, {4})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::conv1d(t, v[0], v[1], v[2], ops::ConvSpec{1, 1, 1, 1});
        });
    add("conv1d_strided", {rand_tensor(rng, {2, 20}), rand_tensor(rng, {3, 2, 5}), rand_tensor(rng, {3})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::conv1d(t, v[0], v[1], v[2], ops::ConvSpec{4, 3, 0, 1});
        });
    add("conv1d_dilated", {rand_tensor(rng, {2, 12}), rand_tensor(rng, {2, 2, 2}), Tensor<double>({2})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::conv1d(t, v[0], v[1], v[2], ops::ConvSpec{1, 4, 0, 4});
        });
    add("conv1d_transpose", {rand_tensor(rng, {3, 6}), rand_tensor(rng, {3, 2, 4}), rand_tensor(rng, {2})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::conv1d_transpose(t, v[0], v[1], v[2], 2, 1); });
    add("avg_pool_rows", {rand_tensor(rng, {12, 3})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::avg_pool_rows(t, v[0], 4, 4); });

    add("layer_norm", {rand_tensor(rng, {4, 6}), rand_tensor(rng, {6}, 0.5, 1.5), rand_tensor(rng, {6})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::layer_norm(t, v[0], v[1], v[2]); });
    add("group_norm", {rand_tensor(rng, {8, 5}), rand_tensor(rng, {8}, 0.5, 1.5), rand_tensor(rng, {8})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::group_norm(t, v[0], 4, v[1], v[2]); });
    add("batch_norm_train", {rand_tensor(rng, {3, 7}), rand_tensor(rng, {3}, 0.5, 1.5), rand_tensor(rng, {3})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            Tensor<double> rm({3});
            Tensor<double> rv({3}, 1.0);
            return ops::batch_norm1d(t, v[0], v[1], v[2], rm, rv, 0.1, 1e-5, true);
        });
    add("batch_norm_eval", {rand_tensor(rng, {3, 7}), rand_tensor(rng, {3}, 0.5, 1.5), rand_tensor(rng, {3})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            Tensor<double> rm({3}, 0.2);
            Tensor<double> rv({3}, 1.3);
            return ops::batch_norm1d(t, v[0], v[1], v[2], rm, rv, 0.1, 1e-5, false);
        });

    add("softmax", {rand_tensor(rng, {3, 6})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::softmax(t, v[0]); });
    add("log_softmax", {rand_tensor(rng, {3, 6})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::log_softmax(t, v[0]); });

    {
        std::vector<std::int64_t> ids = {2, 0, 3, 2, 1};
        add("embedding", {rand_tensor(rng, {4, 5})},
            [ids](Tape<double>& t, const std::vector<Var>& v) { return ops::embedding(t, v[0], ids); });
    }
    {
        std::vector<std::int64_t> ids = {1, 3, 0};
        add("gather_rows", {rand_tensor(rng, {3, 4})},
            [ids](Tape<double>& t, const std::vector<Var>& v) { return ops::gather_rows(t, v[0], ids); });
    }

    add("attention", {rand_tensor(rng, {5, 6}), rand_tensor(rng, {5, 6}), rand_tensor(rng, {5, 6})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::attention(t, v[0], v[1], v[2], 2, ops::AttnMask::none, 0, 0.0, false, nullptr);
        });
    add("attention_causal", {rand_tensor(rng, {5, 6}), rand_tensor(rng, {5, 6}), rand_tensor(rng, {5, 6})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::attention(t, v[0], v[1], v[2], 3, ops::AttnMask::causal, 0, 0.0, false, nullptr);
        });
    add("attention_block", {rand_tensor(rng, {6, 4}), rand_tensor(rng, {6, 4}), rand_tensor(rng, {6, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) {
            return ops::attention(t, v[0], v[1], v[2], 2, ops::AttnMask::block_causal, 3, 0.0, false, nullptr);
        });

    add("concat_rows", {rand_tensor(rng, {2, 3}), rand_tensor(rng, {4, 3})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::concat(t, v[0], v[1], 0); });
    add("concat_cols", {rand_tensor(rng, {3, 2}), rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::concat(t, v[0], v[1], 1); });
    add("transpose", {rand_tensor(rng, {3, 5})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::transpose(t, v[0]); });
    add("slice_rows", {rand_tensor(rng, {6, 3})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::slice_rows(t, v[0], 2, 3); });
    add("reshape", {rand_tensor(rng, {4, 6})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::reshape(t, v[0], {8, 3}); });
    add("shifted_block_cumsum", {rand_tensor(rng, {8, 3})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::shifted_block_cumsum(t, v[0], 4); });
    add("expand_rows_strided", {rand_tensor(rng, {3, 4})},
        [](Tape<double>& t, const std::vector<Var>& v) { return ops::expand_rows_strided(t, v[0], 4); });

    {
        // weights zero on the pinned column so the loss stays finite
        Tensor<double> w = rand_tensor(rng, {3, 5});
        for (std::int64_t i = 0; i < 3; ++i) {
            w.at(i, 2) = 0.0;
        }
        std::vector<Tensor<double>> ins = {rand_tensor(rng, {3, 5})};
        Tape<double> tape;
        Var x = tape.leaf(ins[0], true);
        Var y = ops::mask_column(tape, x, 2);
        Var loss = ops::sum_all(tape, ops::mul(tape, y, tape.constant(w)));
        tape.backward(loss);
        Tensor<double> ana = tape.grad(x);
        double worst = 0.0;
        const double h = 1e-5;
        for (std::int64_t j = 0; j < ins[0].numel(); ++j) {
            auto eval = [&](double delta) {
                Tensor<double> in = ins[0];
                in[j] += delta;
                Tape<double> tp;
                Var xx = tp.leaf(in, false);
                Var yy = ops::mask_column(tp, xx, 2);
                // finite part of the loss only
                double acc = 0.0;
                const Tensor<double>& yv = tp.val(yy);
                for (std::int64_t q = 0; q < yv.numel(); ++q) {
                    if (w[q] != 0.0) {
                        acc += yv[q] * w[q];
                    }
                }
                return acc;
            };
            const double num = (eval(h) - eval(-h)) / (2.0 * h);
            const double rel = std::abs(ana[j] - num) / std::max({std::abs(ana[j]), std::abs(num), 1e-2});
            worst = std::max(worst, rel);
        }
        report.ops.push_back(OpCheck{"mask_column", worst});
    }

    {
        // dropout: eval mode is the identity; train mode scales kept entries
        // by 1/(1-p) and the backward pass reuses the same mask
        Tensor<double> x = rand_tensor(rng, {6, 6});
        Tape<double> tape;
        Var xv = tape.leaf(x, true);
        Var ye = ops::dropout(tape, xv, 0.4, false, nullptr);
        double err = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            err = std::max(err, std::abs(tape.val(ye)[i] - x[i]));
        }
        Rng drng(derive_seed(seed, "gradcheck.dropout"));
        Var yt = ops::dropout(tape, xv, 0.4, true, &drng);
        Var loss = ops::sum_all(tape, yt);
        tape.backward(loss);
        const Tensor<double>& yv = tape.val(yt);
        const Tensor<double>& gx = tape.grad(xv);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double want = yv[i] == 0.0 ? 0.0 : 1.0 / 0.6;
            err = std::max(err, std::abs(gx[i] - want));
            if (yv[i] != 0.0) {
                err = std::max(err, std::abs(yv[i] - x[i] / 0.6));
            }
        }
        report.ops.push_back(OpCheck{"dropout", err});
    }

    {
        // stop_gradient blocks flow exactly; straight_through forwards it
        Tensor<double> x = rand_tensor(rng, {3, 3});
        Tape<double> tape;
        Var xv = tape.leaf(x, true);
        Var sg = ops::stop_gradient(tape, xv);
        Var y = ops::mul(tape, sg, tape.constant(rand_tensor(rng, {3, 3})));
        tape.backward(ops::sum_all(tape, y));
        double err = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            err = std::max(err, std::abs(tape.grad(xv)[i]));
        }
        Tape<double> tape2;
        Var xv2 = tape2.leaf(x, true);
        Var st = ops::straight_through(tape2, xv2, rand_tensor(rng, {3, 3}));
        Tensor<double> w = rand_tensor(rng, {3, 3});
        tape2.backward(ops::sum_all(tape2, ops::mul(tape2, st, tape2.constant(w))));
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            err = std::max(err, std::abs(tape2.grad(xv2)[i] - w[i]));
        }
        report.ops.push_back(OpCheck{"stop_gradient/straight_through", err});
    }

    return report;
}

}  // namespace gtok
