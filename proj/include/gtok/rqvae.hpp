#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gtok/config.hpp"
#include "gtok/motion.hpp"
#include "gtok/nn.hpp"
#include "gtok/serialize.hpp"

namespace gtok {

/// Shared residual codebook. Row N is the padding code: all zeros, frozen,
/// never selectable. EMA accumulators keep the invariant
/// e_i = sum_i / (count_i + eps) after every update.
template <typename T>
struct Codebook {
    int emb = -1, count = -1, sum = -1;
    std::int64_t n = 0, dim = 0;
    double eps = 1e-5;

    Codebook() = default;
    Codebook(ParameterSet<T>& ps, std::int64_t n_, std::int64_t dim_, Rng& rng) : n(n_), dim(dim_) {
        Tensor<T> e = nn::normal_init<T>(rng, {n + 1, dim}, 0.02);
        Tensor<T> c({n}, T(1));
        Tensor<T> s({n, dim});
        for (std::int64_t j = 0; j < dim; ++j) {
            e.at(n, j) = T(0);
        }
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = 0; j < dim; ++j) {
                s.at(i, j) = e.at(i, j) * static_cast<T>(1.0 + eps);
            }
        }
        emb = ps.add("codebook.emb", std::move(e), false);
        count = ps.add("codebook.count", std::move(c), false);
        sum = ps.add("codebook.sum", std::move(s), false);
    }

    const Tensor<T>& table(const ParameterSet<T>& ps) const { return ps.value(emb); }

    std::int64_t nearest(const ParameterSet<T>& ps, const T* v) const {
        const Tensor<T>& e = ps.value(emb);
        std::int64_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < n; ++i) {
            double d = 0.0;
            const T* row = e.data() + i * dim;
            for (std::int64_t j = 0; j < dim; ++j) {
                const double diff = static_cast<double>(v[j]) - static_cast<double>(row[j]);
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    void set_code(ParameterSet<T>& ps, std::int64_t i, const T* v) {
        Tensor<T>& e = ps.value(emb);
        Tensor<T>& c = ps.value(count);
        Tensor<T>& s = ps.value(sum);
        c[i] = T(1);
        for (std::int64_t j = 0; j < dim; ++j) {
            e.at(i, j) = v[j];
            s.at(i, j) = v[j] * static_cast<T>(1.0 + eps);
        }
    }
};

/// T x D index grid plus the residual ladder r_{t,0..D} and the cumulative
/// dequantizations after each depth.
struct CodeStack {
    std::int64_t steps = 0, depth = 0;
    std::vector<std::int64_t> codes;       // [steps, depth]
    Tensor<double> residuals;              // [steps, depth+1, dim]
    Tensor<double> cumulative;             // [steps, depth, dim]

    std::int64_t code(std::int64_t t, std::int64_t d) const { return codes[t * depth + d]; }
};

template <typename T>
CodeStack rq_quantize(const ParameterSet<T>& ps, const Codebook<T>& cb, const Tensor<T>& z, std::int64_t depth) {
    detail::require(z.rank() == 2 && z.dim(1) == cb.dim, "rq_quantize: z must be [T,p]");
    detail::require(depth >= 1, "rq_quantize: depth must be >= 1");
    const std::int64_t steps = z.dim(0), p = cb.dim;
    const Tensor<T>& e = ps.value(cb.emb);
    CodeStack out;
    out.steps = steps;
    out.depth = depth;
    out.codes.assign(static_cast<std::size_t>(steps * depth), 0);
    out.residuals = Tensor<double>({steps, depth + 1, p});
    out.cumulative = Tensor<double>({steps, depth, p});
    std::vector<double> r(static_cast<std::size_t>(p));
    std::vector<T> rf(static_cast<std::size_t>(p));
    for (std::int64_t t = 0; t < steps; ++t) {
        for (std::int64_t j = 0; j < p; ++j) {
            r[j] = static_cast<double>(z.at(t, j));
            out.residuals.at(t, 0, j) = r[j];
        }
        std::vector<double> cum(static_cast<std::size_t>(p), 0.0);
        for (std::int64_t d = 0; d < depth; ++d) {
            for (std::int64_t j = 0; j < p; ++j) {
                rf[j] = static_cast<T>(r[j]);
            }
            const std::int64_t k = cb.nearest(ps, rf.data());
            out.codes[t * depth + d] = k;
            for (std::int64_t j = 0; j < p; ++j) {
                const double ev = static_cast<double>(e.at(k, j));
                r[j] -= ev;
                cum[j] += ev;
                out.residuals.at(t, d + 1, j) = r[j];
                out.cumulative.at(t, d, j) = cum[j];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> rq_dequantize(const ParameterSet<T>& ps, const Codebook<T>& cb,
                        const std::vector<std::int64_t>& codes, std::int64_t steps, std::int64_t depth) {
    detail::require(static_cast<std::int64_t>(codes.size()) == steps * depth, "rq_dequantize: code count mismatch");
    const Tensor<T>& e = ps.value(cb.emb);
    Tensor<T> z({steps, cb.dim});
    for (std::int64_t t = 0; t < steps; ++t) {
        for (std::int64_t d = 0; d < depth; ++d) {
            const std::int64_t k = codes[t * depth + d];
            detail::require(k >= 0 && k <= cb.n, "rq_dequantize: code index out of range");
            for (std::int64_t j = 0; j < cb.dim; ++j) {
                z.at(t, j) += e.at(k, j);
            }
        }
    }
    return z;
}

/// One EMA step. Assignments are (code, vector) pairs gathered over a batch;
/// every code uses the same decay so untouched codes keep their value up to
/// epsilon. Returns nothing; mutates the accumulators and the table.
template <typename T>
void ema_update(ParameterSet<T>& ps, Codebook<T>& cb, const std::vector<std::int64_t>& codes,
                const Tensor<double>& vectors, double gamma) {
    if (vectors.numel() == 0) {
        detail::require(codes.empty(), "ema_update: codes without vectors");
    } else {
        detail::require(vectors.rank() == 2 && vectors.dim(1) == cb.dim, "ema_update: vectors must be [M,p]");
        detail::require(static_cast<std::int64_t>(codes.size()) == vectors.dim(0), "ema_update: size mismatch");
    }
    const std::int64_t p = cb.dim;
    std::vector<double> n_i(static_cast<std::size_t>(cb.n), 0.0);
    std::vector<double> s_i(static_cast<std::size_t>(cb.n * p), 0.0);
    for (std::size_t a = 0; a < codes.size(); ++a) {
        const std::int64_t k = codes[a];
        detail::require(k >= 0 && k < cb.n, "ema_update: code index out of range");
        n_i[static_cast<std::size_t>(k)] += 1.0;
        for (std::int64_t j = 0; j < p; ++j) {
            s_i[static_cast<std::size_t>(k * p + j)] += vectors.at(static_cast<std::int64_t>(a), j);
        }
    }
    Tensor<T>& e = ps.value(cb.emb);
    Tensor<T>& c = ps.value(cb.count);
    Tensor<T>& s = ps.value(cb.sum);
    for (std::int64_t i = 0; i < cb.n; ++i) {
        const double cnt = gamma * static_cast<double>(c[i]) + (1.0 - gamma) * n_i[static_cast<std::size_t>(i)];
        c[i] = static_cast<T>(cnt);
        for (std::int64_t j = 0; j < p; ++j) {
            const double sv =
                gamma * static_cast<double>(s.at(i, j)) + (1.0 - gamma) * s_i[static_cast<std::size_t>(i * p + j)];
            s.at(i, j) = static_cast<T>(sv);
            e.at(i, j) = static_cast<T>(sv / (cnt + cb.eps));
        }
    }
}

/// Codes whose usage over the reset window fell below min_usage are thrown
/// away and re-seeded from random latents of the current batch.
template <typename T>
std::int64_t reset_dead_codes(ParameterSet<T>& ps, Codebook<T>& cb, const std::vector<double>& usage,
                              const Tensor<T>& batch_latents, std::int64_t min_usage, Rng& rng) {
    detail::require(static_cast<std::int64_t>(usage.size()) == cb.n, "reset_dead_codes: usage size mismatch");
    if (batch_latents.numel() == 0) {
        return 0;
    }
    detail::require(batch_latents.rank() == 2 && batch_latents.dim(1) == cb.dim,
                    "reset_dead_codes: latents must be [M,p]");
    const std::int64_t m = batch_latents.dim(0);
    std::int64_t resets = 0;
    for (std::int64_t i = 0; i < cb.n; ++i) {
        if (usage[static_cast<std::size_t>(i)] >= static_cast<double>(min_usage)) {
            continue;
        }
        const std::int64_t pick = rng.uniform_int(m);
        cb.set_code(ps, i, batch_latents.data() + pick * cb.dim);
        ++resets;
    }
    return resets;
}

/// Encoder: conv_in, two resnet blocks per level with stride-2 downsamples
/// between levels, attention-heavy bottleneck, then a projection to p.
template <typename T>
struct VAEEncoder {
    nn::Conv1d<T> conv_in;
    std::vector<nn::ResnetBlock<T>> level_res;
    std::vector<nn::Conv1d<T>> downs;
    nn::ConvAttnBlock<T> attn0, attn1, attn2;
    nn::ResnetBlock<T> mid_res0, mid_res1;
    nn::GroupNorm<T> norm_out;
    nn::Conv1d<T> conv_out;

    VAEEncoder() = default;
    VAEEncoder(ParameterSet<T>& ps, const std::string& pre, std::int64_t pose_dims, std::int64_t latent_dim,
               const std::vector<std::int64_t>& widths, Rng& rng) {
        const std::int64_t top = widths.back();
        conv_in = nn::Conv1d<T>(ps, pre + ".conv_in", pose_dims, widths[0], 3, rng, ops::ConvSpec{1, 1, 1, 1});
        for (std::size_t l = 0; l < widths.size(); ++l) {
            const std::int64_t prev = l == 0 ? widths[0] : widths[l - 1];
            level_res.emplace_back(ps, pre + ".res" + std::to_string(2 * l), prev, widths[l], rng);
            level_res.emplace_back(ps, pre + ".res" + std::to_string(2 * l + 1), widths[l], widths[l], rng);
            if (l + 1 < widths.size()) {
                downs.emplace_back(ps, pre + ".down" + std::to_string(l), widths[l], widths[l], 3, rng,
                                   ops::ConvSpec{2, 1, 1, 1});
            }
        }
        attn0 = nn::ConvAttnBlock<T>(ps, pre + ".attn0", top, rng);
        attn1 = nn::ConvAttnBlock<T>(ps, pre + ".attn1", top, rng);
        mid_res0 = nn::ResnetBlock<T>(ps, pre + ".mid_res0", top, top, rng);
        attn2 = nn::ConvAttnBlock<T>(ps, pre + ".attn2", top, rng);
        mid_res1 = nn::ResnetBlock<T>(ps, pre + ".mid_res1", top, top, rng);
        norm_out = nn::GroupNorm<T>(ps, pre + ".norm_out", top);
        conv_out = nn::Conv1d<T>(ps, pre + ".conv_out", top, latent_dim, 3, rng, ops::ConvSpec{1, 1, 1, 1});
    }

    // x [P,F] -> [p, F/s]
    Var operator()(Ctx<T>& c, Var x) const {
        Var h = conv_in(c, x);
        std::size_t r = 0;
        for (std::size_t l = 0; l <= downs.size(); ++l) {
            h = level_res[r++](c, h);
            h = level_res[r++](c, h);
            if (l < downs.size()) {
                h = downs[l](c, h);
            }
        }
        h = attn0(c, h);
        h = attn1(c, h);
        h = mid_res0(c, h);
        h = attn2(c, h);
        h = mid_res1(c, h);
        h = ops::relu(c.tape, norm_out(c, h));
        return conv_out(c, h);
    }
};

/// Decoder mirror: projection from p, attention bottleneck, then per-level
/// resnet stacks with transposed-conv upsampling back to F frames.
template <typename T>
struct VAEDecoder {
    nn::Conv1d<T> conv_in;
    nn::ResnetBlock<T> mid_res0, mid_res1;
    nn::ConvAttnBlock<T> attn0, attn1, attn2;
    std::vector<nn::ResnetBlock<T>> level_res;
    std::vector<nn::ConvTranspose1d<T>> ups;
    nn::GroupNorm<T> norm_out;
    nn::Conv1d<T> conv_out;

    VAEDecoder() = default;
    VAEDecoder(ParameterSet<T>& ps, const std::string& pre, std::int64_t pose_dims, std::int64_t latent_dim,
               const std::vector<std::int64_t>& widths, Rng& rng) {
        const std::int64_t top = widths.back();
        conv_in = nn::Conv1d<T>(ps, pre + ".conv_in", latent_dim, top, 3, rng, ops::ConvSpec{1, 1, 1, 1});
        mid_res0 = nn::ResnetBlock<T>(ps, pre + ".mid_res0", top, top, rng);
        attn0 = nn::ConvAttnBlock<T>(ps, pre + ".attn0", top, rng);
        mid_res1 = nn::ResnetBlock<T>(ps, pre + ".mid_res1", top, top, rng);
        attn1 = nn::ConvAttnBlock<T>(ps, pre + ".attn1", top, rng);
        attn2 = nn::ConvAttnBlock<T>(ps, pre + ".attn2", top, rng);
        for (std::size_t l = widths.size(); l-- > 0;) {
            const std::int64_t prev = l + 1 < widths.size() ? widths[l + 1] : widths[l];
            level_res.emplace_back(ps, pre + ".res" + std::to_string(2 * (widths.size() - 1 - l)), prev, widths[l],
                                   rng);
            level_res.emplace_back(ps, pre + ".res" + std::to_string(2 * (widths.size() - 1 - l) + 1), widths[l],
                                   widths[l], rng);
            if (l > 0) {
                ups.emplace_back(ps, pre + ".up" + std::to_string(widths.size() - 1 - l), widths[l], widths[l], 4,
                                 2, 1, rng);
            }
        }
        norm_out = nn::GroupNorm<T>(ps, pre + ".norm_out", widths[0]);
        conv_out = nn::Conv1d<T>(ps, pre + ".conv_out", widths[0], pose_dims, 3, rng, ops::ConvSpec{1, 1, 1, 1});
    }

    // z [p,T] -> [P, T*s]
    Var operator()(Ctx<T>& c, Var z) const {
        Var h = conv_in(c, z);
        h = mid_res0(c, h);
        h = attn0(c, h);
        h = mid_res1(c, h);
        h = attn1(c, h);
        h = attn2(c, h);
        std::size_t r = 0;
        for (std::size_t l = 0; l < level_res.size() / 2; ++l) {
            if (l > 0) {
                h = ups[l - 1](c, h);
            }
            h = level_res[r++](c, h);
            h = level_res[r++](c, h);
        }
        h = ops::relu(c.tape, norm_out(c, h));
        return conv_out(c, h);
    }
};

struct VAELoss {
    Var total;
    Var norm_mse;
    Var commit;
    double l1 = 0.0;
};

template <typename T>
struct RQVAE {
    RunConfig cfg;
    ParameterSet<T> params;
    VAEEncoder<T> encoder;
    VAEDecoder<T> decoder;
    Codebook<T> codebook;
    DatasetStats stats;
    int stats_mean = -1, stats_var = -1;

    static std::vector<std::int64_t> level_widths(const RunConfig& cfg) {
        detail::require(cfg.reduction == 2 || cfg.reduction == 4, "reduction must be 2 or 4");
        std::vector<std::int64_t> w{64, 128};
        if (cfg.reduction == 4) {
            w.push_back(256);
        }
        return w;
    }

    RQVAE(const RunConfig& cfg_, const DatasetStats& stats_, std::uint64_t seed) : cfg(cfg_), stats(stats_) {
        Rng rng = substream(seed, "rqvae.init", 0);
        const auto widths = level_widths(cfg);
        encoder = VAEEncoder<T>(params, "enc", skel::kPoseDims, cfg.latent_dim, widths, rng);
        decoder = VAEDecoder<T>(params, "dec", skel::kPoseDims, cfg.latent_dim, widths, rng);
        codebook = Codebook<T>(params, cfg.codebook_size, cfg.latent_dim, rng);
        Tensor<T> mean({skel::kPoseDims}), var({skel::kPoseDims});
        for (std::int64_t j = 0; j < skel::kPoseDims; ++j) {
            mean[j] = static_cast<T>(stats.mean[static_cast<std::size_t>(j)]);
            var[j] = static_cast<T>(stats.var[static_cast<std::size_t>(j)]);
        }
        stats_mean = params.add("stats.mean", std::move(mean), false);
        stats_var = params.add("stats.var", std::move(var), false);
    }

    std::int64_t latent_steps(std::int64_t frames) const {
        detail::require(frames % cfg.reduction == 0, "frame count not divisible by reduction");
        return frames / cfg.reduction;
    }

    // pose [F,P] row-major on the tape -> latent z [T,p]
    Var encode(Ctx<T>& c, Var pose) const {
        latent_steps(c.tape.val(pose).dim(0));
        Var x = ops::transpose(c.tape, pose);
        Var z = encoder(c, x);
        return ops::transpose(c.tape, z);
    }

    // z [T,p] -> pose [F,P]
    Var decode(Ctx<T>& c, Var z) const {
        Var h = ops::transpose(c.tape, z);
        Var x = decoder(c, h);
        return ops::transpose(c.tape, x);
    }

    /// Variance-normalized MSE plus the per-depth commitment term. The
    /// codebook itself learns by EMA, so the quantized path enters as a
    /// constant and the encoder trains through the straight-through bridge.
    VAELoss loss(Ctx<T>& c, Var pose, Var recon, Var z, const CodeStack& stack) const {
        const Tensor<T>& var = params.value(stats_var);
        Tensor<T> inv_var({skel::kPoseDims});
        for (std::int64_t j = 0; j < skel::kPoseDims; ++j) {
            inv_var[j] = static_cast<T>(1.0 / static_cast<double>(var[j]));
        }
        Var diff = ops::sub(c.tape, pose, recon);
        Var sq = ops::mul(c.tape, diff, diff);
        Var norm_mse = ops::mean_all(c.tape, ops::scale_cols(c.tape, sq, inv_var));

        Var commit{};
        bool first = true;
        for (std::int64_t d = 0; d < stack.depth; ++d) {
            Tensor<T> cum({stack.steps, codebook.dim});
            for (std::int64_t t = 0; t < stack.steps; ++t) {
                for (std::int64_t j = 0; j < codebook.dim; ++j) {
                    cum.at(t, j) = static_cast<T>(stack.cumulative.at(t, d, j));
                }
            }
            Var cd = c.tape.constant(std::move(cum));
            Var e = ops::sub(c.tape, z, cd);
            Var term = ops::mean_all(c.tape, ops::mul(c.tape, e, e));
            commit = first ? term : ops::add(c.tape, commit, term);
            first = false;
        }
        Var total = ops::add(c.tape, norm_mse, ops::scale(c.tape, commit, static_cast<T>(cfg.beta)));

        const Tensor<T>& a = c.tape.val(pose);
        const Tensor<T>& b = c.tape.val(recon);
        double l1 = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            l1 += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        }
        l1 /= static_cast<double>(a.numel());
        return VAELoss{total, norm_mse, commit, l1};
    }

    /// Full forward pass for one clip: encode, quantize off-tape, bridge with
    /// straight-through, decode. Returns loss; fills the stack for EMA.
    VAELoss forward(Ctx<T>& c, const Tensor<T>& pose_t, CodeStack& stack_out) const {
        Var pose = c.tape.constant(pose_t);
        Var z = encode(c, pose);
        stack_out = rq_quantize(params, codebook, c.tape.val(z), cfg.depth);
        Tensor<T> zq({stack_out.steps, codebook.dim});
        for (std::int64_t t = 0; t < stack_out.steps; ++t) {
            for (std::int64_t j = 0; j < codebook.dim; ++j) {
                zq.at(t, j) = static_cast<T>(stack_out.cumulative.at(t, stack_out.depth - 1, j));
            }
        }
        Var bridge = ops::straight_through(c.tape, z, std::move(zq));
        Var recon = decode(c, bridge);
        return loss(c, pose, recon, z, stack_out);
    }

    /// Plain reconstruction without gradients. Returns [F,P].
    Tensor<T> reconstruct(const Tensor<T>& pose_t, bool quantized = true) {
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        Var pose = tape.constant(pose_t);
        Var z = encode(c, pose);
        Var latent = z;
        if (quantized) {
            CodeStack st = rq_quantize(params, codebook, tape.val(z), cfg.depth);
            Tensor<T> zq({st.steps, codebook.dim});
            for (std::int64_t t = 0; t < st.steps; ++t) {
                for (std::int64_t j = 0; j < codebook.dim; ++j) {
                    zq.at(t, j) = static_cast<T>(st.cumulative.at(t, st.depth - 1, j));
                }
            }
            latent = tape.constant(std::move(zq));
        }
        Var recon = decode(c, latent);
        return tape.val(recon);
    }

    Tensor<T> decode_latent(const Tensor<T>& z) {
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        Var recon = decode(c, tape.constant(z));
        return tape.val(recon);
    }

    CodeStack tokens(const Tensor<T>& pose_t) {
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        Var z = encode(c, tape.constant(pose_t));
        return rq_quantize(params, codebook, tape.val(z), cfg.depth);
    }
};

struct Stage1Row {
    std::int64_t epoch = 0;
    double norm_mse = 0.0;
    double l1 = 0.0;
    double usage = 0.0;
    std::int64_t resets = 0;
};

struct Stage1Result {
    std::vector<Stage1Row> curve;
    bool diverged = false;
    std::int64_t steps = 0;
};

template <typename T>
Tensor<T> clip_pose_tensor(const GestureClip& clip) {
    Tensor<T> pose({kWindowFrames, skel::kPoseDims});
    for (std::int64_t i = 0; i < pose.numel(); ++i) {
        pose[i] = static_cast<T>(clip.pose[static_cast<std::size_t>(i)]);
    }
    return pose;
}

/// Stage-1 loop. Gradient accumulation over `cfg.batch` clips per optimizer
/// step; EMA and usage bookkeeping per step; dead-code sweep every
/// `reset_period` steps. Divergence restores the last epoch snapshot.
template <typename T>
Stage1Result train_stage1(RQVAE<T>& model, const std::vector<GestureClip>& corpus, std::int64_t epochs,
                          std::uint64_t seed, std::ostream* log = nullptr) {
    detail::require(!corpus.empty(), "train_stage1: corpus is empty");
    const RunConfig& cfg = model.cfg;
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.beta1 = cfg.adam_beta1;
    ocfg.beta2 = cfg.adam_beta2;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW<T> opt(ocfg);
    ParamBinding<T> bind(model.params);

    Stage1Result res;
    std::vector<Tensor<T>> snapshot;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        snapshot.push_back(model.params.value(static_cast<int>(i)));
    }
    std::vector<double> usage(static_cast<std::size_t>(cfg.codebook_size), 0.0);
    std::vector<double> usage_epoch(static_cast<std::size_t>(cfg.codebook_size), 0.0);
    std::int64_t clip_counter = 0;
    std::vector<std::int64_t> order(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        order[i] = static_cast<std::int64_t>(i);
    }

    std::vector<Tensor<T>> grad_acc;
    std::int64_t acc_n = 0;
    std::vector<std::int64_t> ema_codes;
    std::vector<double> ema_vecs;
    std::vector<T> batch_latents;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        Rng erng = substream(seed, "stage1.epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order.begin(), order.end());
        std::fill(usage_epoch.begin(), usage_epoch.end(), 0.0);
        double sum_mse = 0.0, sum_l1 = 0.0;
        std::int64_t seen = 0, resets = 0;
        bool bad = false;

        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            Tape<T> tape;
            bind.reset();
            Rng drng = substream(seed, "stage1.drop", static_cast<std::uint64_t>(clip_counter++));
            Ctx<T> c{tape, bind, true, &drng};
            CodeStack stack;
            Tensor<T> pose = clip_pose_tensor<T>(corpus[static_cast<std::size_t>(order[oi])]);
            VAELoss L = model.forward(c, pose, stack);
            const double lv = static_cast<double>(tape.val(L.total)[0]);
            if (!std::isfinite(lv)) {
                bad = true;
                break;
            }
            sum_mse += static_cast<double>(tape.val(L.norm_mse)[0]);
            sum_l1 += L.l1;
            ++seen;
            tape.backward(L.total);
            std::vector<Tensor<T>> g = bind.collect(tape);
            if (grad_acc.empty()) {
                grad_acc = std::move(g);
            } else {
                for (std::size_t pi = 0; pi < grad_acc.size(); ++pi) {
                    for (std::int64_t k = 0; k < grad_acc[pi].numel(); ++k) {
                        grad_acc[pi][k] += g[pi][k];
                    }
                }
            }
            ++acc_n;
            // EMA feed: depth-d assignments quantize the residual entering d.
            for (std::int64_t t = 0; t < stack.steps; ++t) {
                for (std::int64_t d = 0; d < stack.depth; ++d) {
                    const std::int64_t k = stack.code(t, d);
                    ema_codes.push_back(k);
                    usage[static_cast<std::size_t>(k)] += 1.0;
                    usage_epoch[static_cast<std::size_t>(k)] += 1.0;
                    for (std::int64_t j = 0; j < model.codebook.dim; ++j) {
                        ema_vecs.push_back(stack.residuals.at(t, d, j));
                    }
                }
                for (std::int64_t j = 0; j < model.codebook.dim; ++j) {
                    batch_latents.push_back(static_cast<T>(stack.residuals.at(t, 0, j)));
                }
            }

            const bool flush = acc_n == cfg.batch || oi + 1 == order.size();
            if (!flush) {
                continue;
            }
            const T inv = static_cast<T>(1.0 / static_cast<double>(acc_n));
            for (auto& gt : grad_acc) {
                for (std::int64_t k = 0; k < gt.numel(); ++k) {
                    gt[k] *= inv;
                }
            }
            if (!opt.step(model.params, grad_acc)) {
                bad = true;
                break;
            }
            Tensor<double> vecs({static_cast<std::int64_t>(ema_codes.size()), model.codebook.dim});
            std::copy(ema_vecs.begin(), ema_vecs.end(), vecs.raw().begin());
            ema_update(model.params, model.codebook, ema_codes, vecs, cfg.ema_gamma);
            ++res.steps;
            if (res.steps % cfg.reset_period == 0) {
                Tensor<T> lat({static_cast<std::int64_t>(batch_latents.size()) / model.codebook.dim,
                               model.codebook.dim});
                std::copy(batch_latents.begin(), batch_latents.end(), lat.raw().begin());
                Rng rrng = substream(seed, "stage1.reset", static_cast<std::uint64_t>(res.steps));
                resets += reset_dead_codes(model.params, model.codebook, usage, lat, cfg.reset_min_usage, rrng);
                std::fill(usage.begin(), usage.end(), 0.0);
            }
            grad_acc.clear();
            acc_n = 0;
            ema_codes.clear();
            ema_vecs.clear();
            batch_latents.clear();
        }

        if (bad) {
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                model.params.value(static_cast<int>(i)) = snapshot[i];
            }
            res.diverged = true;
            if (log) {
                (*log) << "stage1 epoch " << epoch << " diverged; restored last checkpoint\n";
            }
            break;
        }

        double used = 0.0;
        for (double u : usage_epoch) {
            if (u > 0.0) {
                used += 1.0;
            }
        }
        Stage1Row row;
        row.epoch = epoch;
        row.norm_mse = seen > 0 ? sum_mse / static_cast<double>(seen) : 0.0;
        row.l1 = seen > 0 ? sum_l1 / static_cast<double>(seen) : 0.0;
        row.usage = used / static_cast<double>(cfg.codebook_size);
        row.resets = resets;
        res.curve.push_back(row);
        if (log) {
            (*log) << "stage1 epoch " << epoch << " norm_mse " << row.norm_mse << " l1 " << row.l1 << " usage "
                   << row.usage << " resets " << row.resets << "\n";
        }
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            snapshot[i] = model.params.value(static_cast<int>(i));
        }
        grad_acc.clear();
        acc_n = 0;
        ema_codes.clear();
        ema_vecs.clear();
        batch_latents.clear();
    }
    return res;
}

template <typename T>
Checkpoint vae_checkpoint(const RQVAE<T>& model, const std::string& config_text) {
    Checkpoint ck;
    ck.kind = CkptKind::vae;
    ck.config_text = config_text;
    append_params(ck, model.params);
    return ck;
}

template <typename T>
void vae_restore(RQVAE<T>& model, const Checkpoint& ck) {
    if (ck.kind != CkptKind::vae) {
        throw IncompatibleCheckpoint("checkpoint is not a stage-1 model");
    }
    restore_params(ck, model.params);
}

}  // namespace gtok
