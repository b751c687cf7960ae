#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "gtok/rotation.hpp"
#include "gtok/rqvae.hpp"

namespace gtok {

/// Four strided conv stages take a 51,200-sample window to 64 feature steps:
/// 51200 -> 13597 -> 2717 -> 452 -> 64.
template <typename T>
struct AudioEncoder {
    nn::Conv1d<T> c0, c1, c2, c3;
    nn::BatchNorm1d<T> b0, b1, b2;

    AudioEncoder() = default;
    AudioEncoder(ParameterSet<T>& ps, const std::string& pre, Rng& rng) {
        c0 = nn::Conv1d<T>(ps, pre + ".c0", 1, 16, 15, rng, ops::ConvSpec{4, 1600, 1600, 1});
        b0 = nn::BatchNorm1d<T>(ps, pre + ".b0", 16);
        c1 = nn::Conv1d<T>(ps, pre + ".c1", 16, 32, 15, rng, ops::ConvSpec{5, 0, 0, 1});
        b1 = nn::BatchNorm1d<T>(ps, pre + ".b1", 32);
        c2 = nn::Conv1d<T>(ps, pre + ".c2", 32, 64, 15, rng, ops::ConvSpec{6, 2, 2, 1});
        b2 = nn::BatchNorm1d<T>(ps, pre + ".b2", 64);
        c3 = nn::Conv1d<T>(ps, pre + ".c3", 64, 32, 15, rng, ops::ConvSpec{7, 2, 2, 1});
    }

    // waveform [1,51200] -> features [64,32]
    Var operator()(Ctx<T>& c, Var wave) const {
        detail::require(c.tape.val(wave).rank() == 2 && c.tape.val(wave).dim(0) == 1 &&
                            c.tape.val(wave).dim(1) == kWindowSamples,
                        "encode_audio: expected a [1,51200] waveform");
        Var h = ops::leaky_relu(c.tape, b0(c, c0(c, wave)), T(0.3));
        h = ops::leaky_relu(c.tape, b1(c, c1(c, h)), T(0.3));
        h = ops::leaky_relu(c.tape, b2(c, c2(c, h)), T(0.3));
        h = c3(c, h);
        return ops::transpose(c.tape, h);
    }
};

/// Word embeddings through a causal dilated TCN, then a linear head to 32
/// channels. Output step f depends only on ids at frames <= f.
template <typename T>
struct TextEncoder {
    nn::Embedding<T> emb;
    std::vector<nn::TemporalBlock<T>> blocks;
    nn::Linear<T> head;
    double drop = 0.1;

    TextEncoder() = default;
    TextEncoder(ParameterSet<T>& ps, const std::string& pre, std::int64_t vocab, Rng& rng) {
        emb = nn::Embedding<T>(ps, pre + ".emb", vocab, 300, rng, 0);
        for (int i = 0; i < 8; ++i) {
            blocks.emplace_back(ps, pre + ".tcn" + std::to_string(i), 300, 300, std::int64_t(1) << i, rng, drop);
        }
        head = nn::Linear<T>(ps, pre + ".head", 300, 32, rng);
    }

    // ids (64) -> features [64,32]
    Var operator()(Ctx<T>& c, const std::vector<std::int64_t>& ids) const {
        Var x = emb(c, ids);
        Var h = ops::transpose(c.tape, x);
        for (const auto& blk : blocks) {
            h = blk(c, h);
        }
        h = ops::transpose(c.tape, h);
        return ops::dropout(c.tape, head(c, h), drop, c.training, c.rng);
    }
};

/// Channel concatenation, audio first.
template <typename T>
Var build_condition(Tape<T>& tape, Var audio_feat, Var text_feat) {
    detail::require(tape.val(audio_feat).rank() == 2 && tape.val(audio_feat).same_shape(tape.val(text_feat)),
                    "build_condition: feature shapes must match");
    return ops::concat(tape, audio_feat, text_feat, 1);
}

/// Top-k sampling over one logits row. The padding index carries -inf and can
/// never win. k=1 is a pure argmax and consumes no randomness; ties at the
/// k-th slot go to the lower index.
template <typename T>
std::int64_t sample_top_k(const Tensor<T>& logits, std::int64_t k, Rng& rng) {
    detail::require(logits.rank() == 1 || logits.rank() == 2, "sample_top_k: logits must be a vector");
    const std::int64_t n = logits.numel();
    detail::require(k >= 1 && k <= n, "sample_top_k: k out of range");
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        const double la = static_cast<double>(logits[a]);
        const double lb = static_cast<double>(logits[b]);
        if (la != lb) {
            return la > lb;
        }
        return a < b;
    });
    if (k == 1) {
        return order[0];
    }
    std::int64_t kept = k;
    while (kept > 1 && !std::isfinite(static_cast<double>(logits[order[static_cast<std::size_t>(kept - 1)]]))) {
        --kept;
    }
    const double mx = static_cast<double>(logits[order[0]]);
    std::vector<double> w(static_cast<std::size_t>(kept));
    double total = 0.0;
    for (std::int64_t i = 0; i < kept; ++i) {
        w[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits[order[static_cast<std::size_t>(i)]]) - mx);
        total += w[static_cast<std::size_t>(i)];
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::int64_t i = 0; i < kept; ++i) {
        acc += w[static_cast<std::size_t>(i)];
        if (u < acc) {
            return order[static_cast<std::size_t>(i)];
        }
    }
    return order[static_cast<std::size_t>(kept - 1)];
}

/// Speech-conditioned autoregressive prior over code stacks: a causal
/// temporal transformer over token steps and a depth transformer over the
/// residual depths of each step, with one shared token-embedding table.
template <typename T>
struct Prior {
    RunConfig cfg;
    std::int64_t steps = 16;  // T = 64/s
    ParameterSet<T> params;
    AudioEncoder<T> audio;
    TextEncoder<T> text;
    nn::Linear<T> cond_proj;
    int token_emb = -1;  // [N+1, W], padding row N frozen zero
    int pe_t = -1;       // [T, W] learned temporal positions
    int pe_d = -1;       // [D, W] learned depth positions
    int start = -1;      // [1, W] t=1 bootstrap
    std::vector<nn::SelfAttnBlock<T>> temporal;
    std::vector<nn::SelfAttnBlock<T>> depth;
    nn::LayerNorm<T> cls_norm;
    nn::Linear<T> cls;

    explicit Prior(const RunConfig& cfg_, std::uint64_t seed) : cfg(cfg_) {
        steps = kWindowFrames / cfg.reduction;
        Rng rng = substream(seed, "prior.init", 0);
        const std::int64_t W = cfg.prior_width;
        audio = AudioEncoder<T>(params, "audio", rng);
        text = TextEncoder<T>(params, "text", cfg.corpus_modes + 1, rng);
        cond_proj = nn::Linear<T>(params, "cond_proj", 64, W, rng);
        Tensor<T> tok = nn::normal_init<T>(rng, {cfg.codebook_size + 1, W}, 0.02);
        for (std::int64_t j = 0; j < W; ++j) {
            tok.at(cfg.codebook_size, j) = T(0);
        }
        token_emb = params.add("token_emb.w", std::move(tok));
        pe_t = params.add("pe_t.w", nn::normal_init<T>(rng, {steps, W}, 0.02));
        pe_d = params.add("pe_d.w", nn::normal_init<T>(rng, {cfg.depth, W}, 0.02));
        start = params.add("start.w", nn::normal_init<T>(rng, {1, W}, 0.02));
        for (std::int64_t i = 0; i < cfg.prior_temporal_blocks; ++i) {
            temporal.emplace_back(params, "temporal" + std::to_string(i), W, cfg.prior_heads, rng);
        }
        for (std::int64_t i = 0; i < cfg.prior_depth_blocks; ++i) {
            depth.emplace_back(params, "depth" + std::to_string(i), W, cfg.prior_heads, rng);
        }
        cls_norm = nn::LayerNorm<T>(params, "cls.norm", W);
        cls = nn::Linear<T>(params, "cls.linear", W, cfg.codebook_size + 1, rng);
    }

    /// Speech for one window -> projected per-token condition c [T, W].
    Var condition(Ctx<T>& c, const Tensor<T>& wave, const std::vector<std::int64_t>& ids) const {
        Var af = audio(c, c.tape.constant(wave));
        Var tf = text(c, ids);
        Var fc = build_condition(c.tape, af, tf);
        Var pooled = ops::avg_pool_rows(c.tape, fc, cfg.reduction, cfg.reduction);
        return cond_proj(c, pooled);
    }

    /// Temporal inputs u for teacher forcing: u_1 = start, u_t = PE_T(t) +
    /// sum_d e(S_{t-1,d}), all rows then augmented by the condition.
    Var temporal_inputs(Ctx<T>& c, const std::vector<std::int64_t>& codes, Var cond) const {
        const std::int64_t t_now = static_cast<std::int64_t>(codes.size()) / cfg.depth + 1;
        detail::require(t_now <= steps, "temporal_inputs: prefix too long");
        Var u = c.p(start);
        if (t_now > 1) {
            Var emb = ops::embedding(c.tape, c.p(token_emb), codes, cfg.codebook_size);
            Var sums = ops::scale(c.tape, ops::avg_pool_rows(c.tape, emb, cfg.depth, cfg.depth),
                                  static_cast<T>(cfg.depth));
            Var pe = ops::slice_rows(c.tape, c.p(pe_t), 1, t_now - 1);
            u = ops::concat(c.tape, u, ops::add(c.tape, pe, sums), 0);
        }
        return ops::add(c.tape, u, ops::slice_rows(c.tape, cond, 0, t_now));
    }

    /// Causal temporal transformer: h_t depends only on u_{<=t}.
    Var temporal_context(Ctx<T>& c, Var u) const {
        Var h = u;
        for (const auto& blk : temporal) {
            h = blk(c, h, ops::AttnMask::causal);
        }
        return h;
    }

    /// Teacher-forced depth-transformer logits for every (t,d) at once.
    /// Row (t,d) of the result scores S_{t,d}; the padding logit is -inf.
    Var teacher_logits(Ctx<T>& c, const std::vector<std::int64_t>& codes, Var cond) const {
        const std::int64_t D = cfg.depth;
        detail::require(static_cast<std::int64_t>(codes.size()) == steps * D, "teacher_logits: bad code count");
        std::vector<std::int64_t> prefix(codes.begin(), codes.end() - D);
        Var u = temporal_inputs(c, prefix, cond);
        Var h = temporal_context(c, u);

        Var emb = ops::embedding(c.tape, c.p(token_emb), codes, cfg.codebook_size);
        Var prior_sums = ops::shifted_block_cumsum(c.tape, emb, D);
        Var hbase = ops::expand_rows_strided(c.tape, h, D);
        std::vector<std::int64_t> depth_ids(static_cast<std::size_t>(steps * D));
        for (std::int64_t t = 0; t < steps; ++t) {
            for (std::int64_t d = 0; d < D; ++d) {
                depth_ids[static_cast<std::size_t>(t * D + d)] = d;
            }
        }
        Var pe = ops::embedding(c.tape, c.p(pe_d), depth_ids);
        Var v = ops::add(c.tape, ops::add(c.tape, hbase, prior_sums), pe);
        for (const auto& blk : depth) {
            v = blk(c, v, ops::AttnMask::block_causal, D);
        }
        Var logits = cls(c, cls_norm(c, v));
        return ops::mask_column(c.tape, logits, cfg.codebook_size);
    }

    /// Mean NLL over the T*D positions.
    Var nll(Ctx<T>& c, Var logits, const std::vector<std::int64_t>& targets) const {
        Var lp = ops::log_softmax(c.tape, logits);
        Var picked = ops::gather_rows(c.tape, lp, targets);
        return ops::scale(c.tape, ops::mean_all(c.tape, picked), T(-1));
    }

    /// Condition features evaluated outside any training tape, for sampling.
    Tensor<T> eval_condition(const Tensor<T>& wave, const std::vector<std::int64_t>& ids) {
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        return tape.val(condition(c, wave, ids));
    }

    /// Incremental logits for position (t,d) given sampled history. History
    /// layout: `codes` holds t*D + d entries. Used by the sampler; slower but
    /// numerically identical to the teacher-forced path.
    Tensor<T> step_logits(const std::vector<std::int64_t>& codes, const Tensor<T>& cond_val) {
        const std::int64_t D = cfg.depth;
        const std::int64_t pos = static_cast<std::int64_t>(codes.size());
        const std::int64_t t_now = pos / D, d_now = pos % D;
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        Var cond = tape.constant(cond_val);
        std::vector<std::int64_t> tokens(codes.begin(), codes.begin() + t_now * D);
        Var u = temporal_inputs(c, tokens, cond);
        Var h = temporal_context(c, u);
        Var ht = ops::slice_rows(c.tape, h, t_now, 1);

        Var v = ht;
        if (d_now > 0) {
            // pad with one padding token (zero row) so the shifted cumsum has
            // d_now+1 rows; row d then carries sum over d' < d
            std::vector<std::int64_t> partial(codes.begin() + t_now * D, codes.end());
            partial.push_back(cfg.codebook_size);
            Var emb = ops::embedding(c.tape, c.p(token_emb), partial, cfg.codebook_size);
            Var sums = ops::shifted_block_cumsum(c.tape, emb, d_now + 1);
            Var rest = ops::slice_rows(c.tape, sums, 1, d_now);
            Var hpad = ops::concat(c.tape, ht, rest, 0);
            v = hpad;
        }
        std::vector<std::int64_t> depth_ids(static_cast<std::size_t>(d_now + 1));
        for (std::int64_t d = 0; d <= d_now; ++d) {
            depth_ids[static_cast<std::size_t>(d)] = d;
        }
        v = ops::add(c.tape, v, ops::embedding(c.tape, c.p(pe_d), depth_ids));
        for (const auto& blk : depth) {
            v = blk(c, v, ops::AttnMask::causal);
        }
        Var logits = ops::mask_column(c.tape, cls(c, cls_norm(c, v)), cfg.codebook_size);
        Tensor<T> row({cfg.codebook_size + 1});
        const Tensor<T>& lv = tape.val(logits);
        for (std::int64_t j = 0; j <= cfg.codebook_size; ++j) {
            row[j] = lv.at(d_now, j);
        }
        return row;
    }

    /// Samples a full T x D stack for one speech window.
    std::vector<std::int64_t> sample_window(const Tensor<T>& wave, const std::vector<std::int64_t>& ids,
                                            std::int64_t top_k, Rng& rng) {
        const Tensor<T> cond = eval_condition(wave, ids);
        std::vector<std::int64_t> codes;
        codes.reserve(static_cast<std::size_t>(steps * cfg.depth));
        for (std::int64_t pos = 0; pos < steps * cfg.depth; ++pos) {
            Tensor<T> logits = step_logits(codes, cond);
            codes.push_back(sample_top_k(logits, top_k, rng));
        }
        return codes;
    }
};

template <typename T>
Checkpoint prior_checkpoint(const Prior<T>& model, const std::string& config_text) {
    Checkpoint ck;
    ck.kind = CkptKind::prior;
    ck.config_text = config_text;
    append_params(ck, model.params);
    return ck;
}

template <typename T>
void prior_restore(Prior<T>& model, const Checkpoint& ck) {
    if (ck.kind != CkptKind::prior) {
        throw IncompatibleCheckpoint("checkpoint is not a stage-2 model");
    }
    restore_params(ck, model.params);
}

/// The prior and the stage-1 model must agree on the token grid.
template <typename T>
void check_compatible(const Prior<T>& prior, const RQVAE<T>& vae) {
    if (prior.cfg.codebook_size != vae.cfg.codebook_size || prior.cfg.depth != vae.cfg.depth ||
        prior.cfg.reduction != vae.cfg.reduction || prior.cfg.latent_dim != vae.cfg.latent_dim) {
        throw IncompatibleCheckpoint("prior and vae checkpoints describe different token grids");
    }
}

/// One sampled window decoded to a 64x126 clip.
template <typename T>
Tensor<T> synthesize_window(Prior<T>& prior, RQVAE<T>& vae, const Tensor<T>& wave,
                            const std::vector<std::int64_t>& ids, std::int64_t top_k, Rng& rng) {
    check_compatible(prior, vae);
    std::vector<std::int64_t> codes = prior.sample_window(wave, ids, top_k, rng);
    Tensor<T> zq = rq_dequantize(vae.params, vae.codebook, codes, prior.steps, prior.cfg.depth);
    return vae.decode_latent(zq);
}

inline double blend_alpha(std::int64_t i) { return static_cast<double>(i + 1) / 11.0; }

/// Channel-space lerp for one joint at overlap frame i.
inline void blend_lerp6(const float* prev, const float* next, std::int64_t i, double out[6]) {
    const double a = blend_alpha(i);
    for (int k = 0; k < 6; ++k) {
        out[k] = (1.0 - a) * static_cast<double>(prev[k]) + a * static_cast<double>(next[k]);
    }
}

/// Lerp two pose frames in the 6-value channel space, then re-orthonormalize
/// each joint rotation.
inline void blend_pose_frame(const float* prev, const float* next, std::int64_t i, float* out) {
    for (std::int64_t j = 0; j < skel::kJoints; ++j) {
        double six[6];
        blend_lerp6(prev + j * skel::kRotDims, next + j * skel::kRotDims, i, six);
        const Mat3<double> r = rot6d_decode(six);
        double enc[6];
        rot6d_encode(r, enc);
        for (int k = 0; k < 6; ++k) {
            out[j * skel::kRotDims + k] = static_cast<float>(enc[k]);
        }
    }
}

inline constexpr std::int64_t kWindowAdvance = 54;
inline constexpr std::int64_t kWindowOverlap = kWindowFrames - kWindowAdvance;  // 10

/// Long-form synthesis: windows advance by 54 frames; the 10-frame overlap is
/// blended with alpha_i = (i+1)/11 and trailing frames past the last full
/// window are dropped.
template <typename T>
MotionSequence synthesize_long(Prior<T>& prior, RQVAE<T>& vae, const MotionSequence& speech,
                               std::int64_t top_k, std::uint64_t seed) {
    check_compatible(prior, vae);
    if (speech.frames < kWindowFrames) {
        throw InsufficientData("need at least 64 frames of speech, got " + std::to_string(speech.frames));
    }
    detail::require(speech.has_audio() && speech.has_text(), "synthesize_long: speech must carry audio and text");
    const std::int64_t windows = (speech.frames - kWindowFrames) / kWindowAdvance + 1;
    const std::int64_t out_frames = kWindowFrames + (windows - 1) * kWindowAdvance;

    MotionSequence out;
    out.frames = out_frames;
    out.fps = kFps;
    out.pose.assign(static_cast<std::size_t>(out_frames * skel::kPoseDims), 0.0f);
    out.audio.assign(speech.audio.begin(), speech.audio.begin() + out_frames * kSamplesPerFrame);
    out.text.assign(speech.text.begin(), speech.text.begin() + out_frames);

    for (std::int64_t w = 0; w < windows; ++w) {
        const std::int64_t f0 = w * kWindowAdvance;
        Tensor<T> wave({1, kWindowSamples});
        for (std::int64_t s = 0; s < kWindowSamples; ++s) {
            wave[s] = static_cast<T>(speech.audio[static_cast<std::size_t>(f0 * kSamplesPerFrame + s)]);
        }
        std::vector<std::int64_t> ids(speech.text.begin() + f0, speech.text.begin() + f0 + kWindowFrames);
        Rng rng = substream(seed, "synth.window", static_cast<std::uint64_t>(w));
        Tensor<T> clip = synthesize_window(prior, vae, wave, ids, top_k, rng);

        for (std::int64_t f = 0; f < kWindowFrames; ++f) {
            float frame[skel::kPoseDims];
            for (std::int64_t j = 0; j < skel::kPoseDims; ++j) {
                frame[j] = static_cast<float>(clip.at(f, j));
            }
            float* dst = out.pose.data() + (f0 + f) * skel::kPoseDims;
            if (w > 0 && f < kWindowOverlap) {
                float blended[skel::kPoseDims];
                blend_pose_frame(dst, frame, f, blended);
                std::copy(blended, blended + skel::kPoseDims, dst);
            } else {
                std::copy(frame, frame + skel::kPoseDims, dst);
            }
        }
    }
    return out;
}

struct Stage2Row {
    std::int64_t epoch = 0;
    double nll = 0.0;
};

struct Stage2Result {
    std::vector<Stage2Row> curve;
    double holdout_nll = 0.0;
    bool diverged = false;
};

/// Teacher-forced stage-2 training against a frozen stage-1 model. Code
/// targets are precomputed once since the tokenizer never moves.
template <typename T>
Stage2Result train_stage2(Prior<T>& model, RQVAE<T>& vae, const std::vector<GestureClip>& corpus,
                          const std::vector<GestureClip>& holdout, std::int64_t epochs, std::uint64_t seed,
                          std::ostream* log = nullptr) {
    detail::require(!corpus.empty(), "train_stage2: corpus is empty");
    check_compatible(model, vae);
    AdamWConfig ocfg;
    ocfg.lr = model.cfg.lr;
    ocfg.beta1 = model.cfg.adam_beta1;
    ocfg.beta2 = model.cfg.adam_beta2;
    ocfg.weight_decay = model.cfg.weight_decay;
    AdamW<T> opt(ocfg);
    ParamBinding<T> bind(model.params);

    // frozen tokenizer: targets never change across epochs
    std::vector<std::vector<std::int64_t>> targets;
    targets.reserve(corpus.size());
    for (const auto& clip : corpus) {
        targets.push_back(vae.tokens(clip_pose_tensor<T>(clip)).codes);
    }

    auto clip_wave = [](const GestureClip& clip) {
        Tensor<T> wave({1, kWindowSamples});
        for (std::int64_t s = 0; s < kWindowSamples; ++s) {
            wave[s] = static_cast<T>(clip.audio[static_cast<std::size_t>(s)]);
        }
        return wave;
    };
    auto clip_ids = [](const GestureClip& clip) {
        return std::vector<std::int64_t>(clip.text.begin(), clip.text.end());
    };

    Stage2Result res;
    std::vector<Tensor<T>> snapshot;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        snapshot.push_back(model.params.value(static_cast<int>(i)));
    }
    std::vector<std::int64_t> order(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        order[i] = static_cast<std::int64_t>(i);
    }
    std::vector<Tensor<T>> grad_acc;
    std::int64_t acc_n = 0, clip_counter = 0;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        Rng erng = substream(seed, "stage2.epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order.begin(), order.end());
        double sum_nll = 0.0;
        std::int64_t seen = 0;
        bool bad = false;

        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const GestureClip& clip = corpus[static_cast<std::size_t>(order[oi])];
            Tape<T> tape;
            bind.reset();
            Rng drng = substream(seed, "stage2.drop", static_cast<std::uint64_t>(clip_counter++));
            Ctx<T> c{tape, bind, true, &drng};
            Var cond = model.condition(c, clip_wave(clip), clip_ids(clip));
            Var logits = model.teacher_logits(c, targets[static_cast<std::size_t>(order[oi])], cond);
            Var loss = model.nll(c, logits, targets[static_cast<std::size_t>(order[oi])]);
            const double lv = static_cast<double>(tape.val(loss)[0]);
            if (!std::isfinite(lv)) {
                bad = true;
                break;
            }
            sum_nll += lv;
            ++seen;
            tape.backward(loss);
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
            const bool flush = acc_n == model.cfg.batch || oi + 1 == order.size();
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
            grad_acc.clear();
            acc_n = 0;
        }

        if (bad) {
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                model.params.value(static_cast<int>(i)) = snapshot[i];
            }
            res.diverged = true;
            if (log) {
                (*log) << "stage2 epoch " << epoch << " diverged; restored last checkpoint\n";
            }
            break;
        }
        Stage2Row row;
        row.epoch = epoch;
        row.nll = seen > 0 ? sum_nll / static_cast<double>(seen) : 0.0;
        res.curve.push_back(row);
        if (log) {
            (*log) << "stage2 epoch " << epoch << " nll " << row.nll << "\n";
        }
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            snapshot[i] = model.params.value(static_cast<int>(i));
        }
        grad_acc.clear();
        acc_n = 0;
    }

    if (!holdout.empty()) {
        double sum = 0.0;
        for (const auto& clip : holdout) {
            Tape<T> tape;
            bind.reset();
            Ctx<T> c{tape, bind, false, nullptr};
            std::vector<std::int64_t> tgt = vae.tokens(clip_pose_tensor<T>(clip)).codes;
            Var cond = model.condition(c, clip_wave(clip), clip_ids(clip));
            Var logits = model.teacher_logits(c, tgt, cond);
            Var loss = model.nll(c, logits, tgt);
            sum += static_cast<double>(tape.val(loss)[0]);
        }
        res.holdout_nll = sum / static_cast<double>(holdout.size());
        if (log) {
            (*log) << "stage2 holdout nll " << res.holdout_nll << "\n";
        }
    }
    return res;
}

}  // namespace gtok
