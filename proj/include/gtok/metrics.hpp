#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "gtok/motion.hpp"
#include "gtok/nn.hpp"
#include "gtok/rqvae.hpp"
#include "gtok/serialize.hpp"

namespace gtok {

// ---------------------------------------------------------------------------
// Feature extractor: a small convolutional autoencoder over whole clips. The
// 32-dim bottleneck is the embedding used for distribution comparison.
// ---------------------------------------------------------------------------

inline constexpr std::int64_t kFeatDim = 32;

template <typename T>
struct FeatureExtractor {
    ParameterSet<T> params;
    nn::Conv1d<T> e0, e1, e2;
    nn::Linear<T> ehead;
    nn::Linear<T> dhead;
    nn::ConvTranspose1d<T> d0, d1, d2;

    explicit FeatureExtractor(std::uint64_t seed) {
        Rng rng = substream(seed, "feat.init", 0);
        const ops::ConvSpec half{2, 1, 1, 1};  // k=4 s=2 halves the length
        e0 = nn::Conv1d<T>(params, "e0", skel::kPoseDims, 64, 4, rng, half);
        e1 = nn::Conv1d<T>(params, "e1", 64, 48, 4, rng, half);
        e2 = nn::Conv1d<T>(params, "e2", 48, 32, 4, rng, half);
        ehead = nn::Linear<T>(params, "ehead", 32 * 8, kFeatDim, rng);
        dhead = nn::Linear<T>(params, "dhead", kFeatDim, 32 * 8, rng);
        d0 = nn::ConvTranspose1d<T>(params, "d0", 32, 48, 4, 2, 1, rng);
        d1 = nn::ConvTranspose1d<T>(params, "d1", 48, 64, 4, 2, 1, rng);
        d2 = nn::ConvTranspose1d<T>(params, "d2", 64, skel::kPoseDims, 4, 2, 1, rng);
    }

    // pose [64,126] -> feature [1,32]
    Var encode(Ctx<T>& c, Var pose) const {
        const Tensor<T>& pv = c.tape.val(pose);
        detail::require(pv.rank() == 2 && pv.dim(0) == kWindowFrames && pv.dim(1) == skel::kPoseDims,
                        "feat: expected a [64,126] clip");
        Var h = ops::transpose(c.tape, pose);
        h = ops::relu(c.tape, e0(c, h));  // [64,32]
        h = ops::relu(c.tape, e1(c, h));  // [48,16]
        h = ops::relu(c.tape, e2(c, h));  // [32,8]
        h = ops::reshape(c.tape, h, {1, 32 * 8});
        return ehead(c, h);
    }

    Var decode(Ctx<T>& c, Var feat) const {
        Var h = ops::relu(c.tape, dhead(c, feat));
        h = ops::reshape(c.tape, h, {32, 8});
        h = ops::relu(c.tape, d0(c, h));  // [48,16]
        h = ops::relu(c.tape, d1(c, h));  // [64,32]
        h = d2(c, h);                     // [126,64]
        return ops::transpose(c.tape, h);
    }

    Var loss(Ctx<T>& c, Var pose) const {
        Var rec = decode(c, encode(c, pose));
        Var diff = ops::sub(c.tape, rec, pose);
        return ops::mean_all(c.tape, ops::mul(c.tape, diff, diff));
    }

    /// Embedding of one clip with frozen weights.
    std::vector<double> features(const GestureClip& clip) {
        Tape<T> tape;
        ParamBinding<T> bind(params);
        Ctx<T> c{tape, bind, false, nullptr};
        Var f = encode(c, tape.constant(clip_pose_tensor<T>(clip)));
        const Tensor<T>& fv = tape.val(f);
        std::vector<double> out(static_cast<std::size_t>(kFeatDim));
        for (std::int64_t j = 0; j < kFeatDim; ++j) {
            out[static_cast<std::size_t>(j)] = static_cast<double>(fv[j]);
        }
        return out;
    }
};

struct FeatRow {
    std::int64_t epoch = 0;
    double mse = 0.0;
};

struct FeatResult {
    std::vector<FeatRow> curve;
    bool diverged = false;
};

/// Reconstruction training for the metric embedding. Small corpora give
/// meaningless FGD covariances, hence the hard floor on the clip count.
template <typename T>
FeatResult train_feat(FeatureExtractor<T>& model, const std::vector<GestureClip>& corpus, std::int64_t epochs,
                      std::uint64_t seed, std::int64_t batch = 16, std::ostream* log = nullptr) {
    if (static_cast<std::int64_t>(corpus.size()) < 100) {
        throw InsufficientData("feature extractor needs >= 100 clips, got " + std::to_string(corpus.size()));
    }
    AdamWConfig ocfg;
    AdamW<T> opt(ocfg);
    ParamBinding<T> bind(model.params);

    FeatResult res;
    std::vector<Tensor<T>> snapshot;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        snapshot.push_back(model.params.value(static_cast<int>(i)));
    }
    std::vector<std::int64_t> order(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        order[i] = static_cast<std::int64_t>(i);
    }
    std::vector<Tensor<T>> grad_acc;
    std::int64_t acc_n = 0;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        Rng erng = substream(seed, "feat.epoch", static_cast<std::uint64_t>(epoch));
        erng.shuffle(order.begin(), order.end());
        double sum_mse = 0.0;
        std::int64_t seen = 0;
        bool bad = false;

        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            Tape<T> tape;
            bind.reset();
            Ctx<T> c{tape, bind, true, nullptr};
            Tensor<T> pose = clip_pose_tensor<T>(corpus[static_cast<std::size_t>(order[oi])]);
            Var L = model.loss(c, tape.constant(pose));
            const double lv = static_cast<double>(tape.val(L)[0]);
            if (!std::isfinite(lv)) {
                bad = true;
                break;
            }
            sum_mse += lv;
            ++seen;
            tape.backward(L);
            std::vector<Tensor<T>> g = bind.collect(tape);
            if (grad_acc.empty()) {
                grad_acc = std::move(g);
            } else {
                for (std::size_t i = 0; i < grad_acc.size(); ++i) {
                    T* a = grad_acc[i].data();
                    const T* src = g[i].data();
                    for (std::int64_t j = 0; j < grad_acc[i].numel(); ++j) {
                        a[j] += src[j];
                    }
                }
            }
            if (++acc_n == batch || oi + 1 == order.size()) {
                const T inv = T(1) / static_cast<T>(acc_n);
                for (auto& gt : grad_acc) {
                    for (std::int64_t j = 0; j < gt.numel(); ++j) {
                        gt.data()[j] *= inv;
                    }
                }
                opt.step(model.params, grad_acc);
                grad_acc.clear();
                acc_n = 0;
            }
        }

        if (bad) {
            for (std::size_t i = 0; i < model.params.size(); ++i) {
                model.params.value(static_cast<int>(i)) = snapshot[i];
            }
            res.diverged = true;
            if (log) {
                (*log) << "feat epoch " << epoch << " diverged, restored last snapshot\n";
            }
            return res;
        }
        FeatRow row;
        row.epoch = epoch;
        row.mse = seen > 0 ? sum_mse / static_cast<double>(seen) : 0.0;
        res.curve.push_back(row);
        if (log) {
            (*log) << "feat epoch " << epoch << " mse " << row.mse << "\n";
        }
        for (std::size_t i = 0; i < model.params.size(); ++i) {
            snapshot[i] = model.params.value(static_cast<int>(i));
        }
    }
    return res;
}

template <typename T>
Checkpoint feat_checkpoint(const FeatureExtractor<T>& model, const std::string& config_text) {
    Checkpoint ck;
    ck.kind = CkptKind::feat;
    ck.config_text = config_text;
    append_params(ck, model.params);
    return ck;
}

template <typename T>
void feat_restore(FeatureExtractor<T>& model, const Checkpoint& ck) {
    if (ck.kind != CkptKind::feat) {
        throw IncompatibleCheckpoint("expected a feature-extractor checkpoint");
    }
    restore_params(ck, model.params);
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance between them.
// ---------------------------------------------------------------------------

struct GaussianStats {
    std::vector<double> mean;
    Tensor<double> cov;  // [d,d] symmetric
    std::int64_t count = 0;
};

namespace metrics_detail {

inline Tensor<double> mmul(const Tensor<double>& a, const Tensor<double>& b) {
    const std::int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    detail::require(b.dim(0) == k, "mmul: inner dimensions differ");
    Tensor<double> y({n, m});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t l = 0; l < k; ++l) {
            const double av = a.at(i, l);
            for (std::int64_t j = 0; j < m; ++j) {
                y.at(i, j) += av * b.at(l, j);
            }
        }
    }
    return y;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: a = v diag(w) v^T.
inline void jacobi_eigh(Tensor<double> a, std::vector<double>& w, Tensor<double>& v) {
    const std::int64_t n = a.dim(0);
    detail::require(a.rank() == 2 && a.dim(1) == n, "eigh: matrix must be square");
    v = Tensor<double>({n, n});
    for (std::int64_t i = 0; i < n; ++i) {
        v.at(i, i) = 1.0;
    }
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                off += a.at(p, q) * a.at(p, q);
            }
        }
        if (off < 1e-24) {
            break;
        }
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p, q);
                if (std::abs(apq) < 1e-300) {
                    continue;
                }
                const double theta = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t i = 0; i < n; ++i) {
                    const double aip = a.at(i, p), aiq = a.at(i, q);
                    a.at(i, p) = c * aip - s * aiq;
                    a.at(i, q) = s * aip + c * aiq;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    const double api = a.at(p, i), aqi = a.at(q, i);
                    a.at(p, i) = c * api - s * aqi;
                    a.at(q, i) = s * api + c * aqi;
                }
                for (std::int64_t i = 0; i < n; ++i) {
                    const double vip = v.at(i, p), viq = v.at(i, q);
                    v.at(i, p) = c * vip - s * viq;
                    v.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }
    w.assign(static_cast<std::size_t>(n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        w[static_cast<std::size_t>(i)] = a.at(i, i);
    }
}

/// Symmetric PSD square root; negative eigenvalues (roundoff) clamp to zero.
inline Tensor<double> sqrt_psd(const Tensor<double>& a) {
    std::vector<double> w;
    Tensor<double> v;
    jacobi_eigh(a, w, v);
    const std::int64_t n = a.dim(0);
    Tensor<double> y({n, n});
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double s = w[k] > 0.0 ? std::sqrt(w[k]) : 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            const double vis = s * v.at(i, static_cast<std::int64_t>(k));
            for (std::int64_t j = 0; j < n; ++j) {
                y.at(i, j) += vis * v.at(j, static_cast<std::int64_t>(k));
            }
        }
    }
    return y;
}

inline void symmetrize(Tensor<double>& a) {
    const std::int64_t n = a.dim(0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = i + 1; j < n; ++j) {
            const double m = 0.5 * (a.at(i, j) + a.at(j, i));
            a.at(i, j) = m;
            a.at(j, i) = m;
        }
    }
}

}  // namespace metrics_detail

/// Sample mean and unbiased covariance. Needs more samples than dimensions
/// for the covariance to carry any rank.
inline GaussianStats fit_gaussian(const std::vector<std::vector<double>>& rows) {
    const std::int64_t n = static_cast<std::int64_t>(rows.size());
    if (n < 2) {
        throw InsufficientData("gaussian fit needs >= 2 samples, got " + std::to_string(n));
    }
    const std::int64_t d = static_cast<std::int64_t>(rows[0].size());
    if (n < d + 1) {
        throw InsufficientData("gaussian fit needs >= " + std::to_string(d + 1) + " samples for dim " +
                               std::to_string(d) + ", got " + std::to_string(n));
    }
    GaussianStats g;
    g.count = n;
    g.mean.assign(static_cast<std::size_t>(d), 0.0);
    for (const auto& r : rows) {
        detail::require(static_cast<std::int64_t>(r.size()) == d, "gaussian fit: ragged feature rows");
        for (std::int64_t j = 0; j < d; ++j) {
            g.mean[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
        }
    }
    for (double& m : g.mean) {
        m /= static_cast<double>(n);
    }
    g.cov = Tensor<double>({d, d});
    for (const auto& r : rows) {
        for (std::int64_t i = 0; i < d; ++i) {
            const double di = r[static_cast<std::size_t>(i)] - g.mean[static_cast<std::size_t>(i)];
            for (std::int64_t j = i; j < d; ++j) {
                g.cov.at(i, j) += di * (r[static_cast<std::size_t>(j)] - g.mean[static_cast<std::size_t>(j)]);
            }
        }
    }
    for (std::int64_t i = 0; i < d; ++i) {
        for (std::int64_t j = i; j < d; ++j) {
            const double c = g.cov.at(i, j) / static_cast<double>(n - 1);
            g.cov.at(i, j) = c;
            g.cov.at(j, i) = c;
        }
    }
    return g;
}

/// Frechet distance between two Gaussians:
/// |mu_a-mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2).
inline double fgd(const GaussianStats& a, const GaussianStats& b) {
    const std::int64_t d = static_cast<std::int64_t>(a.mean.size());
    detail::require(static_cast<std::int64_t>(b.mean.size()) == d && a.cov.dim(0) == d && b.cov.dim(0) == d,
                    "fgd: dimension mismatch");
    double dist = 0.0;
    for (std::int64_t i = 0; i < d; ++i) {
        const double diff = a.mean[static_cast<std::size_t>(i)] - b.mean[static_cast<std::size_t>(i)];
        dist += diff * diff;
    }
    Tensor<double> sa = metrics_detail::sqrt_psd(a.cov);
    Tensor<double> inner = metrics_detail::mmul(metrics_detail::mmul(sa, b.cov), sa);
    metrics_detail::symmetrize(inner);
    Tensor<double> geo = metrics_detail::sqrt_psd(inner);
    for (std::int64_t i = 0; i < d; ++i) {
        dist += a.cov.at(i, i) + b.cov.at(i, i) - 2.0 * geo.at(i, i);
    }
    return std::max(dist, 0.0);
}

// ---------------------------------------------------------------------------
// Motion-space metrics.
// ---------------------------------------------------------------------------

/// Mean pairwise L1 distance between consecutive non-overlapping segments.
inline double diversity(const MotionSequence& motion, std::int64_t segment_len = 40) {
    detail::require(segment_len >= 1, "diversity: segment length must be positive");
    if (motion.frames < 2 * segment_len) {
        throw InsufficientData("diversity needs >= " + std::to_string(2 * segment_len) + " frames, got " +
                               std::to_string(motion.frames));
    }
    const std::int64_t segs = motion.frames / segment_len;
    const std::int64_t vals = segment_len * skel::kPoseDims;
    double total = 0.0;
    std::int64_t pairs = 0;
    for (std::int64_t i = 0; i < segs; ++i) {
        for (std::int64_t j = i + 1; j < segs; ++j) {
            const float* pa = motion.frame(i * segment_len);
            const float* pb = motion.frame(j * segment_len);
            double l1 = 0.0;
            for (std::int64_t k = 0; k < vals; ++k) {
                l1 += std::abs(static_cast<double>(pa[k]) - static_cast<double>(pb[k]));
            }
            total += l1 / static_cast<double>(vals);
            ++pairs;
        }
    }
    return total / static_cast<double>(pairs);
}

/// Summed angular speed of the shoulder, elbow and wrist joints. Entry f is
/// the magnitude of the change from frame f to f+1 (length frames-1).
inline std::vector<double> arm_speed(const MotionSequence& motion) {
    detail::require(motion.frames >= 2, "arm_speed: need at least 2 frames");
    static constexpr std::int64_t tracked[6] = {skel::l_shoulder, skel::r_shoulder, skel::l_elbow,
                                                skel::r_elbow,    skel::l_wrist,    skel::r_wrist};
    std::vector<double> speed(static_cast<std::size_t>(motion.frames - 1), 0.0);
    for (std::int64_t f = 1; f < motion.frames; ++f) {
        const float* prev = motion.frame(f - 1);
        const float* cur = motion.frame(f);
        double total = 0.0;
        for (std::int64_t j : tracked) {
            double sq = 0.0;
            for (std::int64_t k = 0; k < skel::kRotDims; ++k) {
                const double dv =
                    static_cast<double>(cur[j * skel::kRotDims + k]) - static_cast<double>(prev[j * skel::kRotDims + k]);
                sq += dv * dv;
            }
            total += std::sqrt(sq);
        }
        speed[static_cast<std::size_t>(f - 1)] = total;
    }
    return speed;
}

namespace metrics_detail {

/// Indices of local minima with a 3-frame window; a flat run that is a
/// minimum reports only its first index.
inline std::vector<std::int64_t> local_minima(const std::vector<double>& s) {
    std::vector<std::int64_t> out;
    const std::int64_t n = static_cast<std::int64_t>(s.size());
    std::int64_t i = 1;
    while (i + 1 < n) {
        if (s[static_cast<std::size_t>(i)] < s[static_cast<std::size_t>(i - 1)]) {
            std::int64_t j = i;
            while (j + 1 < n && s[static_cast<std::size_t>(j + 1)] == s[static_cast<std::size_t>(i)]) {
                ++j;
            }
            if (j + 1 < n && s[static_cast<std::size_t>(j + 1)] > s[static_cast<std::size_t>(i)]) {
                out.push_back(i);
            }
            i = j + 1;
        } else {
            ++i;
        }
    }
    return out;
}

}  // namespace metrics_detail

/// Kinematic beat times in seconds: local minima of the summed arm speed.
inline std::vector<double> kinematic_beat_times(const MotionSequence& motion) {
    const std::vector<double> speed = arm_speed(motion);
    std::vector<double> times;
    for (std::int64_t i : metrics_detail::local_minima(speed)) {
        // speed[i] covers the step into frame i+1, the dip lands there
        times.push_back(static_cast<double>(i + 1) / motion.fps);
    }
    return times;
}

/// Gaussian-kernel agreement between kinematic and audio beats, in [0,1].
/// No kinematic beats gives zero; the caller decides whether to warn.
inline double beat_consistency(const MotionSequence& motion, const std::vector<double>& audio_beats,
                               double sigma = 0.1) {
    detail::require(!audio_beats.empty(), "beat_consistency: need at least one audio beat");
    detail::require(sigma > 0.0, "beat_consistency: sigma must be positive");
    const std::vector<double> kin = kinematic_beat_times(motion);
    if (kin.empty()) {
        return 0.0;
    }
    double score = 0.0;
    for (double t : kin) {
        double nearest = std::numeric_limits<double>::infinity();
        for (double b : audio_beats) {
            nearest = std::min(nearest, std::abs(t - b));
        }
        score += std::exp(-(nearest * nearest) / (2.0 * sigma * sigma));
    }
    return score / static_cast<double>(kin.size());
}

/// Click-onset times in seconds from a raw waveform: smoothed first
/// difference, global threshold, refractory dedupe.
inline std::vector<double> detect_audio_beats(const std::vector<float>& audio, int rate = kAudioRate) {
    const std::int64_t n = static_cast<std::int64_t>(audio.size());
    std::vector<double> times;
    if (n < 2) {
        return times;
    }
    std::vector<double> diff(static_cast<std::size_t>(n - 1));
    for (std::int64_t s = 1; s < n; ++s) {
        diff[static_cast<std::size_t>(s - 1)] =
            std::abs(static_cast<double>(audio[static_cast<std::size_t>(s)]) -
                     static_cast<double>(audio[static_cast<std::size_t>(s - 1)]));
    }
    const std::int64_t win = 32;  // 2 ms at 16 kHz
    std::vector<double> smooth(diff.size(), 0.0);
    double acc = 0.0;
    for (std::size_t s = 0; s < diff.size(); ++s) {
        acc += diff[s];
        if (s >= static_cast<std::size_t>(win)) {
            acc -= diff[s - static_cast<std::size_t>(win)];
        }
        smooth[s] = acc / static_cast<double>(win);
    }
    const double peak = *std::max_element(smooth.begin(), smooth.end());
    if (peak <= 0.0) {
        return times;
    }
    const double thresh = 0.4 * peak;
    const std::int64_t refractory = rate * 2 / 5;  // 0.4 s between onsets
    std::int64_t last = -refractory;
    for (std::int64_t s = 0; s < static_cast<std::int64_t>(smooth.size()); ++s) {
        if (smooth[static_cast<std::size_t>(s)] >= thresh && s - last >= refractory) {
            // assign the onset to the start of the smoothing window
            const std::int64_t onset = std::max<std::int64_t>(s - win + 1, 0);
            times.push_back(static_cast<double>(onset) / rate);
            last = s;
        }
    }
    return times;
}

/// Mean wrist angular speed of synth over that of reference.
inline double wrist_speed_ratio(const MotionSequence& synth, const MotionSequence& reference) {
    detail::require(synth.frames >= 2 && reference.frames >= 2, "wrist_speed_ratio: need at least 2 frames");
    auto mean_speed = [](const MotionSequence& m) {
        double total = 0.0;
        for (std::int64_t f = 1; f < m.frames; ++f) {
            const float* prev = m.frame(f - 1);
            const float* cur = m.frame(f);
            for (std::int64_t j : skel::kWrists) {
                double sq = 0.0;
                for (std::int64_t k = 0; k < skel::kRotDims; ++k) {
                    const double dv = static_cast<double>(cur[j * skel::kRotDims + k]) -
                                      static_cast<double>(prev[j * skel::kRotDims + k]);
                    sq += dv * dv;
                }
                total += std::sqrt(sq);
            }
        }
        return total / static_cast<double>(m.frames - 1);
    };
    const double ref = mean_speed(reference);
    detail::require(ref > 1e-12, "wrist_speed_ratio: reference wrist speed is zero");
    return mean_speed(synth) / ref;
}

// ---------------------------------------------------------------------------
// Report plumbing.
// ---------------------------------------------------------------------------

struct MetricReport {
    double fgd = 0.0;
    double diversity = 0.0;
    double beat = 0.0;
    double wrist_ratio = 0.0;
    std::int64_t ref_count = 0;
    std::int64_t synth_count = 0;
    std::int64_t kinematic_beats = 0;
    std::int64_t audio_beats = 0;
    std::string config_echo;
};

inline std::string report_text(const MetricReport& r) {
    detail::require(std::isfinite(r.fgd) && std::isfinite(r.diversity) && std::isfinite(r.beat) &&
                        std::isfinite(r.wrist_ratio),
                    "report: non-finite metric value");
    detail::require(r.ref_count > 0 && r.synth_count > 0, "report: empty sample set");
    char buf[64];
    std::string out;
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof(buf), "%.9g", v);
        out += key;
        out += ": ";
        out += buf;
        out += '\n';
    };
    auto puti = [&](const char* key, std::int64_t v) {
        out += key;
        out += ": ";
        out += std::to_string(v);
        out += '\n';
    };
    put("fgd", r.fgd);
    put("diversity", r.diversity);
    put("beat_consistency", r.beat);
    put("wrist_speed_ratio", r.wrist_ratio);
    puti("reference_clips", r.ref_count);
    puti("synth_clips", r.synth_count);
    puti("kinematic_beats", r.kinematic_beats);
    puti("audio_beats", r.audio_beats);
    out += "# config\n";
    out += r.config_echo;
    return out;
}

inline std::string report_tsv(const MetricReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.9g\t%.9g\t%.9g\t%.9g\t%lld\t%lld\t%lld\t%lld\n", r.fgd, r.diversity, r.beat,
                  r.wrist_ratio, static_cast<long long>(r.ref_count), static_cast<long long>(r.synth_count),
                  static_cast<long long>(r.kinematic_beats), static_cast<long long>(r.audio_beats));
    return std::string("fgd\tdiversity\tbeat_consistency\twrist_speed_ratio\tref_clips\tsynth_clips\tkinematic_"
                       "beats\taudio_beats\n") +
           buf;
}

}  // namespace gtok
