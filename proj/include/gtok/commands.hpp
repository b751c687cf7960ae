#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "gtok/config.hpp"
#include "gtok/metrics.hpp"
#include "gtok/prior.hpp"
#include "gtok/rqvae.hpp"
#include "gtok/serialize.hpp"
#include "gtok/synthgest.hpp"

namespace gtok::cli {

// ---------------------------------------------------------------------------
// Shared plumbing.
// ---------------------------------------------------------------------------

/// Maps the error taxonomy to the stable exit-code contract.
template <typename F>
int run_guarded(F&& f) {
    try {
        f();
        return 0;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const MissingPrereq& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IncompatibleCheckpoint& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const InsufficientData& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

/// Config file (optional) -> --set overrides -> validation.
inline RunConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
    RunConfig cfg;
    if (!path.empty()) {
        config_parse(cfg, read_file(path));
    }
    config_overrides(cfg, sets);
    config_validate(cfg);
    return cfg;
}

/// Worker-thread cap from the environment. All compute here is
/// single-threaded, so any positive cap is honored; junk values warn.
inline int env_threads() {
    const char* v = std::getenv("GTOK_THREADS");
    if (v == nullptr || *v == '\0') {
        return 1;
    }
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) {
        std::cerr << "warning: ignoring invalid GTOK_THREADS='" << v << "'\n";
        return 1;
    }
    return static_cast<int>(std::min<long>(n, 1));
}

namespace cli_detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) {
        throw IoError("cannot create directory: " + dir);
    }
}

/// Echo lines appended to text artifacts as comments.
inline std::string config_footer(const RunConfig& cfg) {
    std::string out = "# config\n";
    const std::string echo = config_echo(cfg);
    std::size_t pos = 0;
    while (pos < echo.size()) {
        std::size_t nl = echo.find('\n', pos);
        if (nl == std::string::npos) {
            nl = echo.size();
        }
        out += "# " + echo.substr(pos, nl - pos) + "\n";
        pos = nl + 1;
    }
    return out;
}

inline std::string seq_name(std::int64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seq_%03lld.gtkm", static_cast<long long>(index));
    return buf;
}

inline std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

/// Sorted .gtkm files under dir.
inline std::vector<std::string> motion_files(const std::string& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw IoError("not a directory: " + dir);
    }
    std::vector<std::string> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".gtkm") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

struct Corpus {
    std::vector<GestureClip> train;
    std::vector<GestureClip> holdout;
    std::vector<MotionSequence> holdout_seqs;
};

/// Loads a corpus directory; the last cfg.corpus_holdout sequences (by file
/// order) become the holdout split.
inline Corpus load_corpus(const RunConfig& cfg, const std::string& dir) {
    const std::vector<std::string> files = motion_files(dir);
    if (files.empty()) {
        throw InsufficientData("no .gtkm sequences in " + dir);
    }
    const std::int64_t total = static_cast<std::int64_t>(files.size());
    const std::int64_t holdout = std::min<std::int64_t>(cfg.corpus_holdout, total - 1);
    Corpus out;
    for (std::int64_t i = 0; i < total; ++i) {
        MotionSequence seq = resample_20fps(load_motion(files[static_cast<std::size_t>(i)]));
        std::vector<GestureClip> w = extract_windows(seq);
        if (i < total - holdout) {
            out.train.insert(out.train.end(), w.begin(), w.end());
        } else {
            out.holdout.insert(out.holdout.end(), w.begin(), w.end());
            out.holdout_seqs.push_back(std::move(seq));
        }
    }
    if (out.train.empty()) {
        throw InsufficientData("corpus in " + dir + " yields no 64-frame training windows");
    }
    return out;
}

template <typename T>
RQVAE<T> load_vae(const std::string& path) {
    if (path.empty() || !std::filesystem::exists(path)) {
        throw MissingPrereq("stage-1 checkpoint not found: " + (path.empty() ? "(none given)" : path));
    }
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != CkptKind::vae) {
        throw IncompatibleCheckpoint(path + " is not a stage-1 checkpoint");
    }
    RunConfig ck_cfg;
    config_parse(ck_cfg, ck.config_text);
    DatasetStats unit;
    unit.mean.assign(static_cast<std::size_t>(skel::kPoseDims), 0.0f);
    unit.var.assign(static_cast<std::size_t>(skel::kPoseDims), 1.0f);
    RQVAE<T> vae(ck_cfg, unit, ck_cfg.seed);
    vae_restore(vae, ck);
    return vae;
}

template <typename T>
Prior<T> load_prior(const std::string& path) {
    if (path.empty() || !std::filesystem::exists(path)) {
        throw MissingPrereq("stage-2 checkpoint not found: " + (path.empty() ? "(none given)" : path));
    }
    Checkpoint ck = load_checkpoint(path);
    if (ck.kind != CkptKind::prior) {
        throw IncompatibleCheckpoint(path + " is not a stage-2 checkpoint");
    }
    RunConfig ck_cfg;
    config_parse(ck_cfg, ck.config_text);
    Prior<T> prior(ck_cfg, ck_cfg.seed);
    prior_restore(prior, ck);
    return prior;
}

template <typename T>
FeatureExtractor<T> load_feat(const std::string& path) {
    if (path.empty() || !std::filesystem::exists(path)) {
        throw MissingPrereq("feature-extractor checkpoint not found: " + (path.empty() ? "(none given)" : path));
    }
    Checkpoint ck = load_checkpoint(path);
    FeatureExtractor<T> fx(0);
    feat_restore(fx, ck);
    return fx;
}

/// Mean per-frame wrist speed pooled over a set of sequences.
inline double set_wrist_speed(const std::vector<MotionSequence>& seqs) {
    double total = 0.0;
    std::int64_t steps = 0;
    for (const MotionSequence& m : seqs) {
        if (m.frames < 2) {
            continue;
        }
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
        steps += m.frames - 1;
    }
    return steps > 0 ? total / static_cast<double>(steps) : 0.0;
}

}  // namespace cli_detail

/// Human-readable motion dump for inspection without a viewer.
inline std::string motion_text(const MotionSequence& seq) {
    std::string out;
    out += "frames: " + std::to_string(seq.frames) + "\n";
    out += "fps: " + std::to_string(seq.fps) + "\n";
    out += "joints: " + std::to_string(skel::kJoints) + "\n";
    out += "audio_samples: " + std::to_string(seq.audio.size()) + "\n";
    out += "text_frames: " + std::to_string(seq.text.size()) + "\n";
    char buf[64];
    for (std::int64_t f = 0; f < seq.frames; ++f) {
        out += "frame " + std::to_string(f);
        if (seq.has_text()) {
            out += " word=" + std::to_string(seq.text[static_cast<std::size_t>(f)]);
        }
        out += "\n";
        const float* p = seq.frame(f);
        for (std::int64_t j = 0; j < skel::kJoints; ++j) {
            out += "  ";
            out += skel::joint_name(j);
            for (std::int64_t k = 0; k < skel::kRotDims; ++k) {
                std::snprintf(buf, sizeof(buf), " %.6f", static_cast<double>(p[j * skel::kRotDims + k]));
                out += buf;
            }
            out += "\n";
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Commands. Each throws the error taxonomy; run_guarded maps to exit codes.
// ---------------------------------------------------------------------------

/// Writes cfg.corpus_sequences SynthGest sequences plus a manifest.
inline void cmd_gen_corpus(const RunConfig& cfg, const std::string& out_dir) {
    cli_detail::ensure_dir(out_dir);
    SynthConfig sc;
    sc.modes = cfg.corpus_modes;
    sc.min_frames = cfg.corpus_min_frames;
    std::string manifest;
    manifest += "# gtok corpus manifest\n";
    manifest += "seed=" + std::to_string(cfg.seed) + "\n";
    manifest += "sequences=" + std::to_string(cfg.corpus_sequences) + "\n";
    manifest += "holdout=" + std::to_string(cfg.corpus_holdout) + "\n";
    for (std::int64_t i = 0; i < cfg.corpus_sequences; ++i) {
        SynthSequence seq = synth_sequence(sc, cfg.seed, static_cast<std::uint64_t>(i));
        const std::string name = cli_detail::seq_name(i);
        save_motion(out_dir + "/" + name, seq.motion);
        manifest += name + " index=" + std::to_string(i) + " frames=" + std::to_string(seq.motion.frames) +
                    " beats=" + std::to_string(seq.beat_frames.size()) + "\n";
    }
    manifest += cli_detail::config_footer(cfg);
    atomic_write(out_dir + "/manifest.txt", manifest);
}

/// Stage dispatch: "1" and "2" are the two model stages, "feat" trains the
/// metric feature extractor.
inline void cmd_train(const RunConfig& cfg, const std::string& stage, const std::string& corpus_dir,
                      const std::string& out_dir, const std::string& vae_path = "") {
    cli_detail::ensure_dir(out_dir);
    cli_detail::Corpus corpus = cli_detail::load_corpus(cfg, corpus_dir);
    const std::string echo = config_echo(cfg);

    if (stage == "1") {
        DatasetStats stats = dataset_stats(corpus.train);
        RQVAE<float> vae(cfg, stats, cfg.seed);
        Stage1Result r = train_stage1(vae, corpus.train, cfg.stage1_epochs, cfg.seed, &std::cout);
        if (r.diverged) {
            throw std::runtime_error("stage-1 training diverged; checkpoint not written");
        }
        save_checkpoint(out_dir + "/vae.gtkc", vae_checkpoint(vae, echo));
        std::string tsv = "epoch\tnorm_mse\tl1\tusage\tresets\n";
        for (const Stage1Row& row : r.curve) {
            tsv += std::to_string(row.epoch) + "\t" + cli_detail::fmt(row.norm_mse) + "\t" + cli_detail::fmt(row.l1) +
                   "\t" + cli_detail::fmt(row.usage) + "\t" + std::to_string(row.resets) + "\n";
        }
        tsv += cli_detail::config_footer(cfg);
        atomic_write(out_dir + "/stage1_loss.tsv", tsv);
    } else if (stage == "2") {
        RQVAE<float> vae = cli_detail::load_vae<float>(vae_path);
        if (!config_model_compatible(cfg, vae.cfg)) {
            throw IncompatibleCheckpoint("run config does not match the stage-1 checkpoint model shape");
        }
        Prior<float> prior(cfg, cfg.seed);
        Stage2Result r = train_stage2(prior, vae, corpus.train, corpus.holdout, cfg.stage2_epochs, cfg.seed,
                                      &std::cout);
        if (r.diverged) {
            throw std::runtime_error("stage-2 training diverged; checkpoint not written");
        }
        save_checkpoint(out_dir + "/prior.gtkc", prior_checkpoint(prior, echo));
        std::string tsv = "epoch\tnll\n";
        for (const Stage2Row& row : r.curve) {
            tsv += std::to_string(row.epoch) + "\t" + cli_detail::fmt(row.nll) + "\n";
        }
        if (!corpus.holdout.empty()) {
            tsv += "# holdout_nll " + cli_detail::fmt(r.holdout_nll) + "\n";
        }
        tsv += cli_detail::config_footer(cfg);
        atomic_write(out_dir + "/stage2_loss.tsv", tsv);
    } else if (stage == "feat") {
        FeatureExtractor<float> fx(cfg.seed);
        FeatResult r = train_feat(fx, corpus.train, cfg.feat_epochs, cfg.seed, 16, &std::cout);
        if (r.diverged) {
            throw std::runtime_error("feature-extractor training diverged; checkpoint not written");
        }
        save_checkpoint(out_dir + "/feat.gtkc", feat_checkpoint(fx, echo));
        std::string tsv = "epoch\tmse\n";
        for (const FeatRow& row : r.curve) {
            tsv += std::to_string(row.epoch) + "\t" + cli_detail::fmt(row.mse) + "\n";
        }
        tsv += cli_detail::config_footer(cfg);
        atomic_write(out_dir + "/feat_loss.tsv", tsv);
    } else {
        throw std::invalid_argument("unknown training stage '" + stage + "' (expected 1, 2 or feat)");
    }
}

/// Long-form synthesis from a speech motion file (audio + text required).
inline void cmd_synth(const RunConfig& cfg, const std::string& vae_path, const std::string& prior_path,
                      const std::string& speech_path, const std::string& out_path,
                      const std::string& text_out = "") {
    RQVAE<float> vae = cli_detail::load_vae<float>(vae_path);
    Prior<float> prior = cli_detail::load_prior<float>(prior_path);
    check_compatible(prior, vae);
    MotionSequence speech = resample_20fps(load_motion(speech_path));
    if (!speech.has_audio() || !speech.has_text()) {
        throw InsufficientData("speech input must carry audio and text: " + speech_path);
    }
    MotionSequence out = synthesize_long(prior, vae, speech, cfg.top_k, cfg.seed);
    save_motion(out_path, out);
    atomic_write(out_path + ".config", config_echo(cfg));
    if (!text_out.empty()) {
        atomic_write(text_out, motion_text(out));
    }
    std::cout << "synthesized " << out.frames << " frames (seed " << cfg.seed << ", top_k " << cfg.top_k << ") -> "
              << out_path << "\n";
}

/// All four metrics of a synth directory against a reference directory.
inline MetricReport cmd_eval(const RunConfig& cfg, const std::string& feat_path, const std::string& ref_dir,
                             const std::string& synth_dir, const std::string& out_path) {
    FeatureExtractor<float> fx = cli_detail::load_feat<float>(feat_path);

    auto load_seqs = [](const std::string& dir) {
        std::vector<MotionSequence> seqs;
        for (const std::string& f : cli_detail::motion_files(dir)) {
            seqs.push_back(resample_20fps(load_motion(f)));
        }
        if (seqs.empty()) {
            throw InsufficientData("no .gtkm sequences in " + dir);
        }
        return seqs;
    };
    const std::vector<MotionSequence> ref_seqs = load_seqs(ref_dir);
    const std::vector<MotionSequence> synth_seqs = load_seqs(synth_dir);

    auto clip_features = [&fx](const std::vector<MotionSequence>& seqs, std::int64_t& count) {
        std::vector<std::vector<double>> rows;
        for (const MotionSequence& seq : seqs) {
            for (const GestureClip& clip : extract_windows(seq)) {
                rows.push_back(fx.features(clip));
            }
        }
        count = static_cast<std::int64_t>(rows.size());
        return rows;
    };

    MetricReport rep;
    rep.config_echo = config_echo(cfg);
    std::vector<std::vector<double>> ref_rows = clip_features(ref_seqs, rep.ref_count);
    std::vector<std::vector<double>> synth_rows = clip_features(synth_seqs, rep.synth_count);
    rep.fgd = fgd(fit_gaussian(ref_rows), fit_gaussian(synth_rows));

    double div_total = 0.0;
    std::int64_t div_n = 0;
    double beat_total = 0.0;
    std::int64_t beat_n = 0;
    for (const MotionSequence& seq : synth_seqs) {
        if (seq.frames >= 2 * cfg.diversity_segment) {
            div_total += diversity(seq, cfg.diversity_segment);
            ++div_n;
        }
        rep.kinematic_beats += static_cast<std::int64_t>(kinematic_beat_times(seq).size());
        if (seq.has_audio()) {
            const std::vector<double> beats = detect_audio_beats(seq.audio);
            rep.audio_beats += static_cast<std::int64_t>(beats.size());
            if (!beats.empty()) {
                beat_total += beat_consistency(seq, beats, cfg.beat_sigma);
                ++beat_n;
            }
        }
    }
    if (div_n == 0) {
        throw InsufficientData("no synth sequence is long enough for diversity (needs " +
                               std::to_string(2 * cfg.diversity_segment) + " frames)");
    }
    rep.diversity = div_total / static_cast<double>(div_n);
    rep.beat = beat_n > 0 ? beat_total / static_cast<double>(beat_n) : 0.0;
    if (rep.kinematic_beats == 0) {
        std::cerr << "warning: no kinematic beats detected in the synth set\n";
    }

    const double ref_speed = cli_detail::set_wrist_speed(ref_seqs);
    detail::require(ref_speed > 1e-12, "reference corpus has zero wrist speed");
    rep.wrist_ratio = cli_detail::set_wrist_speed(synth_seqs) / ref_speed;

    atomic_write(out_path, report_text(rep));
    atomic_write(out_path + ".tsv", report_tsv(rep));
    std::cout << report_text(rep);
    return rep;
}

/// Decodes every code's single-token stack to a motion snippet and writes the
/// EMA usage table.
inline void cmd_inspect(const std::string& vae_path, const std::string& out_dir) {
    RQVAE<float> vae = cli_detail::load_vae<float>(vae_path);
    cli_detail::ensure_dir(out_dir);
    const std::int64_t n = vae.cfg.codebook_size;
    const std::int64_t d = vae.cfg.depth;
    for (std::int64_t code = 0; code < n; ++code) {
        // depth-1 slot holds the code, deeper slots stay at the padding index
        std::vector<std::int64_t> tokens(static_cast<std::size_t>(d), n);
        tokens[0] = code;
        Tensor<float> latent = rq_dequantize(vae.params, vae.codebook, tokens, 1, d);
        Tensor<float> pose = vae.decode_latent(latent);
        MotionSequence snippet;
        snippet.frames = pose.dim(0);
        snippet.fps = kFps;
        snippet.pose.resize(static_cast<std::size_t>(pose.numel()));
        std::copy(pose.data(), pose.data() + pose.numel(), snippet.pose.begin());
        char buf[32];
        std::snprintf(buf, sizeof(buf), "code_%03lld.gtkm", static_cast<long long>(code));
        save_motion(out_dir + "/" + std::string(buf), snippet);
    }

    const Tensor<float>& counts = vae.params.value(vae.codebook.count);
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        total += static_cast<double>(counts[i]);
    }
    std::string tsv = "code\tema_count\tshare\n";
    for (std::int64_t i = 0; i < n; ++i) {
        const double c = static_cast<double>(counts[i]);
        tsv += std::to_string(i) + "\t" + cli_detail::fmt(c) + "\t" +
               cli_detail::fmt(total > 0.0 ? c / total : 0.0) + "\n";
    }
    RunConfig ck_cfg;
    config_parse(ck_cfg, load_checkpoint(vae_path).config_text);
    tsv += cli_detail::config_footer(ck_cfg);
    atomic_write(out_dir + "/usage.tsv", tsv);
    std::cout << "wrote " << n << " snippets and usage.tsv -> " << out_dir << "\n";
}

}  // namespace gtok::cli
