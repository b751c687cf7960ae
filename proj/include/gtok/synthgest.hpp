#pragma once

#include <cstdint>
#include <vector>

#include "gtok/motion.hpp"
#include "gtok/rng.hpp"
#include "gtok/rotation.hpp"

namespace gtok {

/// SynthGest: a synthetic co-speech corpus with known ground truth. A
/// sequence is a run of gesture occurrences. Each occurrence picks a mode
/// (shared sinusoid style, audible pitch, word id) and a hidden handedness
/// (left / right / both) that gates the arm joints but leaves the speech
/// untouched, so one speech input maps to several valid motions. Every
/// occurrence starts with a loud click and ramps its motion with a sin^2
/// envelope, which puts a kinematic speed dip exactly at the click.
struct SynthConfig {
    std::int64_t modes = 8;
    std::int64_t min_frames = 256;   // grow the schedule until this length
    std::int64_t occ_min = 30;       // occurrence length range, frames
    std::int64_t occ_max = 50;
    std::int64_t word_prefix = 10;   // frames carrying the word id
    double click_amp = 0.85;
    double tone_amp = 0.3;
};

struct Occurrence {
    std::int64_t start = 0;
    std::int64_t frames = 0;
    int mode = 0;
    int hand = 0;  // 0 left, 1 right, 2 both
};

struct SynthSequence {
    MotionSequence motion;
    std::vector<Occurrence> occurrences;
    std::vector<std::int64_t> beat_frames;  // occurrence starts
};

namespace synth_detail {

struct ModeParams {
    struct JointWave {
        float axis[3];
        float freq;
        float amp;
        float phase;
    };
    std::vector<JointWave> waves;  // per joint
    double pitch;
};

inline ModeParams mode_params(std::uint64_t corpus_seed, std::int64_t modes, int mode) {
    Rng rng = substream(corpus_seed, "synthgest.mode", static_cast<std::uint64_t>(mode));
    ModeParams p;
    p.waves.resize(static_cast<std::size_t>(skel::kJoints));
    for (std::int64_t j = 0; j < skel::kJoints; ++j) {
        auto& w = p.waves[static_cast<std::size_t>(j)];
        double n = 0.0;
        for (int c = 0; c < 3; ++c) {
            w.axis[c] = static_cast<float>(rng.normal());
            n += static_cast<double>(w.axis[c]) * w.axis[c];
        }
        if (n < 1e-9) {
            w.axis[0] = 1.0f;
        }
        w.freq = static_cast<float>(rng.uniform(0.4, 0.9));
        const bool arm = j >= skel::l_clavicle;
        w.amp = static_cast<float>(arm ? rng.uniform(0.4, 0.9) : rng.uniform(0.05, 0.2));
        w.phase = static_cast<float>(rng.uniform(0.0, 6.283185307179586));
    }
    p.pitch = 220.0 * std::pow(2.0, 2.0 * mode / static_cast<double>(modes));
    return p;
}

}  // namespace synth_detail

/// Renders a fixed occurrence schedule. The speech tracks (audio, text) do
/// not read the handedness bits, so two schedules differing only in hands
/// produce identical speech with different motion.
inline SynthSequence synth_from_schedule(const SynthConfig& cfg, std::uint64_t corpus_seed,
                                         std::vector<Occurrence> schedule) {
    detail::require(cfg.modes >= 2 && !schedule.empty(), "synthgest: bad schedule");
    std::vector<synth_detail::ModeParams> modes;
    modes.reserve(static_cast<std::size_t>(cfg.modes));
    for (int m = 0; m < cfg.modes; ++m) {
        modes.push_back(synth_detail::mode_params(corpus_seed, cfg.modes, m));
    }

    SynthSequence out;
    std::int64_t total = 0;
    for (Occurrence& occ : schedule) {
        detail::require(occ.start == total && occ.frames >= 4 && occ.mode >= 0 && occ.mode < cfg.modes &&
                            occ.hand >= 0 && occ.hand <= 2,
                        "synthgest: inconsistent schedule");
        out.beat_frames.push_back(occ.start);
        total += occ.frames;
    }
    out.occurrences = std::move(schedule);

    MotionSequence& seq = out.motion;
    seq.frames = total;
    seq.fps = kFps;
    seq.pose.assign(static_cast<std::size_t>(total * skel::kPoseDims), 0.0f);
    seq.audio.assign(static_cast<std::size_t>(total * kSamplesPerFrame), 0.0f);
    seq.text.assign(static_cast<std::size_t>(total), 0);

    for (const Occurrence& occ : out.occurrences) {
        const synth_detail::ModeParams& mp = modes[static_cast<std::size_t>(occ.mode)];
        for (std::int64_t i = 0; i < occ.frames; ++i) {
            const std::int64_t f = occ.start + i;
            const double prog = static_cast<double>(i) / static_cast<double>(occ.frames - 1);
            const double env = std::pow(std::sin(3.141592653589793 * prog), 2.0);
            float* dst = seq.frame(f);
            for (std::int64_t j = 0; j < skel::kJoints; ++j) {
                const auto& w = mp.waves[static_cast<std::size_t>(j)];
                double gate = 1.0;
                if (j >= skel::kLeftArmFirst && j <= skel::kLeftArmLast && occ.hand == 1) {
                    gate = 0.05;
                }
                if (j >= skel::kRightArmFirst && j <= skel::kRightArmLast && occ.hand == 0) {
                    gate = 0.05;
                }
                const double theta =
                    gate * w.amp * env * std::sin(6.283185307179586 * w.freq * prog + w.phase);
                const Mat3<float> r = axis_angle(w.axis[0], w.axis[1], w.axis[2], static_cast<float>(theta));
                rot6d_encode(r, dst + j * 6);
            }
        }
        // tone with the same envelope as the motion
        const std::int64_t s0 = occ.start * kSamplesPerFrame;
        const std::int64_t ns = occ.frames * kSamplesPerFrame;
        for (std::int64_t s = 0; s < ns; ++s) {
            const double prog = static_cast<double>(s) / static_cast<double>(ns - 1);
            const double env = std::pow(std::sin(3.141592653589793 * prog), 2.0);
            const double ts = static_cast<double>(s0 + s) / kAudioRate;
            seq.audio[static_cast<std::size_t>(s0 + s)] +=
                static_cast<float>(cfg.tone_amp * env * std::sin(6.283185307179586 * mp.pitch * ts));
        }
        // click at the occurrence start: fast-decaying high ping
        for (std::int64_t s = 0; s < 120 && s0 + s < static_cast<std::int64_t>(seq.audio.size()); ++s) {
            const double ts = static_cast<double>(s) / kAudioRate;
            seq.audio[static_cast<std::size_t>(s0 + s)] += static_cast<float>(
                cfg.click_amp * std::exp(-static_cast<double>(s) / 40.0) * std::cos(6.283185307179586 * 1800.0 * ts));
        }
        // word id on the onset prefix
        const std::int64_t wend = std::min(occ.start + cfg.word_prefix, occ.start + occ.frames);
        for (std::int64_t f = occ.start; f < wend; ++f) {
            seq.text[static_cast<std::size_t>(f)] = static_cast<std::int32_t>(occ.mode + 1);
        }
    }
    return out;
}

/// Draws a random occurrence schedule long enough to cover min_frames.
inline std::vector<Occurrence> synth_schedule(const SynthConfig& cfg, std::uint64_t corpus_seed, std::uint64_t index) {
    detail::require(cfg.occ_min >= 4 && cfg.occ_max >= cfg.occ_min && cfg.min_frames >= cfg.occ_min,
                    "synthgest: bad config");
    Rng rng = substream(corpus_seed, "synthgest.seq", index);
    std::vector<Occurrence> schedule;
    std::int64_t total = 0;
    while (total < cfg.min_frames) {
        Occurrence occ;
        occ.start = total;
        occ.mode = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(cfg.modes)));
        occ.frames = cfg.occ_min + static_cast<std::int64_t>(
                                       rng.uniform_int(static_cast<std::uint64_t>(cfg.occ_max - cfg.occ_min + 1)));
        occ.hand = static_cast<int>(rng.uniform_int(3));
        schedule.push_back(occ);
        total += occ.frames;
    }
    return schedule;
}

/// Deterministic per (seed, index): the same arguments always produce the
/// same sequence, bit for bit.
inline SynthSequence synth_sequence(const SynthConfig& cfg, std::uint64_t corpus_seed, std::uint64_t index) {
    return synth_from_schedule(cfg, corpus_seed, synth_schedule(cfg, corpus_seed, index));
}

/// Frame-level beat times in seconds.
inline std::vector<double> beat_times(const SynthSequence& s) {
    std::vector<double> t;
    t.reserve(s.beat_frames.size());
    for (std::int64_t f : s.beat_frames) {
        t.push_back(static_cast<double>(f) / kFps);
    }
    return t;
}

}  // namespace gtok
