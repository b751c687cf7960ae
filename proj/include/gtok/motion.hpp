#pragma once

#include <cstdint>
#include <vector>

#include "gtok/rotation.hpp"
#include "gtok/tensor.hpp"

namespace gtok {

/// Upper-body rig: 21 joints, each a 6D rotation, 126 pose channels.
namespace skel {
inline constexpr std::int64_t kJoints = 21;
inline constexpr std::int64_t kRotDims = 6;
inline constexpr std::int64_t kPoseDims = kJoints * kRotDims;  // 126

enum Joint : std::int64_t {
    pelvis = 0,
    spine1,
    spine2,
    spine3,
    neck,
    head,
    jaw,
    l_clavicle,
    l_shoulder,
    l_upperarm,
    l_elbow,
    l_forearm,
    l_wrist,
    l_hand,
    r_clavicle,
    r_shoulder,
    r_upperarm,
    r_elbow,
    r_forearm,
    r_wrist,
    r_hand,
};

inline constexpr std::int64_t kShoulders[2] = {l_shoulder, r_shoulder};
inline constexpr std::int64_t kElbows[2] = {l_elbow, r_elbow};
inline constexpr std::int64_t kWrists[2] = {l_wrist, r_wrist};
inline constexpr std::int64_t kLeftArmFirst = l_clavicle;
inline constexpr std::int64_t kLeftArmLast = l_hand;
inline constexpr std::int64_t kRightArmFirst = r_clavicle;
inline constexpr std::int64_t kRightArmLast = r_hand;

inline const char* joint_name(std::int64_t j) {
    static const char* names[kJoints] = {
        "pelvis",     "spine1",    "spine2",    "spine3",    "neck",    "head",       "jaw",
        "l_clavicle", "l_shoulder", "l_upperarm", "l_elbow", "l_forearm", "l_wrist",  "l_hand",
        "r_clavicle", "r_shoulder", "r_upperarm", "r_elbow", "r_forearm", "r_wrist",  "r_hand"};
    return names[j];
}
}  // namespace skel

inline constexpr int kFps = 20;
inline constexpr std::int64_t kAudioRate = 16000;
inline constexpr std::int64_t kSamplesPerFrame = kAudioRate / kFps;  // 800
inline constexpr std::int64_t kWindowFrames = 64;
inline constexpr std::int64_t kWindowStep = 10;
inline constexpr std::int64_t kWindowSamples = kWindowFrames * kSamplesPerFrame;  // 51200

/// A motion sequence at some fps with optional aligned speech. Audio is raw
/// 16 kHz mono; text is one word id per frame, 0 meaning padding.
struct MotionSequence {
    std::int64_t frames = 0;
    int fps = kFps;
    std::vector<float> pose;          // frames * 126, frame major
    std::vector<float> audio;         // frames * samples-per-frame when present
    std::vector<std::int32_t> text;   // frames entries when present

    bool has_audio() const { return !audio.empty(); }
    bool has_text() const { return !text.empty(); }

    float* frame(std::int64_t f) { return pose.data() + f * skel::kPoseDims; }
    const float* frame(std::int64_t f) const { return pose.data() + f * skel::kPoseDims; }
};

/// One 64-frame training window with its aligned speech.
struct GestureClip {
    std::vector<float> pose;         // 64 * 126
    std::vector<float> audio;        // 51200
    std::vector<std::int32_t> text;  // 64
};

struct DatasetStats {
    std::vector<float> mean;  // 126
    std::vector<float> var;   // 126, floored at 1e-6
};

inline void validate_sequence(const MotionSequence& seq) {
    detail::require(seq.frames >= 1, "motion: empty sequence");
    detail::require(static_cast<std::int64_t>(seq.pose.size()) == seq.frames * skel::kPoseDims,
                    "motion: pose size " + std::to_string(seq.pose.size()) + " does not match " +
                        std::to_string(seq.frames) + " frames");
    detail::require(seq.fps >= 1, "motion: bad fps");
    if (seq.has_audio()) {
        const std::int64_t per = kAudioRate / seq.fps;
        detail::require(static_cast<std::int64_t>(seq.audio.size()) == seq.frames * per,
                        "motion: audio size does not match frame count");
    }
    if (seq.has_text()) {
        detail::require(static_cast<std::int64_t>(seq.text.size()) == seq.frames,
                        "motion: text size does not match frame count");
    }
}

/// Resamples to 20 fps: linear interpolation of the 6D values, then
/// re-orthonormalization through decode/encode. Audio and text are carried
/// by nearest-frame mapping (audio is only defined for integer sample
/// ratios, which the generator always produces).
inline MotionSequence resample_20fps(const MotionSequence& src) {
    validate_sequence(src);
    if (src.fps == kFps) {
        return src;
    }
    MotionSequence out;
    out.fps = kFps;
    out.frames = (src.frames - 1) * kFps / src.fps + 1;
    out.pose.assign(static_cast<std::size_t>(out.frames * skel::kPoseDims), 0.0f);
    for (std::int64_t f = 0; f < out.frames; ++f) {
        const double srcpos = static_cast<double>(f) * src.fps / kFps;
        const std::int64_t i0 = static_cast<std::int64_t>(srcpos);
        const std::int64_t i1 = std::min(i0 + 1, src.frames - 1);
        const float a = static_cast<float>(srcpos - static_cast<double>(i0));
        const float* p0 = src.frame(i0);
        const float* p1 = src.frame(i1);
        float* dst = out.frame(f);
        for (std::int64_t j = 0; j < skel::kJoints; ++j) {
            float six[6];
            for (int c = 0; c < 6; ++c) {
                six[c] = (1.0f - a) * p0[j * 6 + c] + a * p1[j * 6 + c];
            }
            const Mat3<float> r = rot6d_decode(six);
            rot6d_encode(r, dst + j * 6);
        }
    }
    if (src.has_text()) {
        out.text.resize(static_cast<std::size_t>(out.frames));
        for (std::int64_t f = 0; f < out.frames; ++f) {
            const std::int64_t i = std::min(f * src.fps / kFps, src.frames - 1);
            out.text[static_cast<std::size_t>(f)] = src.text[static_cast<std::size_t>(i)];
        }
    }
    if (src.has_audio()) {
        // audio is wall-clock; keep the samples covering the resampled span
        out.audio.assign(src.audio.begin(),
                         src.audio.begin() + std::min<std::size_t>(src.audio.size(),
                                                                   static_cast<std::size_t>(out.frames * kSamplesPerFrame)));
        out.audio.resize(static_cast<std::size_t>(out.frames * kSamplesPerFrame), 0.0f);
    }
    return out;
}

/// All 64-frame windows at a 10-frame hop: offsets 0, 10, 20, ...
/// A sequence shorter than one window yields nothing.
inline std::vector<GestureClip> extract_windows(const MotionSequence& seq) {
    validate_sequence(seq);
    detail::require(seq.fps == kFps, "extract_windows: sequence must be 20 fps");
    std::vector<GestureClip> clips;
    if (seq.frames < kWindowFrames) {
        return clips;
    }
    const std::int64_t count = (seq.frames - kWindowFrames) / kWindowStep + 1;
    clips.reserve(static_cast<std::size_t>(count));
    for (std::int64_t w = 0; w < count; ++w) {
        const std::int64_t f0 = w * kWindowStep;
        GestureClip clip;
        clip.pose.assign(seq.pose.begin() + f0 * skel::kPoseDims,
                         seq.pose.begin() + (f0 + kWindowFrames) * skel::kPoseDims);
        if (seq.has_audio()) {
            clip.audio.assign(seq.audio.begin() + f0 * kSamplesPerFrame,
                              seq.audio.begin() + (f0 + kWindowFrames) * kSamplesPerFrame);
        } else {
            clip.audio.assign(static_cast<std::size_t>(kWindowSamples), 0.0f);
        }
        if (seq.has_text()) {
            clip.text.assign(seq.text.begin() + f0, seq.text.begin() + f0 + kWindowFrames);
        } else {
            clip.text.assign(static_cast<std::size_t>(kWindowFrames), 0);
        }
        clips.push_back(std::move(clip));
    }
    return clips;
}

/// Per-channel mean and population variance over all frames of all clips,
/// variance floored at 1e-6.
inline DatasetStats dataset_stats(const std::vector<GestureClip>& clips) {
    detail::require(clips.size() >= 2, "dataset_stats: need at least 2 clips, got " + std::to_string(clips.size()));
    DatasetStats st;
    st.mean.assign(static_cast<std::size_t>(skel::kPoseDims), 0.0f);
    st.var.assign(static_cast<std::size_t>(skel::kPoseDims), 0.0f);
    std::vector<double> sum(static_cast<std::size_t>(skel::kPoseDims), 0.0);
    std::vector<double> sq(static_cast<std::size_t>(skel::kPoseDims), 0.0);
    std::int64_t n = 0;
    for (const GestureClip& c : clips) {
        for (std::int64_t f = 0; f < kWindowFrames; ++f) {
            const float* row = c.pose.data() + f * skel::kPoseDims;
            for (std::int64_t d = 0; d < skel::kPoseDims; ++d) {
                sum[static_cast<std::size_t>(d)] += row[d];
                sq[static_cast<std::size_t>(d)] += static_cast<double>(row[d]) * row[d];
            }
        }
        n += kWindowFrames;
    }
    for (std::int64_t d = 0; d < skel::kPoseDims; ++d) {
        const double m = sum[static_cast<std::size_t>(d)] / static_cast<double>(n);
        const double v = sq[static_cast<std::size_t>(d)] / static_cast<double>(n) - m * m;
        st.mean[static_cast<std::size_t>(d)] = static_cast<float>(m);
        st.var[static_cast<std::size_t>(d)] = static_cast<float>(std::max(v, 1e-6));
    }
    return st;
}

/// Summed angular speed proxy at each frame: mean absolute frame-to-frame
/// delta of the 6D values over the given joints. frames-1 entries.
inline std::vector<double> joint_speed(const MotionSequence& seq, const std::vector<std::int64_t>& joints) {
    std::vector<double> speed;
    if (seq.frames < 2) {
        return speed;
    }
    speed.resize(static_cast<std::size_t>(seq.frames - 1), 0.0);
    for (std::int64_t f = 0; f + 1 < seq.frames; ++f) {
        const float* a = seq.frame(f);
        const float* b = seq.frame(f + 1);
        double acc = 0.0;
        for (std::int64_t j : joints) {
            for (int c = 0; c < 6; ++c) {
                acc += std::abs(static_cast<double>(b[j * 6 + c]) - a[j * 6 + c]);
            }
        }
        speed[static_cast<std::size_t>(f)] = acc / (6.0 * static_cast<double>(joints.size()));
    }
    return speed;
}

}  // namespace gtok
