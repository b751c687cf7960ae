#include <catch2/catch_amalgamated.hpp>

#include "gtok/synthgest.hpp"

using namespace gtok;
using Catch::Approx;

TEST_CASE("synthgest is deterministic per seed and index") {
    const SynthConfig cfg;
    const SynthSequence a = synth_sequence(cfg, 7, 3);
    const SynthSequence b = synth_sequence(cfg, 7, 3);
    REQUIRE(a.motion.pose == b.motion.pose);
    REQUIRE(a.motion.audio == b.motion.audio);
    REQUIRE(a.motion.text == b.motion.text);
    REQUIRE(a.beat_frames == b.beat_frames);

    const SynthSequence c = synth_sequence(cfg, 7, 4);
    REQUIRE(a.motion.pose != c.motion.pose);
    const SynthSequence d = synth_sequence(cfg, 8, 3);
    REQUIRE(a.motion.pose != d.motion.pose);
}

TEST_CASE("synthgest schedule structure") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 11, 0);
    REQUIRE(s.motion.frames >= cfg.min_frames);
    REQUIRE(s.motion.fps == 20);
    REQUIRE(s.motion.audio.size() == static_cast<std::size_t>(s.motion.frames * kSamplesPerFrame));
    REQUIRE(s.motion.text.size() == static_cast<std::size_t>(s.motion.frames));
    std::int64_t expect_start = 0;
    for (const Occurrence& occ : s.occurrences) {
        REQUIRE(occ.start == expect_start);
        REQUIRE(occ.frames >= cfg.occ_min);
        REQUIRE(occ.frames <= cfg.occ_max);
        REQUIRE(occ.mode >= 0);
        REQUIRE(occ.mode < cfg.modes);
        REQUIRE(occ.hand >= 0);
        REQUIRE(occ.hand <= 2);
        expect_start += occ.frames;
    }
    REQUIRE(expect_start == s.motion.frames);
    REQUIRE(s.beat_frames.size() == s.occurrences.size());
}

TEST_CASE("occurrence boundaries are still frames (identity pose)") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 2, 1);
    for (const Occurrence& occ : s.occurrences) {
        const float* p = s.motion.frame(occ.start);
        for (std::int64_t j = 0; j < skel::kJoints; ++j) {
            REQUIRE(p[j * 6 + 0] == Approx(1.0f));
            REQUIRE(p[j * 6 + 1] == Approx(0.0f).margin(1e-7));
            REQUIRE(p[j * 6 + 4] == Approx(1.0f));
        }
    }
}

TEST_CASE("clicks are loud at occurrence starts and absent mid-gesture") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 5, 2);
    for (const Occurrence& occ : s.occurrences) {
        const std::int64_t s0 = occ.start * kSamplesPerFrame;
        float peak = 0.0f;
        for (std::int64_t i = 0; i < 120; ++i) {
            peak = std::max(peak, std::abs(s.motion.audio[static_cast<std::size_t>(s0 + i)]));
        }
        REQUIRE(peak > 0.5f);
        // mid-occurrence the only content is the tone
        const std::int64_t mid = (occ.start + occ.frames / 2) * kSamplesPerFrame;
        float midpeak = 0.0f;
        for (std::int64_t i = 0; i < 400; ++i) {
            midpeak = std::max(midpeak, std::abs(s.motion.audio[static_cast<std::size_t>(mid + i)]));
        }
        REQUIRE(midpeak <= static_cast<float>(cfg.tone_amp) + 1e-4f);
    }
}

TEST_CASE("word ids mark occurrence onsets, padding elsewhere") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 9, 0);
    for (const Occurrence& occ : s.occurrences) {
        for (std::int64_t f = 0; f < occ.frames; ++f) {
            const std::int32_t id = s.motion.text[static_cast<std::size_t>(occ.start + f)];
            if (f < cfg.word_prefix) {
                REQUIRE(id == occ.mode + 1);
            } else {
                REQUIRE(id == 0);
            }
        }
    }
}

TEST_CASE("one to many: same speech admits several handedness variants") {
    const SynthConfig cfg;
    // corpus-wide: a fixed mode occurs with at least two different hands
    std::vector<int> hands_seen;
    int count = 0;
    for (std::uint64_t idx = 0; idx < 150 && count < 100; ++idx) {
        const SynthSequence s = synth_sequence(cfg, 123, idx);
        for (const Occurrence& occ : s.occurrences) {
            if (occ.mode == 0) {
                ++count;
                if (std::find(hands_seen.begin(), hands_seen.end(), occ.hand) == hands_seen.end()) {
                    hands_seen.push_back(occ.hand);
                }
            }
        }
    }
    REQUIRE(count >= 100);
    REQUIRE(hands_seen.size() >= 2);

    // directly: same schedule, different hands -> identical speech bytes
    std::vector<Occurrence> sched = {{0, 40, 3, 0}, {40, 36, 1, 0}, {76, 44, 3, 0}};
    std::vector<Occurrence> flipped = sched;
    for (Occurrence& o : flipped) {
        o.hand = 2;
    }
    const SynthSequence left = synth_from_schedule(cfg, 55, sched);
    const SynthSequence both = synth_from_schedule(cfg, 55, flipped);
    REQUIRE(left.motion.audio == both.motion.audio);
    REQUIRE(left.motion.text == both.motion.text);
    REQUIRE(left.motion.pose != both.motion.pose);

    // the gated arm barely moves
    const std::vector<double> right_arm = joint_speed(left.motion, {skel::r_elbow, skel::r_wrist});
    const std::vector<double> right_arm_b = joint_speed(both.motion, {skel::r_elbow, skel::r_wrist});
    double sl = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < right_arm.size(); ++i) {
        sl += right_arm[i];
        sb += right_arm_b[i];
    }
    REQUIRE(sl < 0.1 * sb);
}

TEST_CASE("motion speed dips at the beats") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 31, 6);
    const std::vector<double> sp = joint_speed(
        s.motion, {skel::l_shoulder, skel::r_shoulder, skel::l_elbow, skel::r_elbow, skel::l_wrist, skel::r_wrist});
    double beat_speed = 0.0;
    int n = 0;
    for (std::int64_t f : s.beat_frames) {
        if (f >= 1 && f < static_cast<std::int64_t>(sp.size())) {
            beat_speed += sp[static_cast<std::size_t>(f)];
            ++n;
        }
    }
    beat_speed /= std::max(n, 1);
    double mean_speed = 0.0;
    for (double v : sp) {
        mean_speed += v;
    }
    mean_speed /= static_cast<double>(sp.size());
    REQUIRE(beat_speed < 0.2 * mean_speed);
}

TEST_CASE("windows cut from synthgest sequences are training ready") {
    const SynthConfig cfg;
    const SynthSequence s = synth_sequence(cfg, 77, 0);
    const std::vector<GestureClip> clips = extract_windows(s.motion);
    REQUIRE(clips.size() == static_cast<std::size_t>((s.motion.frames - kWindowFrames) / kWindowStep + 1));
    const DatasetStats st = dataset_stats(clips);
    for (float v : st.var) {
        REQUIRE(v >= 1e-6f);
    }
}
