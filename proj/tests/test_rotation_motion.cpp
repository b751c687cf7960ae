#include <catch2/catch_amalgamated.hpp>

#include "gtok/motion.hpp"
#include "gtok/rng.hpp"
#include "gtok/rotation.hpp"

using namespace gtok;
using Catch::Approx;

TEST_CASE("identity rotation encodes to (1,0,0,0,1,0)") {
    const Mat3<double> id = mat3_identity<double>();
    double six[6];
    rot6d_encode(id, six);
    const double want[6] = {1, 0, 0, 0, 1, 0};
    for (int i = 0; i < 6; ++i) {
        REQUIRE(six[i] == want[i]);
    }
}

TEST_CASE("rot6d round trips random rotations") {
    Rng rng(17);
    for (int n = 0; n < 100; ++n) {
        const Mat3<double> r = axis_angle(rng.normal(), rng.normal(), rng.normal(), rng.uniform(-3.0, 3.0));
        REQUIRE(is_rotation(r, 1e-9));
        double six[6];
        rot6d_encode(r, six);
        const Mat3<double> back = rot6d_decode(six);
        for (int i = 0; i < 9; ++i) {
            REQUIRE(back[static_cast<std::size_t>(i)] == Approx(r[static_cast<std::size_t>(i)]).margin(1e-9));
        }
    }
}

TEST_CASE("rot6d decode always yields a proper rotation") {
    Rng rng(23);
    for (int n = 0; n < 200; ++n) {
        double six[6];
        for (double& v : six) {
            v = rng.uniform(-2.0, 2.0);
        }
        const Mat3<double> r = rot6d_decode(six);
        REQUIRE(is_rotation(r, 1e-6));
        REQUIRE(mat3_det(r) == Approx(1.0).margin(1e-6));
    }
    // degenerate inputs fall back deterministically
    const double zeros[6] = {0, 0, 0, 0, 0, 0};
    REQUIRE(is_rotation(rot6d_decode(zeros), 1e-6));
    const double parallel[6] = {1, 0, 0, 2, 0, 0};
    REQUIRE(is_rotation(rot6d_decode(parallel), 1e-6));
}

TEST_CASE("mat3 utilities") {
    const Mat3<double> a = axis_angle(0.0, 0.0, 1.0, 1.1);
    const Mat3<double> b = axis_angle(0.0, 0.0, 1.0, -1.1);
    const Mat3<double> c = mat3_mul(a, b);
    const Mat3<double> id = mat3_identity<double>();
    for (int i = 0; i < 9; ++i) {
        REQUIRE(c[static_cast<std::size_t>(i)] == Approx(id[static_cast<std::size_t>(i)]).margin(1e-12));
    }
    REQUIRE(mat3_det(a) == Approx(1.0));
    REQUIRE(mat3_transpose(a)[1] == Approx(a[3]));
}

namespace {

MotionSequence random_motion(Rng& rng, std::int64_t frames, int fps, bool speech) {
    MotionSequence seq;
    seq.frames = frames;
    seq.fps = fps;
    seq.pose.resize(static_cast<std::size_t>(frames * skel::kPoseDims));
    for (std::int64_t f = 0; f < frames; ++f) {
        for (std::int64_t j = 0; j < skel::kJoints; ++j) {
            const Mat3<float> r = axis_angle(static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                                             static_cast<float>(rng.normal()), static_cast<float>(rng.uniform(-1, 1)));
            rot6d_encode(r, seq.frame(f) + j * 6);
        }
    }
    if (speech) {
        seq.audio.resize(static_cast<std::size_t>(frames * (kAudioRate / fps)));
        for (float& v : seq.audio) {
            v = static_cast<float>(rng.uniform(-0.5, 0.5));
        }
        seq.text.resize(static_cast<std::size_t>(frames));
        for (auto& v : seq.text) {
            v = static_cast<std::int32_t>(rng.uniform_int(5));
        }
    }
    return seq;
}

}  // namespace

TEST_CASE("resample 40 fps halves the frame count and keeps even frames") {
    Rng rng(5);
    const MotionSequence src = random_motion(rng, 128, 40, false);
    const MotionSequence out = resample_20fps(src);
    REQUIRE(out.frames == 64);
    REQUIRE(out.fps == 20);
    for (std::int64_t f = 0; f < out.frames; ++f) {
        for (std::int64_t d = 0; d < skel::kPoseDims; ++d) {
            REQUIRE(out.frame(f)[d] == Approx(src.frame(2 * f)[d]).margin(2e-5));
        }
    }
}

TEST_CASE("resample 30 fps to 20 fps gives two thirds of the frames") {
    Rng rng(6);
    const MotionSequence src = random_motion(rng, 90, 30, false);
    const MotionSequence out = resample_20fps(src);
    REQUIRE(out.frames == 60);
    // every interpolated frame decodes to proper rotations
    for (std::int64_t f = 0; f < out.frames; ++f) {
        for (std::int64_t j = 0; j < skel::kJoints; ++j) {
            float six[6];
            std::copy(out.frame(f) + j * 6, out.frame(f) + j * 6 + 6, six);
            REQUIRE(is_rotation(rot6d_decode(six), 1e-3f));
        }
    }
}

TEST_CASE("resample at 20 fps is a no-op") {
    Rng rng(7);
    const MotionSequence src = random_motion(rng, 70, 20, true);
    const MotionSequence out = resample_20fps(src);
    REQUIRE(out.pose == src.pose);
    REQUIRE(out.audio == src.audio);
    REQUIRE(out.text == src.text);
}

TEST_CASE("window extraction counts and alignment") {
    Rng rng(8);
    REQUIRE(extract_windows(random_motion(rng, 63, 20, false)).empty());
    REQUIRE(extract_windows(random_motion(rng, 64, 20, false)).size() == 1);

    const MotionSequence seq74 = random_motion(rng, 74, 20, true);
    const std::vector<GestureClip> clips = extract_windows(seq74);
    REQUIRE(clips.size() == 2);
    for (std::size_t w = 0; w < clips.size(); ++w) {
        const std::int64_t f0 = static_cast<std::int64_t>(w) * kWindowStep;
        for (std::int64_t f = 0; f < kWindowFrames; ++f) {
            for (std::int64_t d = 0; d < skel::kPoseDims; ++d) {
                REQUIRE(clips[w].pose[static_cast<std::size_t>(f * skel::kPoseDims + d)] ==
                        seq74.frame(f0 + f)[d]);
            }
            REQUIRE(clips[w].text[static_cast<std::size_t>(f)] == seq74.text[static_cast<std::size_t>(f0 + f)]);
        }
        REQUIRE(clips[w].audio.size() == static_cast<std::size_t>(kWindowSamples));
        REQUIRE(clips[w].audio[0] == seq74.audio[static_cast<std::size_t>(f0 * kSamplesPerFrame)]);
    }

    const MotionSequence seq150 = random_motion(rng, 150, 20, false);
    REQUIRE(extract_windows(seq150).size() == static_cast<std::size_t>((150 - 64) / 10 + 1));
}

TEST_CASE("dataset stats: alternating channel, variance floor, rejection") {
    GestureClip a, b;
    a.pose.assign(static_cast<std::size_t>(kWindowFrames * skel::kPoseDims), 0.0f);
    b.pose.assign(static_cast<std::size_t>(kWindowFrames * skel::kPoseDims), 0.0f);
    for (std::int64_t f = 0; f < kWindowFrames; ++f) {
        // channel 0 alternates 0/2; channel 1 constant 5
        a.pose[static_cast<std::size_t>(f * skel::kPoseDims)] = (f % 2 == 0) ? 0.0f : 2.0f;
        b.pose[static_cast<std::size_t>(f * skel::kPoseDims)] = (f % 2 == 0) ? 0.0f : 2.0f;
        a.pose[static_cast<std::size_t>(f * skel::kPoseDims + 1)] = 5.0f;
        b.pose[static_cast<std::size_t>(f * skel::kPoseDims + 1)] = 5.0f;
    }
    const DatasetStats st = dataset_stats({a, b});
    REQUIRE(st.mean.size() == 126);
    REQUIRE(st.mean[0] == Approx(1.0f));
    REQUIRE(st.var[0] == Approx(1.0f));
    REQUIRE(st.mean[1] == Approx(5.0f));
    REQUIRE(st.var[1] == Approx(1e-6f));
    REQUIRE_THROWS_AS(dataset_stats({a}), std::invalid_argument);
}

TEST_CASE("joint speed is zero for a frozen sequence") {
    MotionSequence seq;
    seq.frames = 10;
    seq.fps = 20;
    seq.pose.assign(static_cast<std::size_t>(10 * skel::kPoseDims), 0.25f);
    const std::vector<double> sp = joint_speed(seq, {skel::l_wrist, skel::r_wrist});
    REQUIRE(sp.size() == 9);
    for (double v : sp) {
        REQUIRE(v == 0.0);
    }
}
