// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "scenetone/ascv.hpp"
#include "scenetone/audio_features.hpp"
#include "scenetone/error.hpp"
#include "scenetone/image_io.hpp"
#include "scenetone/pipeline.hpp"
#include "scenetone/synth.hpp"
#include "scenetone/wav.hpp"

using namespace scenetone;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("scenetone_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

synth::AudioParams constant_tone(double level) {
    synth::AudioParams p;
    p.tones = {220.0, 330.0};
    p.envelope = {{0.0, level}, {1.0, level}};
    return p;
}

pipeline::EditInputs scene_inputs() {
    const auto scene = synth::synth_scene({}, 7);
    synth::AudioParams target;
    target.tones = {880.0, 1320.0, 1760.0};
    target.envelope = {{0.0, 0.1}, {0.5, 0.1}, {0.5, 0.4}, {1.0, 0.4}};
    return {scene.video, synth::synth_audio(constant_tone(0.3), 1), synth::synth_audio(target, 2), scene.mask};
}

}  // namespace

TEST(SynthScene, ZeroVelocityGivesIdenticalFramesWithoutDrift) {
    synth::SceneParams p;
    p.vx = 0;
    p.drift = 0.0;
    const auto s = synth::synth_scene(p, 3);
    for (std::size_t n = 1; n < p.frames; ++n) {
        EXPECT_TRUE(std::equal(s.video.values.plane(n, 0).begin(), s.video.values.plane(n, 0).end(),
                               s.video.values.plane(0, 0).begin()));
    }
}

TEST(SynthScene, MaskMatchesSquare) {
    const synth::SceneParams p;
    const auto s = synth::synth_scene(p, 3);
    EXPECT_EQ(s.mask.count(), p.square * p.square * p.frames);
    for (std::size_t n = 0; n < p.frames; ++n)
        for (std::size_t y = 0; y < p.height; ++y)
            for (std::size_t x = 0; x < p.width; ++x) {
                const long lx = static_cast<long>(x) - (p.x0 + p.vx * static_cast<long>(n));
                const long ly = static_cast<long>(y) - p.y0;
                const bool inside = lx >= 0 && ly >= 0 && lx < 16 && ly < 16;
                ASSERT_EQ(s.mask.at(n, y, x), inside);
            }
}

TEST(SynthScene, SeedDeterminism) {
    const auto a = synth::synth_scene({}, 11);
    const auto b = synth::synth_scene({}, 11);
    const auto c = synth::synth_scene({}, 12);
    EXPECT_EQ(a.video, b.video);
    EXPECT_EQ(a.mask, b.mask);
    EXPECT_NE(a.video, c.video);
    synth::SceneParams off;
    off.x0 = 20;
    EXPECT_THROW(synth::synth_scene(off, 1), InvalidArgument);
}

TEST(SynthAudio, ConstantEnvelopeIsUniform) {
    auto p = constant_tone(0.5);
    p.tones = {200.0, 400.0};  // whole periods in each 1/8 s chunk
    const auto clip = synth::synth_audio(p, 4);
    const auto env = audio::magnitude_envelope(clip, 8);
    for (double w : env.weights) {
        EXPECT_NEAR(w, 1.0, 1e-6);
    }
}

TEST(SynthAudio, LouderSecondHalfGetsLargerWeights) {
    synth::AudioParams p = constant_tone(0.2);
    p.tones = {200.0, 400.0};
    p.envelope = {{0.0, 0.2}, {0.5, 0.2}, {0.5, 0.4}, {1.0, 0.4}};
    const auto clip = synth::synth_audio(p, 5);
    audio::EnvelopeOptions raw;
    raw.rescale_mean_one = false;
    const auto env = audio::magnitude_envelope(clip, 8, raw);
    // Chunk means follow the envelope: the second half averages twice the first.
    const auto means = audio::chunk_magnitudes(clip, 8);
    EXPECT_NEAR(means[6] / means[1], 2.0, 1e-6);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 4; j < 8; ++j)
            EXPECT_GT(env.weights[j], env.weights[i]);
}

TEST(SynthAudio, SilenceIsUniform) {
    const auto clip = synth::synth_audio(constant_tone(0.0), 6);
    audio::EnvelopeOptions raw;
    raw.rescale_mean_one = false;
    for (double w : audio::magnitude_envelope(clip, 8, raw).weights) {
        EXPECT_EQ(w, 0.125);
    }
}

TEST(SynthAudio, EnvelopeInterpolation) {
    const std::vector<synth::EnvelopeKnot> knots{{0.0, 0.0}, {0.5, 1.0}, {1.0, 0.5}};
    EXPECT_EQ(synth::envelope_at(knots, -1.0), 0.0);
    EXPECT_NEAR(synth::envelope_at(knots, 0.25), 0.5, 1e-15);
    EXPECT_NEAR(synth::envelope_at(knots, 0.75), 0.75, 1e-15);
    EXPECT_EQ(synth::envelope_at(knots, 2.0), 0.5);
}

TEST(Edit, MismatchedMaskFailsBeforeCompute) {
    auto in = scene_inputs();
    in.mask = cond::ForegroundMask(7, 32, 32);
    int calls = 0;
    EXPECT_THROW(pipeline::edit(in, {}, [&](const std::string&, int, double) { ++calls; }), InvalidArgument);
    EXPECT_EQ(calls, 0);
}

TEST(Edit, ForegroundPreservedAgainstReconstruction) {
    const auto in = scene_inputs();
    pipeline::EditConfig config;
    config.seed = 3;
    config.finetune_steps = 60;
    const auto prepared = pipeline::prepare(in, config);
    const auto recon = pipeline::sample(prepared, in, in.source_audio, cond::MechanismFlags::none());

    auto fg_mae = [&](const PixelVideo& v) {
        double acc = 0.0;
        std::size_t count = 0;
        for (std::size_t n = 0; n < v.frames(); ++n)
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = 0; y < v.height(); ++y)
                    for (std::size_t x = 0; x < v.width(); ++x)
                        if (in.mask.at(n, y, x)) {
                            acc += std::abs(v.values(n, c, y, x) - recon.edited.values(n, c, y, x));
                            ++count;
                        }
        return acc / static_cast<double>(count);
    };

    auto bypassed = cond::MechanismFlags::all();
    bypassed.freqfuse = false;
    const auto edited = pipeline::sample(prepared, in, in.target_audio, bypassed);
    EXPECT_LE(fg_mae(edited.edited), 1e-3);

    // The Frequency Fuser is a global operator; its foreground leak stays bounded.
    const auto fused = pipeline::sample(prepared, in, in.target_audio, cond::MechanismFlags::all());
    EXPECT_LT(fg_mae(fused.edited), 1e-2);
}

TEST(Config, UnknownKeyIsRejected) {
    nlohmann::json j{{"seed", 4}, {"ddim_stepz", 3}};
    EXPECT_THROW(pipeline::request_from_json(j), InvalidArgument);
    nlohmann::json wrong_type{{"seed", "four"}};
    EXPECT_THROW(pipeline::request_from_json(wrong_type), InvalidArgument);
}

TEST(Config, RoundTripsThroughJson) {
    nlohmann::json j{{"source_video", "v"}, {"source_audio", "a.wav"}, {"target_audio", "b.wav"},
                     {"mask", "m"},         {"output_dir", "o"},       {"seed", 9},
                     {"ddim_steps", 10},    {"tau", 0.5},              {"freqfuse", false}};
    const auto r = pipeline::request_from_json(j, "/base");
    EXPECT_EQ(r.source_video, fs::path("/base/v"));
    EXPECT_EQ(r.config.seed, 9u);
    EXPECT_EQ(r.config.ddim_steps, 10);
    EXPECT_EQ(r.config.tau, 0.5);
    EXPECT_FALSE(r.config.flags.freqfuse);
    EXPECT_TRUE(r.config.flags.tasi);
    const auto again = pipeline::request_from_json(pipeline::to_json(r));
    EXPECT_EQ(pipeline::to_json(again), pipeline::to_json(r));
}

TEST(Ablation, HashDependsOnInputsAndSeed) {
    const auto in = scene_inputs();
    EXPECT_EQ(pipeline::input_hash(in, 3), pipeline::input_hash(in, 3));
    EXPECT_NE(pipeline::input_hash(in, 3), pipeline::input_hash(in, 4));
    auto other = in;
    other.target_audio.samples[10] += 1e-3;
    EXPECT_NE(pipeline::input_hash(in, 3), pipeline::input_hash(other, 3));
    EXPECT_EQ(pipeline::input_hash(in, 3).size(), 16u);
}

TEST(Ascv, HeaderLayoutIsBitExact) {
    const std::vector<std::uint64_t> dims{2, 3};
    const std::vector<double> values{1.0, -2.5, 0.0, 3.25, 1e-300, -0.0};
    const auto bytes = ascv::encode(dims, values);
    ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 8 + 4 + 6 * 8);
    EXPECT_EQ(std::memcmp(bytes.data(), "ASCV", 4), 0);
    auto u32 = [&](std::size_t at) {
        return static_cast<std::uint32_t>(bytes[at]) | static_cast<std::uint32_t>(bytes[at + 1]) << 8 |
               static_cast<std::uint32_t>(bytes[at + 2]) << 16 | static_cast<std::uint32_t>(bytes[at + 3]) << 24;
    };
    EXPECT_EQ(u32(4), 1u);
    EXPECT_EQ(u32(8), 2u);
    EXPECT_EQ(bytes[12], 2);
    EXPECT_EQ(bytes[20], 3);
    EXPECT_EQ(u32(28), 1u);
    // 1.0 is 0x3FF0000000000000, little-endian.
    EXPECT_EQ(bytes[32 + 7], 0x3F);
    EXPECT_EQ(bytes[32 + 6], 0xF0);

    const auto back = ascv::decode(bytes);
    EXPECT_EQ(back.dims, dims);
    ASSERT_EQ(back.values.size(), values.size());
    EXPECT_EQ(std::memcmp(back.values.data(), values.data(), values.size() * sizeof(double)), 0);
    EXPECT_EQ(ascv::encode(back.dims, back.values), bytes);
}

TEST(Ascv, RejectsCorruptStreams) {
    const std::vector<std::uint64_t> dims{4};
    const std::vector<double> values{1, 2, 3, 4};
    auto bytes = ascv::encode(dims, values);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(ascv::decode(bad_magic), std::exception);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(ascv::decode(truncated), std::exception);
    auto bad_version = bytes;
    bad_version[4] = 2;
    EXPECT_THROW(ascv::decode(bad_version), std::exception);
}

TEST(Io, TensorAndImageRoundTrips) {
    const auto dir = scratch_dir("io");
    const auto scene = synth::synth_scene({}, 2);
    ascv::write(dir / "v.ascv", scene.video.values);
    EXPECT_EQ(ascv::read_tensor4(dir / "v.ascv"), scene.video.values);

    // 8-bit quantized frames survive the PPM round trip exactly.
    PixelVideo q = scene.video;
    for (auto& v : q.values.storage()) {
        v = std::round(v * 255.0) / 255.0;
    }
    io::write_frames(dir / "frames", q);
    EXPECT_TRUE(fs::exists(dir / "frames" / "frame_0000.ppm"));
    EXPECT_TRUE(fs::exists(dir / "frames" / "frame_0007.ppm"));
    const auto back = io::read_video(dir / "frames");
    ASSERT_EQ(back.values.shape(), q.values.shape());
    for (std::size_t i = 0; i < q.values.size(); ++i) {
        ASSERT_NEAR(back.values.storage()[i], q.values.storage()[i], 1e-12);
    }

    io::write_mask(dir / "mask", scene.mask);
    EXPECT_EQ(io::read_mask(dir / "mask"), scene.mask);
    EXPECT_EQ(io::frame_name(12, ".pgm"), "frame_0012.pgm");

    const auto clip = synth::synth_audio({}, 3);
    audio::write_wav(dir / "a.wav", clip);
    const auto read = audio::read_wav(dir / "a.wav");
    EXPECT_EQ(read.sample_rate, clip.sample_rate);
    EXPECT_EQ(read.samples.size(), clip.samples.size());
    fs::remove_all(dir);
}

TEST(Io, MissingPathsSurfaceAsLoadStage) {
    pipeline::EditRequest r;
    r.source_video = "/nonexistent/video";
    try {
        pipeline::load(r);
        FAIL() << "expected a stage error";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "load");
    }
}

TEST(Outputs, WritesAllArtifacts) {
    const auto dir = scratch_dir("outputs");
    pipeline::EditResult result;
    result.edited = synth::synth_scene({}, 1).video;
    result.loss_history = {1.0, 0.5};
    const auto report = pipeline::edit_report(result, {}, "abc");
    pipeline::write_outputs(dir, result, report);
    EXPECT_TRUE(fs::exists(dir / "frames" / "frame_0000.ppm"));
    EXPECT_EQ(ascv::read_tensor4(dir / "edited.ascv"), result.edited.values);
    std::ifstream rep(dir / "report.json");
    const auto j = nlohmann::json::parse(rep);
    EXPECT_EQ(j.at("input_hash"), "abc");
    EXPECT_NE(j.at("note").get<std::string>().find("depth"), std::string::npos);
    EXPECT_EQ(j.at("metrics").at("frame_embedding"), "");
    fs::remove_all(dir);
}
