// SPDX-License-Identifier: Apache-2.0

#include "scenetone/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "scenetone/error.hpp"

namespace scenetone::synth {

SyntheticScene synth_scene(const SceneParams& p, std::uint64_t seed) {
    SCENETONE_REQUIRE(p.frames > 0 && p.height > 0 && p.width > 0, "synth_scene: empty video");
    SCENETONE_REQUIRE(p.square > 0 && p.cell > 0, "synth_scene: square and cell sizes must be positive");
    for (long n : {0L, static_cast<long>(p.frames) - 1}) {
        const long x = p.x0 + p.vx * n;
        const long y = p.y0 + p.vy * n;
        SCENETONE_REQUIRE(x >= 0 && y >= 0 && x + static_cast<long>(p.square) <= static_cast<long>(p.width) &&
                              y + static_cast<long>(p.square) <= static_cast<long>(p.height),
                          "synth_scene: the square leaves the frame at frame ", n);
    }

    SyntheticScene scene;
    scene.params = p;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> freq(0.5, 1.5);
    for (auto& ph : scene.phases) {
        ph = phase(rng);
    }
    scene.frequency = {freq(rng), freq(rng)};

    Tensor4 v(p.frames, 3, p.height, p.width);
    scene.mask = cond::ForegroundMask(p.frames, p.height, p.width);
    for (std::size_t n = 0; n < p.frames; ++n) {
        const long sx = p.x0 + p.vx * static_cast<long>(n);
        const long sy = p.y0 + p.vy * static_cast<long>(n);
        for (std::size_t y = 0; y < p.height; ++y) {
            for (std::size_t x = 0; x < p.width; ++x) {
                const long lx = static_cast<long>(x) - sx;
                const long ly = static_cast<long>(y) - sy;
                const bool fg = lx >= 0 && ly >= 0 && lx < static_cast<long>(p.square) &&
                                ly < static_cast<long>(p.square);
                scene.mask.set(n, y, x, fg);
                const double arg = 2.0 * std::numbers::pi *
                                   (scene.frequency[0] * x / p.width + scene.frequency[1] * y / p.height +
                                    p.drift * static_cast<double>(n));
                for (std::size_t c = 0; c < 3; ++c) {
                    double value = 0.0;
                    if (fg) {
                        const bool odd = ((lx / static_cast<long>(p.cell)) + (ly / static_cast<long>(p.cell))) % 2;
                        value = p.color[c] + (odd ? p.checker : -p.checker);
                    } else {
                        value = 0.4 + p.background_amplitude * std::sin(arg + scene.phases[c]);
                    }
                    v(n, c, y, x) = std::clamp(value, 0.0, 1.0);
                }
            }
        }
    }
    scene.video = {std::move(v)};
    return scene;
}

double envelope_at(const std::vector<EnvelopeKnot>& knots, double u) {
    SCENETONE_REQUIRE(!knots.empty(), "envelope: no knots");
    if (u <= knots.front().time) {
        return knots.front().amplitude;
    }
    for (std::size_t i = 1; i < knots.size(); ++i) {
        if (u <= knots[i].time) {
            const auto& a = knots[i - 1];
            const auto& b = knots[i];
            const double span = b.time - a.time;
            return span > 0.0 ? a.amplitude + (b.amplitude - a.amplitude) * (u - a.time) / span : b.amplitude;
        }
    }
    return knots.back().amplitude;
}

audio::AudioClip synth_audio(const AudioParams& p, std::uint64_t seed) {
    SCENETONE_REQUIRE(p.sample_rate > 0 && p.duration > 0.0, "synth_audio: sample rate and duration must be positive");
    SCENETONE_REQUIRE(!p.tones.empty(), "synth_audio: no tones");
    for (std::size_t i = 0; i < p.envelope.size(); ++i) {
        SCENETONE_REQUIRE(p.envelope[i].amplitude >= 0.0 && p.envelope[i].amplitude <= 1.0,
                          "synth_audio: envelope amplitudes must lie in [0, 1]");
        SCENETONE_REQUIRE(i == 0 || p.envelope[i].time >= p.envelope[i - 1].time,
                          "synth_audio: envelope knots must be sorted by time");
    }
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::vector<double> phases(p.tones.size());
    for (auto& ph : phases) {
        ph = phase(rng);
    }

    const auto length = static_cast<std::size_t>(std::llround(p.duration * p.sample_rate));
    audio::AudioClip clip;
    clip.sample_rate = p.sample_rate;
    clip.samples.resize(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double t = static_cast<double>(i) / p.sample_rate;
        double acc = 0.0;
        for (std::size_t k = 0; k < p.tones.size(); ++k) {
            acc += std::sin(2.0 * std::numbers::pi * p.tones[k] * t + phases[k]);
        }
        const double u = length > 1 ? static_cast<double>(i) / static_cast<double>(length - 1) : 0.0;
        clip.samples[i] = envelope_at(p.envelope, u) * acc / static_cast<double>(p.tones.size());
    }
    return clip;
}

}  // namespace scenetone::synth
