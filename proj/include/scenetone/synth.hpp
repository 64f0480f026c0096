// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "scenetone/audio_features.hpp"
#include "scenetone/conditioning.hpp"
#include "scenetone/video.hpp"

namespace scenetone::synth {

struct SceneParams {
    std::size_t frames = 8;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t square = 16;
    long x0 = 4;  // top-left corner in frame 0
    long y0 = 8;
    long vx = 1;  // pixels per frame
    long vy = 0;
    std::array<double, 3> color{0.95, 0.85, 0.30};
    double checker = 0.05;   // +- amplitude of the square's texture
    std::size_t cell = 4;    // texture cell size
    double background_amplitude = 0.25;
    double drift = 0.05;     // background phase advance per frame, in cycles
};

struct SyntheticScene {
    PixelVideo video;
    cond::ForegroundMask mask;
    SceneParams params;
    std::array<double, 3> phases{};     // per-channel background phase
    std::array<double, 2> frequency{};  // background cycles across (x, y)
};

/// Bright textured square translating linearly over a drifting sinusoidal
/// background. The seed picks the background phases and frequencies.
SyntheticScene synth_scene(const SceneParams& params, std::uint64_t seed);

/// Piecewise-linear envelope knot: time in [0, 1] of the clip, amplitude >= 0.
struct EnvelopeKnot {
    double time = 0.0;
    double amplitude = 0.0;
};

struct AudioParams {
    int sample_rate = 16000;
    double duration = 1.0;
    std::vector<double> tones{220.0, 440.0, 660.0};
    std::vector<EnvelopeKnot> envelope{{0.0, 0.5}, {1.0, 0.5}};
};

/// Envelope value at normalized time u, linear between knots and constant
/// beyond the ends.
double envelope_at(const std::vector<EnvelopeKnot>& knots, double u);

/// Mean of the tones (random phases from the seed) scaled by the envelope.
audio::AudioClip synth_audio(const AudioParams& params, std::uint64_t seed);

}  // namespace scenetone::synth
