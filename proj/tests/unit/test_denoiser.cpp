// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "oracles.hpp"
#include "scenetone/denoiser.hpp"
#include "scenetone/error.hpp"

using namespace scenetone;
using namespace scenetone::nn;

namespace {

const diffusion::NoiseSchedule& schedule() {
    static const auto s = diffusion::make_schedule(100, 1e-4, 0.02);
    return s;
}

audio::AudioClip tone(double hz, double amplitude, std::size_t length = 8000) {
    audio::AudioClip clip;
    clip.sample_rate = 16000;
    clip.samples.resize(length);
    for (std::size_t i = 0; i < length; ++i) {
        const double env = i < length / 2 ? amplitude : 0.3 * amplitude;
        clip.samples[i] = env * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
    }
    return clip;
}

DenoiserParams perturbed(const Denoiser& d, std::uint64_t seed, double scale = 0.1) {
    auto p = d.init(seed);
    std::mt19937_64 rng(seed + 1000);
    std::normal_distribution<double> normal;
    for (auto& v : p.values) {
        v += scale * normal(rng);
    }
    return p;
}

diffusion::ConditioningBundle bundle_for(const audio::AudioClip& clip, std::size_t frames,
                                         cond::MechanismFlags flags, std::size_t h, std::size_t w) {
    auto mask = cond::ForegroundMask::constant(frames, 2 * h, 2 * w, false);
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                mask.set(f, y + f % 2, x, true);
            }
        }
    }
    return diffusion::ConditioningBundle::from_audio(audio::extract_features(clip, static_cast<int>(frames)), frames,
                                                     flags, mask);
}

TrainingBatch small_batch(std::uint64_t seed, cond::MechanismFlags flags = cond::MechanismFlags::all()) {
    TrainingBatch b;
    b.z0.values = oracle::normal_tensor({2, 12, 4, 4}, seed);
    b.eps.values = oracle::normal_tensor({2, 12, 4, 4}, seed + 1);
    b.t = 37;
    b.bundle = bundle_for(tone(500.0, 0.6), 2, flags, 4, 4);
    return b;
}

// Parameter count walked from the architecture description.
std::size_t expected_parameter_count(const DenoiserConfig& c) {
    const std::size_t k2 = static_cast<std::size_t>(c.spatial_kernel * c.spatial_kernel);
    const std::size_t kt = static_cast<std::size_t>(c.temporal_kernel);
    const std::size_t d = static_cast<std::size_t>(c.d_emb);
    auto conv = [](std::size_t out, std::size_t in, std::size_t k) { return out * in * k + out; };
    auto block = [&](std::size_t in, std::size_t out) {
        std::size_t n = conv(out, in, k2) + conv(out, out, kt) + conv(out, d, 1) + conv(out, out, kt);
        if (in != out) {
            n += conv(out, in, 1);
        }
        return n;
    };
    const std::size_t lat = static_cast<std::size_t>(c.latent_channels);
    std::vector<std::size_t> ch;
    for (int m : c.channel_mult) {
        ch.push_back(static_cast<std::size_t>(c.base_channels * m));
    }
    std::size_t total = conv(ch[0], lat, k2);
    std::vector<std::size_t> stage_channels;
    std::size_t prev = ch[0];
    for (std::size_t l = 0; l < ch.size(); ++l) {
        total += block(prev, ch[l]);
        stage_channels.push_back(ch[l]);
        prev = ch[l];
    }
    for (std::size_t l = ch.size() - 1; l-- > 0;) {
        total += block(prev + ch[l], ch[l]);
        stage_channels.push_back(ch[l]);
        prev = ch[l];
    }
    total += conv(lat, ch[0], k2);
    total += conv(d, static_cast<std::size_t>(c.audio_dim), 1);
    const std::size_t mlp = static_cast<std::size_t>(c.mlp_hidden);
    total += conv(mlp, d, 1) + conv(d, mlp, 1);
    const std::size_t hidden = static_cast<std::size_t>(c.enc_hidden);
    for (std::size_t sc : stage_channels) {
        total += conv(hidden, static_cast<std::size_t>(c.n_mels), 1) + conv(sc, hidden, 1);
    }
    return total;
}

}  // namespace

TEST(Denoiser, ParameterCountMatchesShapeWalk) {
    const Denoiser d(DenoiserConfig{});
    EXPECT_EQ(d.layout().total(), expected_parameter_count(DenoiserConfig{}));
    EXPECT_EQ(d.layout().total(), 53036u);

    DenoiserConfig wide;
    wide.base_channels = 8;
    wide.channel_mult = {1, 2, 3};
    EXPECT_EQ(Denoiser(wide).layout().total(), expected_parameter_count(wide));
}

TEST(Denoiser, InitIsDeterministicAndFinite) {
    const Denoiser d(DenoiserConfig{});
    const auto a = d.init(5);
    const auto b = d.init(5);
    EXPECT_EQ(a.values, b.values);
    EXPECT_NE(a.values, d.init(6).values);
    EXPECT_TRUE(a.all_finite());
}

TEST(Denoiser, ZeroOutputLayerGivesZeroPrediction) {
    const Denoiser d(DenoiserConfig{});
    const auto p = d.init(1);
    const LatentVideo z{oracle::normal_tensor({3, 12, 8, 8}, 2)};
    const auto bundle = bundle_for(tone(300.0, 0.5), 3, cond::MechanismFlags::all(), 8, 8);
    const auto out = d.forward(p, z, 40, bundle);
    for (double v : out.values.storage()) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(Denoiser, IdentityStartFrequencyWeights) {
    const Denoiser d(DenoiserConfig{});
    const auto p = d.init(1);
    for (int s = 0; s < d.config().stage_count(); ++s) {
        const std::string name = "freq.stage" + std::to_string(s) + ".output.";
        for (double w : p.view(name + "weight")) {
            EXPECT_EQ(w, 0.0);
        }
        for (double b : p.view(name + "bias")) {
            EXPECT_EQ(b, cond::identity_weight_bias());
        }
    }
}

TEST(Denoiser, FlagsOffIgnoresAudio) {
    const Denoiser d(DenoiserConfig{});
    const auto p = perturbed(d, 3);
    const LatentVideo z{oracle::normal_tensor({2, 12, 4, 4}, 4)};
    const auto a = bundle_for(tone(200.0, 0.2), 2, cond::MechanismFlags::none(), 4, 4);
    const auto b = bundle_for(tone(3000.0, 0.9), 2, cond::MechanismFlags::none(), 4, 4);
    const auto out_a = d.forward(p, z, 20, a);
    EXPECT_EQ(out_a, d.forward(p, z, 20, b));
    EXPECT_EQ(out_a, d.forward(p, z, 20, diffusion::ConditioningBundle::unconditional()));

    const auto c = bundle_for(tone(3000.0, 0.9), 2, cond::MechanismFlags::all(), 4, 4);
    EXPECT_NE(out_a, d.forward(p, z, 20, c));
}

TEST(Denoiser, ForegroundFieldsIgnoreAudio) {
    const Denoiser d(DenoiserConfig{});
    const auto p = perturbed(d, 7);
    const LatentVideo z{oracle::normal_tensor({2, 12, 4, 4}, 8)};
    const auto a = bundle_for(tone(200.0, 0.2), 2, cond::MechanismFlags::all(), 4, 4);
    const auto b = bundle_for(tone(3000.0, 0.9), 2, cond::MechanismFlags::all(), 4, 4);
    const auto fa = d.embedding_fields(p, z, 20, a);
    const auto fb = d.embedding_fields(p, z, 20, b);
    ASSERT_EQ(fa.size(), fb.size());
    std::size_t fg = 0, differing_scene = 0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const auto mask = a.mask->at_resolution(fa[l].height, fa[l].width);
        for (std::size_t f = 0; f < fa[l].frames; ++f)
            for (std::size_t y = 0; y < fa[l].height; ++y)
                for (std::size_t x = 0; x < fa[l].width; ++x) {
                    const auto va = fa[l].at(f, y, x);
                    const auto vb = fb[l].at(f, y, x);
                    const bool same = std::equal(va.begin(), va.end(), vb.begin());
                    if (mask.at(f, y, x)) {
                        EXPECT_TRUE(same) << "level " << l << " frame " << f << " (" << y << ", " << x << ")";
                        ++fg;
                    } else if (!same) {
                        ++differing_scene;
                    }
                }
    }
    EXPECT_GT(fg, 0u);
    EXPECT_GT(differing_scene, 0u);
}

TEST(Denoiser, FrameReversalEquivariance) {
    const Denoiser d(DenoiserConfig{});
    auto p = perturbed(d, 9);
    for (const auto& e : d.layout().entries()) {
        if (e.name.find("temporal") == std::string::npos || e.shape.size() != 3) {
            continue;
        }
        auto w = p.view(e.name);
        for (std::size_t i = 0; i < w.size(); i += 3) {
            w[i + 2] = w[i];
        }
    }
    const LatentVideo z{oracle::normal_tensor({4, 12, 4, 4}, 10)};
    LatentVideo rev = z;
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 12; ++c)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x)
                    rev.values(n, c, y, x) = z.values(3 - n, c, y, x);
    const auto bundle = diffusion::ConditioningBundle::unconditional();
    const auto out = d.forward(p, z, 30, bundle);
    const auto out_rev = d.forward(p, rev, 30, bundle);
    double max_err = 0.0, scale = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 12; ++c)
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x) {
                    max_err = std::max(max_err, std::abs(out_rev.values(n, c, y, x) - out.values(3 - n, c, y, x)));
                    scale = std::max(scale, std::abs(out.values(n, c, y, x)));
                }
    EXPECT_GT(scale, 1e-3);
    EXPECT_LE(max_err, 1e-12);
}

TEST(Denoiser, ShapePreservedAndErrors) {
    const Denoiser d(DenoiserConfig{});
    const auto p = perturbed(d, 11);
    for (Tensor4::Shape s : {Tensor4::Shape{1, 12, 2, 2}, {3, 12, 4, 8}, {5, 12, 6, 2}}) {
        const LatentVideo z{oracle::normal_tensor(s, 12)};
        EXPECT_EQ(d.forward(p, z, 5, diffusion::ConditioningBundle::unconditional()).values.shape(), s);
    }
    const auto bundle = diffusion::ConditioningBundle::unconditional();
    EXPECT_THROW(d.forward(p, LatentVideo{Tensor4(2, 11, 4, 4)}, 5, bundle), InvalidArgument);
    EXPECT_THROW(d.forward(p, LatentVideo{Tensor4(2, 12, 3, 4)}, 5, bundle), InvalidArgument);

    LatentVideo bad{oracle::normal_tensor({2, 12, 4, 4}, 13)};
    bad.values(1, 3, 2, 2) = std::numeric_limits<double>::quiet_NaN();
    try {
        d.forward(p, bad, 5, bundle);
        FAIL() << "expected a numeric error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("conv_in"), std::string::npos) << e.what();
    }
}

TEST(Denoiser, InitialLossIsMeanSquaredNoise) {
    const Denoiser d(DenoiserConfig{});
    const auto p = d.init(1);
    const auto batch = small_batch(20);
    double ms = 0.0;
    for (double e : batch.eps.values.storage()) {
        ms += e * e;
    }
    ms /= static_cast<double>(batch.eps.values.size());
    const auto lg = d.loss_and_grads(p, batch, schedule());
    EXPECT_NEAR(lg.loss, ms, 1e-14);
    EXPECT_EQ(lg.grads.size(), p.values.size());
}

TEST(Denoiser, OutputBiasGradientAtInit) {
    const Denoiser d(DenoiserConfig{});
    const auto p = d.init(1);
    const auto batch = small_batch(21);
    const auto lg = d.loss_and_grads(p, batch, schedule());
    const auto& entry = d.layout().at("conv_out.bias");
    const auto& eps = batch.eps.values;
    const double m = static_cast<double>(eps.size());
    for (std::size_t c = 0; c < 12; ++c) {
        double sum = 0.0;
        for (std::size_t n = 0; n < eps.n(); ++n)
            for (double v : eps.plane(n, c))
                sum += v;
        const double expected = -2.0 * sum / m;
        EXPECT_NEAR(lg.grads[entry.offset + c], expected, 1e-12);
        EXPECT_NE(lg.grads[entry.offset + c], 0.0);

        auto up = p, down = p;
        up.values[entry.offset + c] += 1e-5;
        down.values[entry.offset + c] -= 1e-5;
        const double fd = (d.loss(up, batch, schedule()) - d.loss(down, batch, schedule())) / 2e-5;
        EXPECT_NEAR(lg.grads[entry.offset + c], fd, 1e-8);
    }
}

TEST(Denoiser, GradientMatchesFiniteDifferencesInEveryGroup) {
    const Denoiser d(DenoiserConfig{});
    const auto p = perturbed(d, 30);
    auto batch = small_batch(31);
    const auto report = gradient_check(d, p, batch, schedule(), 200, 1e-4, 32);
    ASSERT_EQ(report.entries.size(), 200u);
    std::set<std::string> groups;
    for (const auto& e : report.entries) {
        groups.insert(e.name.substr(0, e.name.find('.')));
        // Recompute the error from the stored values.
        EXPECT_EQ(e.rel_error, relative_error(e.analytic, e.numeric));
    }
    for (const char* g : {"conv_in", "down0", "down1", "up0", "conv_out", "tasi", "magnitude", "freq"}) {
        EXPECT_TRUE(groups.count(g)) << g;
    }
    EXPECT_LE(report.max_rel_error, 1e-4);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
    const Denoiser d(DenoiserConfig{});
    auto state = TrainState::start(d.init(1));
    const std::vector<double> zero(state.params.values.size(), 0.0);
    const auto next = adam_step(state, zero);
    EXPECT_EQ(next.params.values, state.params.values);
    EXPECT_EQ(next.step, 1);
}

TEST(Adam, MatchesScalarRecurrence) {
    const Denoiser d(DenoiserConfig{});
    auto state = TrainState::start(d.init(1));
    std::mt19937_64 rng(4);
    std::normal_distribution<double> normal;
    std::vector<double> g(state.params.values.size());
    for (auto& v : g) {
        v = 1e-3 * normal(rng);
    }
    const AdamOptions o{};
    const auto start = state.params.values;
    auto one = adam_step(state, g, o);
    auto two = adam_step(one, g, o);
    for (std::size_t i = 0; i < g.size(); i += 97) {
        double m = 0.0, v = 0.0, x = start[i];
        std::vector<double> after;
        for (int t = 1; t <= 2; ++t) {
            m = o.beta1 * m + (1.0 - o.beta1) * g[i];
            v = o.beta2 * v + (1.0 - o.beta2) * g[i] * g[i];
            const double mh = m / (1.0 - std::pow(o.beta1, t));
            const double vh = v / (1.0 - std::pow(o.beta2, t));
            x -= o.lr * mh / (std::sqrt(vh) + o.eps);
            after.push_back(x);
        }
        EXPECT_NEAR(one.params.values[i], after[0], 1e-15);
        EXPECT_NEAR(two.params.values[i], after[1], 1e-15);
        // First step is -lr * g / (|g| + eps).
        EXPECT_NEAR(one.params.values[i] - start[i], -o.lr * g[i] / (std::abs(g[i]) + o.eps), 1e-15);
    }
    EXPECT_EQ(two.step, 2);
    EXPECT_EQ(two.first_moment.size(), g.size());
    EXPECT_EQ(two.second_moment.size(), g.size());
}

TEST(Finetune, ZeroStepsReturnsInit) {
    const Denoiser d(DenoiserConfig{});
    const LatentVideo z0{oracle::normal_tensor({2, 12, 4, 4}, 40)};
    const auto bundle = bundle_for(tone(400.0, 0.5), 2, cond::MechanismFlags::all(), 4, 4);
    FinetuneOptions o;
    o.steps = 0;
    o.seed = 9;
    const auto state = finetune(d, z0, bundle, schedule(), o);
    EXPECT_EQ(state.params.values, d.init(9).values);
    EXPECT_TRUE(state.loss_history.empty());
    EXPECT_EQ(state.step, 0);
}

TEST(Finetune, DeterministicAndAppendOnly) {
    const Denoiser d(DenoiserConfig{});
    const LatentVideo z0{oracle::normal_tensor({2, 12, 4, 4}, 41)};
    const auto bundle = bundle_for(tone(400.0, 0.5), 2, cond::MechanismFlags::all(), 4, 4);
    FinetuneOptions o;
    o.steps = 12;
    o.seed = 2;
    std::vector<double> seen;
    const auto a = finetune(d, z0, bundle, schedule(), o, [&](int, double loss) { seen.push_back(loss); });
    const auto b = finetune(d, z0, bundle, schedule(), o);
    EXPECT_EQ(a.loss_history, b.loss_history);
    EXPECT_EQ(a.params.values, b.params.values);
    EXPECT_EQ(a.loss_history, seen);
    EXPECT_EQ(a.loss_history.size(), 12u);
    EXPECT_EQ(a.step, 12);
    EXPECT_TRUE(a.params.all_finite());
}
