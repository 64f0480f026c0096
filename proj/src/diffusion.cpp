// SPDX-License-Identifier: Apache-2.0

#include "scenetone/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "scenetone/error.hpp"

namespace scenetone::diffusion {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : m_betas(std::move(betas)) {
    m_alpha_bars.reserve(m_betas.size() + 1);
    m_alpha_bars.push_back(1.0);
    double acc = 1.0;
    for (double b : m_betas) {
        SCENETONE_REQUIRE(b > 0.0 && b < 1.0, "noise schedule: beta ", b, " outside (0, 1)");
        acc *= 1.0 - b;
        m_alpha_bars.push_back(acc);
    }
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind) {
    SCENETONE_REQUIRE(steps >= 2, "noise schedule: need at least 2 steps, got ", steps);
    SCENETONE_REQUIRE(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
                      "noise schedule: need 0 < beta_start <= beta_end < 1, got ", beta_start, ", ", beta_end);
    std::vector<double> betas(static_cast<std::size_t>(steps));
    switch (kind) {
        case ScheduleKind::Linear:
            for (int t = 0; t < steps; ++t) {
                betas[t] = beta_start + (beta_end - beta_start) * t / (steps - 1);
            }
            break;
    }
    return NoiseSchedule(std::move(betas));
}

// ---------------------------------------------------------------------------

ConditioningBundle ConditioningBundle::unconditional() { return ConditioningBundle{}; }

ConditioningBundle ConditioningBundle::from_audio(const audio::AudioFeatureBundle& features, std::size_t frames,
                                                  cond::MechanismFlags flags,
                                                  std::optional<cond::ForegroundMask> mask) {
    SCENETONE_REQUIRE(features.magnitude.size() == frames, "conditioning: magnitude envelope has ",
                      features.magnitude.size(), " weights for ", frames, " frames");
    if (mask) {
        SCENETONE_REQUIRE(mask->frames() == frames, "conditioning: mask has ", mask->frames(), " frames, video has ",
                          frames);
    }
    ConditioningBundle bundle;
    bundle.flags = flags;
    bundle.semantic = features.semantic;
    bundle.magnitude = features.magnitude;
    bundle.pooled_mel = cond::pool_mel(features.mel, frames);
    bundle.mask = std::move(mask);
    return bundle;
}

// ---------------------------------------------------------------------------

namespace {

void check_timestep(int t, const NoiseSchedule& schedule, const char* what) {
    SCENETONE_REQUIRE(t >= 0 && t <= schedule.steps(), what, ": timestep ", t, " outside [0, ", schedule.steps(),
                      "]");
}

void check_same_shape(const LatentVideo& a, const LatentVideo& b, const char* what) {
    SCENETONE_REQUIRE(a.values.same_shape(b.values), what, ": latent and noise shapes differ");
}

}  // namespace

LatentVideo q_sample(const LatentVideo& z0, int t, const LatentVideo& eps, const NoiseSchedule& schedule) {
    check_same_shape(z0, eps, "q_sample");
    check_timestep(t, schedule, "q_sample");
    const double a = std::sqrt(schedule.alpha_bar(t));
    const double b = std::sqrt(1.0 - schedule.alpha_bar(t));
    LatentVideo out{Tensor4(z0.values.shape())};
    auto dst = out.values.data();
    const auto x = z0.values.data();
    const auto e = eps.values.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = a * x[i] + b * e[i];
    }
    return out;
}

LatentVideo ddim_step(const LatentVideo& z_t, const LatentVideo& eps_hat, int t, int t_prev,
                      const NoiseSchedule& schedule) {
    SCENETONE_REQUIRE(t > t_prev && t_prev >= 0, "ddim_step: need t > t_prev >= 0, got t=", t, " t_prev=", t_prev);
    check_timestep(t, schedule, "ddim_step");
    check_same_shape(z_t, eps_hat, "ddim_step");
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double sa_t = std::sqrt(ab_t);
    const double sb_t = std::sqrt(1.0 - ab_t);
    const double sa_prev = std::sqrt(ab_prev);
    const double sb_prev = std::sqrt(1.0 - ab_prev);
    LatentVideo out{Tensor4(z_t.values.shape())};
    auto dst = out.values.data();
    const auto z = z_t.values.data();
    const auto e = eps_hat.values.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const double z0_hat = (z[i] - sb_t * e[i]) / sa_t;
        dst[i] = sa_prev * z0_hat + sb_prev * e[i];
    }
    return out;
}

LatentVideo ddim_step_inverse(const LatentVideo& z_prev, const LatentVideo& eps_hat, int t_prev, int t,
                              const NoiseSchedule& schedule) {
    SCENETONE_REQUIRE(t > t_prev && t_prev >= 0, "ddim inversion: need t > t_prev >= 0, got t=", t,
                      " t_prev=", t_prev);
    check_timestep(t, schedule, "ddim inversion");
    check_same_shape(z_prev, eps_hat, "ddim inversion");
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const double sa_t = std::sqrt(ab_t);
    const double sb_t = std::sqrt(1.0 - ab_t);
    const double sa_prev = std::sqrt(ab_prev);
    const double sb_prev = std::sqrt(1.0 - ab_prev);
    LatentVideo out{Tensor4(z_prev.values.shape())};
    auto dst = out.values.data();
    const auto z = z_prev.values.data();
    const auto e = eps_hat.values.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const double z0_hat = (z[i] - sb_prev * e[i]) / sa_prev;
        dst[i] = sa_t * z0_hat + sb_t * e[i];
    }
    return out;
}

std::vector<int> ddim_timesteps(int schedule_steps, int steps) {
    SCENETONE_REQUIRE(steps >= 1 && steps <= schedule_steps, "ddim: step count must lie in [1, ", schedule_steps,
                      "], got ", steps);
    std::vector<int> ts(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) {
        ts[i] = static_cast<int>(static_cast<long long>(i) * schedule_steps / steps);
    }
    return ts;
}

LatentVideo ddim_invert(const LatentVideo& z0, const NoisePredictor& denoiser, int steps,
                        const NoiseSchedule& schedule) {
    const auto ts = ddim_timesteps(schedule.steps(), steps);
    const auto uncond = ConditioningBundle::unconditional();
    LatentVideo z = z0;
    for (std::size_t i = 1; i < ts.size(); ++i) {
        const LatentVideo eps = denoiser(z, ts[i], uncond);
        z = ddim_step_inverse(z, eps, ts[i - 1], ts[i], schedule);
    }
    return z;
}

LatentVideo ddim_sample(const LatentVideo& z_T, const NoisePredictor& denoiser, const ConditioningBundle& bundle,
                        int steps, const NoiseSchedule& schedule) {
    const auto ts = ddim_timesteps(schedule.steps(), steps);
    LatentVideo z = z_T;
    for (std::size_t i = ts.size() - 1; i >= 1; --i) {
        const LatentVideo eps = denoiser(z, ts[i], bundle);
        z = ddim_step(z, eps, ts[i], ts[i - 1], schedule);
    }
    return z;
}

// ---------------------------------------------------------------------------

LatentVideo vae_encode(const PixelVideo& video, int factor) {
    const auto& v = video.values;
    SCENETONE_REQUIRE(factor >= 1, "vae_encode: factor must be positive");
    SCENETONE_REQUIRE(v.h() % factor == 0 && v.w() % factor == 0, "vae_encode: ", v.h(), "x", v.w(),
                      " frames are not divisible by ", factor);
    const std::size_t s = static_cast<std::size_t>(factor);
    Tensor4 out(v.n(), v.c() * s * s, v.h() / s, v.w() / s);
    for (std::size_t n = 0; n < v.n(); ++n) {
        for (std::size_t c = 0; c < v.c(); ++c) {
            for (std::size_t y = 0; y < v.h(); ++y) {
                for (std::size_t x = 0; x < v.w(); ++x) {
                    const std::size_t oc = c * s * s + (y % s) * s + (x % s);
                    out(n, oc, y / s, x / s) = 2.0 * v(n, c, y, x) - 1.0;
                }
            }
        }
    }
    return {std::move(out)};
}

PixelVideo vae_decode(const LatentVideo& latent, int factor) {
    const auto& z = latent.values;
    SCENETONE_REQUIRE(factor >= 1, "vae_decode: factor must be positive");
    const std::size_t s = static_cast<std::size_t>(factor);
    SCENETONE_REQUIRE(z.c() % (s * s) == 0, "vae_decode: ", z.c(), " channels are not divisible by ", s * s);
    const std::size_t channels = z.c() / (s * s);
    Tensor4 out(z.n(), channels, z.h() * s, z.w() * s);
    for (std::size_t n = 0; n < z.n(); ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t y = 0; y < out.h(); ++y) {
                for (std::size_t x = 0; x < out.w(); ++x) {
                    const std::size_t ic = c * s * s + (y % s) * s + (x % s);
                    out(n, c, y, x) = std::clamp((z(n, ic, y / s, x / s) + 1.0) / 2.0, 0.0, 1.0);
                }
            }
        }
    }
    return {std::move(out)};
}

}  // namespace scenetone::diffusion
