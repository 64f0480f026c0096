// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "scenetone/audio_features.hpp"
#include "scenetone/conditioning.hpp"
#include "scenetone/video.hpp"

namespace scenetone::diffusion {

enum class ScheduleKind { Linear };

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s for
/// t = 1..T; alpha_bar_0 = 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;
    NoiseSchedule(std::vector<double> betas);

    int steps() const noexcept { return static_cast<int>(m_betas.size()); }
    double beta(int t) const { return m_betas.at(static_cast<std::size_t>(t - 1)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return m_alpha_bars.at(static_cast<std::size_t>(t)); }
    const std::vector<double>& betas() const noexcept { return m_betas; }

private:
    std::vector<double> m_betas;
    std::vector<double> m_alpha_bars;  // index 0..T
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::Linear);

/// Raw audio-side inputs of the noise predictor. The embedding field and
/// frequency weights depend on trainable parameters, so the denoiser derives
/// them from these inputs on every call.
struct ConditioningBundle {
    cond::MechanismFlags flags = cond::MechanismFlags::none();
    std::optional<audio::SemanticEmbedding> semantic;
    std::optional<audio::MagnitudeEnvelope> magnitude;
    std::vector<double> pooled_mel;  // frames x n_mels, see cond::pool_mel
    std::optional<cond::ForegroundMask> mask;

    bool tasi_active() const { return flags.tasi && semantic.has_value(); }
    bool magnitude_active() const { return tasi_active() && flags.magnitude && magnitude.has_value(); }
    bool scenemasker_active() const { return tasi_active() && flags.scenemasker && mask.has_value(); }
    /// True when the Frequency Fuser is bypassed.
    bool freq_identity() const { return !flags.freqfuse || pooled_mel.empty(); }

    /// The inversion branch: no semantic injection, unit magnitude, fuser bypassed.
    static ConditioningBundle unconditional();

    static ConditioningBundle from_audio(const audio::AudioFeatureBundle& features, std::size_t frames,
                                         cond::MechanismFlags flags,
                                         std::optional<cond::ForegroundMask> mask = std::nullopt);
};

using NoisePredictor =
    std::function<LatentVideo(const LatentVideo& z_t, int t, const ConditioningBundle& bundle)>;

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
LatentVideo q_sample(const LatentVideo& z0, int t, const LatentVideo& eps, const NoiseSchedule& schedule);

/// Deterministic DDIM update from t to t_prev (eta = 0).
LatentVideo ddim_step(const LatentVideo& z_t, const LatentVideo& eps_hat, int t, int t_prev,
                      const NoiseSchedule& schedule);

/// Exact inverse of ddim_step for a fixed eps_hat: maps z_{t_prev} to z_t.
LatentVideo ddim_step_inverse(const LatentVideo& z_prev, const LatentVideo& eps_hat, int t_prev, int t,
                              const NoiseSchedule& schedule);

/// {0, t_1, ..., t_S} with t_i = floor(i T / S).
std::vector<int> ddim_timesteps(int schedule_steps, int steps);

LatentVideo ddim_invert(const LatentVideo& z0, const NoisePredictor& denoiser, int steps,
                        const NoiseSchedule& schedule);

LatentVideo ddim_sample(const LatentVideo& z_T, const NoisePredictor& denoiser, const ConditioningBundle& bundle,
                        int steps, const NoiseSchedule& schedule);

/// Space-to-depth by `factor` followed by x -> 2x - 1. Channel c' of the
/// latent is c * factor^2 + dy * factor + dx.
LatentVideo vae_encode(const PixelVideo& video, int factor = 2);

/// Exact inverse of vae_encode; results are clamped to [0, 1].
PixelVideo vae_decode(const LatentVideo& latent, int factor = 2);

}  // namespace scenetone::diffusion
