// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scenetone/audio_features.hpp"
#include "scenetone/conditioning.hpp"
#include "scenetone/diffusion.hpp"
#include "scenetone/video.hpp"

namespace scenetone::nn {

struct DenoiserConfig {
    int latent_channels = 12;
    int base_channels = 16;
    std::vector<int> channel_mult{1, 2};
    int temporal_kernel = 3;
    int spatial_kernel = 3;
    int d_emb = 64;
    int audio_dim = 64;
    int n_mels = 64;
    int enc_hidden = 32;    // hidden width of the frequency weight encoder
    int mlp_hidden = 64;    // hidden width of f in the magnitude modulator
    double lowpass_d0 = 0.25;
    cond::LowPassKind lowpass_kind = cond::LowPassKind::Gaussian;
    cond::MechanismFlags flags;           // mechanisms the model is allowed to use
    bool scenemasker_in_training = false;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels_at(int level) const { return base_channels * channel_mult.at(static_cast<std::size_t>(level)); }
    /// Number of residual stages, each followed by a Frequency Fuser.
    int stage_count() const { return 2 * levels() - 1; }
    void validate() const;
};

struct ParamEntry {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::size_t> shape;
    std::size_t size = 0;

    /// Leading component of the name, e.g. "down0" for "down0.spatial.weight".
    std::string group() const { return name.substr(0, name.find('.')); }
};

/// Named index into a flat parameter vector.
class ParamLayout {
public:
    const ParamEntry& add(const std::string& name, std::vector<std::size_t> shape);
    const ParamEntry& at(const std::string& name) const;
    bool contains(const std::string& name) const { return m_index.count(name) != 0; }
    const std::vector<ParamEntry>& entries() const noexcept { return m_entries; }
    std::size_t total() const noexcept { return m_total; }

private:
    std::vector<ParamEntry> m_entries;
    std::map<std::string, std::size_t> m_index;
    std::size_t m_total = 0;
};

struct DenoiserParams {
    std::shared_ptr<const ParamLayout> layout;
    std::vector<double> values;

    std::span<const double> view(const std::string& name) const;
    std::span<double> view(const std::string& name);
    bool all_finite() const;
};

struct TrainingBatch {
    LatentVideo z0;
    int t = 1;
    LatentVideo eps;
    diffusion::ConditioningBundle bundle;
};

struct LossAndGrads {
    double loss = 0.0;
    std::vector<double> grads;
};

/// Toy video U-Net predicting the noise in z_t. Each residual block is
/// spatial conv -> tanh -> temporal conv -> + field bias -> tanh ->
/// temporal conv -> + skip, and every block is followed by the Frequency
/// Fuser when it is enabled.
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig config);

    const DenoiserConfig& config() const noexcept { return m_config; }
    const ParamLayout& layout() const noexcept { return *m_layout; }
    std::shared_ptr<const ParamLayout> shared_layout() const noexcept { return m_layout; }

    /// Fan-in uniform convolution weights; identity-initialized conditioning
    /// maps; zero output convolution.
    DenoiserParams init(std::uint64_t seed) const;

    LatentVideo forward(const DenoiserParams& params, const LatentVideo& z_t, int t,
                        const diffusion::ConditioningBundle& bundle) const;

    double loss(const DenoiserParams& params, const TrainingBatch& batch,
                const diffusion::NoiseSchedule& schedule) const;

    LossAndGrads loss_and_grads(const DenoiserParams& params, const TrainingBatch& batch,
                                const diffusion::NoiseSchedule& schedule) const;

    diffusion::NoisePredictor predictor(const DenoiserParams& params) const;

    /// The per-level embedding fields the forward pass would inject.
    std::vector<cond::EmbeddingField> embedding_fields(const DenoiserParams& params, const LatentVideo& z_t, int t,
                                                       const diffusion::ConditioningBundle& bundle) const;

    struct Tape;

private:
    LatentVideo run(const DenoiserParams& params, const LatentVideo& z_t, int t,
                    const diffusion::ConditioningBundle& bundle, Tape* tape) const;
    void backprop(const DenoiserParams& params, const Tape& tape, const Tensor4& grad_out,
                  std::vector<double>& grads) const;

    DenoiserConfig m_config;
    std::shared_ptr<const ParamLayout> m_layout;
};

// ---------------------------------------------------------------------------

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainState {
    DenoiserParams params;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    int step = 0;
    std::vector<double> loss_history;

    static TrainState start(DenoiserParams params);
};

/// Bias-corrected Adam update.
TrainState adam_step(TrainState state, std::span<const double> grads, const AdamOptions& options = {});

struct FinetuneOptions {
    int steps = 200;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    audio::FeatureOptions features;
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Fits the denoiser to one (video, audio) pair with the noise-prediction
/// objective: per step a uniform timestep and fresh Gaussian noise.
TrainState finetune(const Denoiser& denoiser, const PixelVideo& video, const audio::AudioClip& audio,
                    const diffusion::NoiseSchedule& schedule, const FinetuneOptions& options,
                    const std::optional<cond::ForegroundMask>& mask = std::nullopt,
                    const ProgressFn& progress = nullptr);

/// Same as above with features already extracted.
TrainState finetune(const Denoiser& denoiser, const LatentVideo& z0, const diffusion::ConditioningBundle& bundle,
                    const diffusion::NoiseSchedule& schedule, const FinetuneOptions& options,
                    const ProgressFn& progress = nullptr);

// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string name;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
};

/// |a - b| / max(|a|, |b|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-7);

/// Central differences on `samples` coordinates, spread over every
/// parameter tensor.
GradCheckReport gradient_check(const Denoiser& denoiser, const DenoiserParams& params, const TrainingBatch& batch,
                               const diffusion::NoiseSchedule& schedule, std::size_t samples, double step,
                               std::uint64_t seed);

}  // namespace scenetone::nn
