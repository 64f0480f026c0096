// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "scenetone/audio_features.hpp"
#include "scenetone/conditioning.hpp"
#include "scenetone/denoiser.hpp"
#include "scenetone/diffusion.hpp"
#include "scenetone/metrics.hpp"
#include "scenetone/video.hpp"

namespace scenetone::pipeline {

struct EditConfig {
    std::uint64_t seed = 0;
    int finetune_steps = 200;
    int ddim_steps = 20;
    double lr = 1e-3;
    cond::MechanismFlags flags;
    double tau = 1.0;   // magnitude softmax temperature
    double d0 = 0.25;   // low-pass cutoff of the Frequency Fuser
    int schedule_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    nn::DenoiserConfig model_config() const;
    audio::FeatureOptions feature_options() const;
    diffusion::NoiseSchedule schedule() const;
};

struct EditInputs {
    PixelVideo source;
    audio::AudioClip source_audio;
    audio::AudioClip target_audio;
    cond::ForegroundMask mask;
};

/// Throws InvalidArgument on inconsistent frame counts or sizes.
void validate(const EditInputs& inputs, const EditConfig& config);

/// Fine-tuned model plus the inverted latent of the source video.
struct PreparedEdit {
    nn::Denoiser denoiser;
    nn::DenoiserParams params;
    std::vector<double> loss_history;
    LatentVideo z0;
    LatentVideo z_T;
    diffusion::NoiseSchedule schedule;
    EditConfig config;
};

using ProgressFn = std::function<void(const std::string& stage, int step, double value)>;

/// Stages "features", "finetune" and "invert".
PreparedEdit prepare(const EditInputs& inputs, const EditConfig& config, const ProgressFn& progress = nullptr);

struct EditResult {
    PixelVideo edited;
    LatentVideo latent;
    metrics::MetricsReport metrics;
    std::vector<double> loss_history;
    audio::SemanticEmbedding target_embedding;
};

/// Stages "sample", "decode" and "metrics" with `flags` applied to the target bundle.
EditResult sample(const PreparedEdit& prepared, const EditInputs& inputs, const audio::AudioClip& target,
                  const cond::MechanismFlags& flags);

/// Fine-tune on the source pair, invert, then sample under the target audio.
EditResult edit(const EditInputs& inputs, const EditConfig& config, const ProgressFn& progress = nullptr);

// ---------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    cond::MechanismFlags flags;
    metrics::MetricsReport metrics;
    std::string input_hash;
    std::uint64_t seed = 0;
};

/// Full model and one run each without TASI, SceneMasker and Frequency Fuser.
std::vector<AblationRow> ablation_run(const EditInputs& inputs, const EditConfig& base,
                                      const ProgressFn& progress = nullptr);

/// FNV-1a over the source video, both clips, the mask and the seed.
std::string input_hash(const EditInputs& inputs, std::uint64_t seed);

std::string format_table(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------

struct EditRequest {
    std::filesystem::path source_video;
    std::filesystem::path source_audio;
    std::filesystem::path target_audio;
    std::filesystem::path mask;
    std::filesystem::path output_dir = "out";
    EditConfig config;
};

/// Keys mirror EditRequest and EditConfig; unknown keys are rejected.
EditRequest request_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
EditRequest read_request(const std::filesystem::path& path);
nlohmann::json to_json(const EditRequest& request);

EditInputs load(const EditRequest& request);

nlohmann::json to_json(const metrics::MetricsReport& report);
nlohmann::json to_json(const cond::MechanismFlags& flags);

/// Report header, metrics and provider ids.
nlohmann::json edit_report(const EditResult& result, const EditConfig& config, const std::string& input_hash);

/// frames/frame_XXXX.ppm, edited.ascv, loss_history.json and report.json.
void write_outputs(const std::filesystem::path& dir, const EditResult& result, const nlohmann::json& report);

/// load -> edit -> write. Stage failures are raised as StageError.
EditResult run_request(const EditRequest& request, const ProgressFn& progress = nullptr);

}  // namespace scenetone::pipeline
