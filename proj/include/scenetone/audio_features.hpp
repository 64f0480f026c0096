// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scenetone::audio {

/// Mono clip with samples normalized to [-1, 1].
struct AudioClip {
    std::vector<double> samples;
    int sample_rate = 0;

    std::size_t length() const noexcept { return samples.size(); }
    double duration_seconds() const noexcept {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

/// Throws InvalidArgument unless the clip is non-empty, finite, within
/// [-1, 1], and has a positive sample rate.
void validate(const AudioClip& clip);

// ---------------------------------------------------------------------------
// Magnitude envelope

enum class MagnitudeStatistic { MeanAbs, Rms };

struct EnvelopeOptions {
    double temperature = 1.0;
    bool rescale_mean_one = true;
    MagnitudeStatistic statistic = MagnitudeStatistic::MeanAbs;
};

/// Per-frame loudness weights: a tempered softmax over chunk magnitudes,
/// optionally rescaled so that the weights average to one.
struct MagnitudeEnvelope {
    std::vector<double> weights;
    double temperature = 1.0;
    bool rescaled = false;

    std::size_t size() const noexcept { return weights.size(); }
    static MagnitudeEnvelope uniform(std::size_t frames);
};

/// Splits the clip into n contiguous chunks of length L/n (the final chunk
/// takes the remainder) and returns the per-chunk statistic.
std::vector<double> chunk_magnitudes(const AudioClip& clip, int n_chunks,
                                     MagnitudeStatistic statistic = MagnitudeStatistic::MeanAbs);

/// exp(x_i / tau) / sum_n exp(x_n / tau), evaluated with max subtraction.
std::vector<double> tempered_softmax(std::span<const double> values, double temperature);

MagnitudeEnvelope magnitude_envelope(const AudioClip& clip, int n_chunks, const EnvelopeOptions& options = {});

/// Envelope from precomputed chunk statistics, as used by magnitude_envelope.
MagnitudeEnvelope envelope_from_chunk_means(std::span<const double> chunk_means, const EnvelopeOptions& options);

// ---------------------------------------------------------------------------
// Mel spectrogram

struct MelOptions {
    int n_mels = 64;
    int window_len = 1024;
    int hop_len = 256;
    double fmin = 0.0;
    std::optional<double> fmax;  // defaults to sample_rate / 2
};

struct MelSpectrogram {
    std::vector<double> bins;  // n_mels x n_windows, row-major
    int n_mels = 0;
    int n_windows = 0;
    int window_len = 0;
    int hop_len = 0;
    double fmin = 0.0;
    double fmax = 0.0;

    double at(int mel, int window) const { return bins[static_cast<std::size_t>(mel) * n_windows + window]; }
};

/// HTK mel scale: 2595 * log10(1 + f / 700).
double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Number of analysis windows for a clip of the given length. Clips shorter
/// than one window are zero-padded to a single window.
int window_count(std::size_t length, int window_len, int hop_len);

/// Periodic Hann window of the given length.
std::vector<double> hann_window(int length);

/// Triangular filters, n_mels rows of (window_len / 2 + 1) weights over the
/// FFT bins, with peaks at mel-spaced centers between fmin and fmax.
std::vector<std::vector<double>> mel_filterbank(int n_mels, int window_len, int sample_rate, double fmin, double fmax);

MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelOptions& options = {});

// ---------------------------------------------------------------------------
// Semantic embedding

struct SemanticEmbedding {
    std::vector<double> values;
    std::string provider_id;

    std::size_t dim() const noexcept { return values.size(); }
};

/// Source of audio semantic embeddings.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual std::string id() const = 0;
    virtual SemanticEmbedding embed(const AudioClip& clip) const = 0;
};

/// Training-free stand-in embedder: time-averaged log-compressed mel profile
/// with `dim` bands, normalized to unit length. A silent clip maps to e_1.
class SpectralEmbedder final : public EmbeddingProvider {
public:
    explicit SpectralEmbedder(int dim = 64);
    std::string id() const override;
    SemanticEmbedding embed(const AudioClip& clip) const override;

    /// The time-averaged mel profile before log compression.
    std::vector<double> mean_profile(const AudioClip& clip) const;

private:
    int m_dim;
};

SemanticEmbedding spectral_embed(const AudioClip& clip, int dim = 64);

// ---------------------------------------------------------------------------

/// The (E_a, M_a, F_a) triple extracted from one clip.
struct AudioFeatureBundle {
    SemanticEmbedding semantic;
    MagnitudeEnvelope magnitude;
    MelSpectrogram mel;
};

struct FeatureOptions {
    int embedding_dim = 64;
    EnvelopeOptions envelope;
    MelOptions mel;
};

AudioFeatureBundle extract_features(const AudioClip& clip, int n_frames, const FeatureOptions& options = {},
                                    const EmbeddingProvider* provider = nullptr);

}  // namespace scenetone::audio
