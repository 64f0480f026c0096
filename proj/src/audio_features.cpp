// SPDX-License-Identifier: Apache-2.0

#include "scenetone/audio_features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "scenetone/error.hpp"
#include "scenetone/fft.hpp"

namespace scenetone::audio {

void validate(const AudioClip& clip) {
    SCENETONE_REQUIRE(clip.sample_rate > 0, "audio clip: sample rate must be positive, got ", clip.sample_rate);
    SCENETONE_REQUIRE(!clip.samples.empty(), "audio clip: no samples");
    for (double s : clip.samples) {
        SCENETONE_REQUIRE(std::isfinite(s) && std::abs(s) <= 1.0, "audio clip: sample ", s, " outside [-1, 1]");
    }
}

MagnitudeEnvelope MagnitudeEnvelope::uniform(std::size_t frames) {
    MagnitudeEnvelope env;
    env.weights.assign(frames, 1.0);
    env.rescaled = true;
    return env;
}

std::vector<double> chunk_magnitudes(const AudioClip& clip, int n_chunks, MagnitudeStatistic statistic) {
    SCENETONE_REQUIRE(n_chunks > 0, "magnitude envelope: chunk count must be positive, got ", n_chunks);
    SCENETONE_REQUIRE(clip.length() >= static_cast<std::size_t>(n_chunks), "magnitude envelope: clip of ",
                      clip.length(), " samples is shorter than ", n_chunks, " chunks");
    const std::size_t chunk = clip.length() / static_cast<std::size_t>(n_chunks);
    std::vector<double> means(static_cast<std::size_t>(n_chunks));
    for (std::size_t i = 0; i < means.size(); ++i) {
        const std::size_t begin = i * chunk;
        const std::size_t end = (i + 1 == means.size()) ? clip.length() : begin + chunk;
        double acc = 0.0;
        for (std::size_t k = begin; k < end; ++k) {
            const double s = clip.samples[k];
            acc += statistic == MagnitudeStatistic::MeanAbs ? std::abs(s) : s * s;
        }
        acc /= static_cast<double>(end - begin);
        means[i] = statistic == MagnitudeStatistic::MeanAbs ? acc : std::sqrt(acc);
    }
    return means;
}

std::vector<double> tempered_softmax(std::span<const double> values, double temperature) {
    SCENETONE_REQUIRE(temperature > 0.0, "softmax: temperature must be positive, got ", temperature);
    SCENETONE_REQUIRE(!values.empty(), "softmax: empty input");
    const double peak = *std::max_element(values.begin(), values.end());
    std::vector<double> out(values.size());
    double total = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        out[i] = std::exp((values[i] - peak) / temperature);
        total += out[i];
    }
    for (auto& v : out) {
        v /= total;
    }
    return out;
}

MagnitudeEnvelope envelope_from_chunk_means(std::span<const double> chunk_means, const EnvelopeOptions& options) {
    MagnitudeEnvelope env;
    env.weights = tempered_softmax(chunk_means, options.temperature);
    env.temperature = options.temperature;
    env.rescaled = options.rescale_mean_one;
    if (options.rescale_mean_one) {
        const double n = static_cast<double>(env.weights.size());
        for (auto& w : env.weights) {
            w *= n;
        }
    }
    return env;
}

MagnitudeEnvelope magnitude_envelope(const AudioClip& clip, int n_chunks, const EnvelopeOptions& options) {
    SCENETONE_REQUIRE(options.temperature > 0.0, "magnitude envelope: temperature must be positive, got ",
                      options.temperature);
    const auto means = chunk_magnitudes(clip, n_chunks, options.statistic);
    return envelope_from_chunk_means(means, options);
}

// ---------------------------------------------------------------------------

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

int window_count(std::size_t length, int window_len, int hop_len) {
    if (length <= static_cast<std::size_t>(window_len)) {
        return 1;
    }
    return 1 + static_cast<int>((length - static_cast<std::size_t>(window_len)) / static_cast<std::size_t>(hop_len));
}

std::vector<double> hann_window(int length) {
    std::vector<double> w(static_cast<std::size_t>(length));
    for (int n = 0; n < length; ++n) {
        w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / length);
    }
    return w;
}

std::vector<std::vector<double>> mel_filterbank(int n_mels, int window_len, int sample_rate, double fmin,
                                                double fmax) {
    const int n_bins = window_len / 2 + 1;
    const double mel_lo = hz_to_mel(fmin);
    const double mel_hi = hz_to_mel(fmax);
    std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (n_mels + 1));
    }
    std::vector<std::vector<double>> bank(static_cast<std::size_t>(n_mels), std::vector<double>(n_bins, 0.0));
    for (int m = 0; m < n_mels; ++m) {
        const double lo = edges[m];
        const double center = edges[m + 1];
        const double hi = edges[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / window_len;
            const double rising = (f - lo) / (center - lo);
            const double falling = (hi - f) / (hi - center);
            bank[m][k] = std::max(0.0, std::min(rising, falling));
        }
    }
    return bank;
}

MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelOptions& options) {
    validate(clip);
    const double nyquist = clip.sample_rate / 2.0;
    const double fmax = options.fmax.value_or(nyquist);
    SCENETONE_REQUIRE(options.n_mels > 0, "mel spectrogram: n_mels must be positive");
    SCENETONE_REQUIRE(options.fmin >= 0.0 && options.fmin < fmax && fmax <= nyquist,
                      "mel spectrogram: need 0 <= fmin < fmax <= sample_rate/2, got fmin=", options.fmin,
                      " fmax=", fmax);
    SCENETONE_REQUIRE(options.hop_len > 0 && options.window_len >= options.hop_len,
                      "mel spectrogram: need window_len >= hop_len > 0, got window=", options.window_len,
                      " hop=", options.hop_len);

    const auto window = hann_window(options.window_len);
    const auto bank = mel_filterbank(options.n_mels, options.window_len, clip.sample_rate, options.fmin, fmax);

    MelSpectrogram mel;
    mel.n_mels = options.n_mels;
    mel.n_windows = window_count(clip.length(), options.window_len, options.hop_len);
    mel.window_len = options.window_len;
    mel.hop_len = options.hop_len;
    mel.fmin = options.fmin;
    mel.fmax = fmax;
    mel.bins.assign(static_cast<std::size_t>(mel.n_mels) * mel.n_windows, 0.0);

    std::vector<double> frame(static_cast<std::size_t>(options.window_len));
    for (int w = 0; w < mel.n_windows; ++w) {
        const std::size_t start = static_cast<std::size_t>(w) * options.hop_len;
        for (int i = 0; i < options.window_len; ++i) {
            const std::size_t idx = start + i;
            frame[i] = idx < clip.length() ? clip.samples[idx] * window[i] : 0.0;
        }
        const auto power = fft::power_spectrum(frame);
        for (int m = 0; m < mel.n_mels; ++m) {
            const auto& filter = bank[m];
            double acc = 0.0;
            for (std::size_t k = 0; k < power.size(); ++k) {
                acc += filter[k] * power[k];
            }
            mel.bins[static_cast<std::size_t>(m) * mel.n_windows + w] = acc;
        }
    }
    return mel;
}

// ---------------------------------------------------------------------------

SpectralEmbedder::SpectralEmbedder(int dim) : m_dim(dim) {
    SCENETONE_REQUIRE(dim >= 8, "spectral embedder: dimension must be at least 8, got ", dim);
}

std::string SpectralEmbedder::id() const { return "spectral-logmel-" + std::to_string(m_dim); }

std::vector<double> SpectralEmbedder::mean_profile(const AudioClip& clip) const {
    MelOptions options;
    options.n_mels = m_dim;
    const auto mel = mel_spectrogram(clip, options);
    std::vector<double> profile(static_cast<std::size_t>(m_dim), 0.0);
    for (int m = 0; m < mel.n_mels; ++m) {
        double acc = 0.0;
        for (int w = 0; w < mel.n_windows; ++w) {
            acc += mel.at(m, w);
        }
        profile[m] = acc / mel.n_windows;
    }
    return profile;
}

SemanticEmbedding SpectralEmbedder::embed(const AudioClip& clip) const {
    auto values = mean_profile(clip);
    double norm2 = 0.0;
    for (auto& v : values) {
        v = std::log1p(v);
        norm2 += v * v;
    }
    SemanticEmbedding out;
    out.provider_id = id();
    if (norm2 == 0.0) {
        out.values.assign(values.size(), 0.0);
        out.values[0] = 1.0;
        return out;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : values) {
        v *= inv;
    }
    out.values = std::move(values);
    return out;
}

SemanticEmbedding spectral_embed(const AudioClip& clip, int dim) { return SpectralEmbedder(dim).embed(clip); }

AudioFeatureBundle extract_features(const AudioClip& clip, int n_frames, const FeatureOptions& options,
                                    const EmbeddingProvider* provider) {
    validate(clip);
    AudioFeatureBundle bundle;
    if (provider != nullptr) {
        bundle.semantic = provider->embed(clip);
    } else {
        bundle.semantic = spectral_embed(clip, options.embedding_dim);
    }
    bundle.magnitude = magnitude_envelope(clip, n_frames, options.envelope);
    bundle.mel = mel_spectrogram(clip, options.mel);
    return bundle;
}

}  // namespace scenetone::audio
