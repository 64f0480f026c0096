// SPDX-License-Identifier: Apache-2.0

#pragma once

// Audio conditioning mechanisms:
//  * semantic injection: the projected audio embedding is added to the
//    timestep embedding (tasi_fuse);
//  * SceneMasker: a binary foreground mask blends the fused and unfused
//    embeddings so that audio only reaches the scene (scenemasker_blend);
//  * Magnitude Modulator: per-frame loudness weights scale f(temb_f)
//    (magnitude_modulate);
//  * Frequency Fuser: the high band of a 3D spectrum is reweighted per
//    temporal-frequency bin by weights encoded from the mel spectrogram
//    (encode_freq_weights, freq_fuse).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "scenetone/audio_features.hpp"
#include "scenetone/tensor.hpp"
#include "scenetone/video.hpp"

namespace scenetone::cond {

struct MechanismFlags {
    bool tasi = true;
    bool scenemasker = true;
    bool magnitude = true;
    bool freqfuse = true;

    static MechanismFlags all() { return {}; }
    static MechanismFlags none() { return {false, false, false, false}; }
    friend bool operator==(const MechanismFlags&, const MechanismFlags&) = default;
};

// ---------------------------------------------------------------------------
// Small dense maps over parameter storage

/// y = W x + b with W stored row-major (out x in). Non-owning.
struct AffineView {
    std::span<const double> weight;
    std::span<const double> bias;
    std::size_t out = 0;
    std::size_t in = 0;

    std::vector<double> apply(std::span<const double> x) const;
};

/// Gradient accumulators matching an AffineView.
struct AffineGrad {
    std::span<double> weight;
    std::span<double> bias;
};

/// Accumulates dW += g x^T, db += g and returns W^T g.
std::vector<double> affine_backward(const AffineView& map, std::span<const double> x, std::span<const double> g,
                                    const AffineGrad& grad);

/// f(x) = x + outer(tanh(inner(x))). With a zero outer map f is the identity.
struct ResidualMlpView {
    AffineView inner;
    AffineView outer;

    std::vector<double> apply(std::span<const double> x) const;
};

struct ResidualMlpGrad {
    AffineGrad inner;
    AffineGrad outer;
};

/// Backward of ResidualMlpView::apply; returns df/dx^T g.
std::vector<double> residual_mlp_backward(const ResidualMlpView& f, std::span<const double> x,
                                          std::span<const double> g, const ResidualMlpGrad& grad);

// ---------------------------------------------------------------------------
// Timestep embedding and semantic injection

struct TimestepEmbedding {
    std::vector<double> values;
    int timestep = 0;
};

/// Interleaved sinusoids: v[2i] = sin(t w_i), v[2i+1] = cos(t w_i) with
/// w_i = 10000^(-2i/d).
TimestepEmbedding timestep_embedding(int t, int d_emb);

/// temb + projection(e_a).
std::vector<double> tasi_fuse(const TimestepEmbedding& temb, const audio::SemanticEmbedding& e_a,
                              const AffineView& projection);

/// One vector per frame: weights[i] * f(temb_f).
std::vector<std::vector<double>> magnitude_modulate(std::span<const double> temb_f,
                                                   const audio::MagnitudeEnvelope& envelope,
                                                   const ResidualMlpView& f);

// ---------------------------------------------------------------------------
// Foreground mask and embedding field

/// Per-frame binary mask, 1 = foreground.
class ForegroundMask {
public:
    ForegroundMask() = default;
    ForegroundMask(std::size_t frames, std::size_t height, std::size_t width);
    ForegroundMask(std::size_t frames, std::size_t height, std::size_t width, std::vector<std::uint8_t> bits);

    static ForegroundMask constant(std::size_t frames, std::size_t height, std::size_t width, bool foreground);

    std::size_t frames() const noexcept { return m_frames; }
    std::size_t height() const noexcept { return m_height; }
    std::size_t width() const noexcept { return m_width; }

    bool at(std::size_t f, std::size_t y, std::size_t x) const noexcept {
        return m_bits[(f * m_height + y) * m_width + x] != 0;
    }
    void set(std::size_t f, std::size_t y, std::size_t x, bool fg) noexcept {
        m_bits[(f * m_height + y) * m_width + x] = fg ? 1 : 0;
    }
    std::size_t count() const noexcept;
    const std::vector<std::uint8_t>& bits() const noexcept { return m_bits; }

    /// Nearest-neighbour view at a coarser resolution that divides this one.
    /// Returns a copy when the resolution already matches.
    ForegroundMask at_resolution(std::size_t height, std::size_t width) const;

    friend bool operator==(const ForegroundMask&, const ForegroundMask&) = default;

private:
    std::size_t m_frames = 0;
    std::size_t m_height = 0;
    std::size_t m_width = 0;
    std::vector<std::uint8_t> m_bits;
};

/// Per-frame, per-location conditioning vectors: frames x h x w x d.
struct EmbeddingField {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t dim = 0;
    std::vector<double> values;
    bool mask_one_is_foreground = true;

    std::span<const double> at(std::size_t f, std::size_t y, std::size_t x) const {
        return {values.data() + ((f * height + y) * width + x) * dim, dim};
    }
    std::span<double> at(std::size_t f, std::size_t y, std::size_t x) {
        return {values.data() + ((f * height + y) * width + x) * dim, dim};
    }
};

EmbeddingField broadcast_field(std::span<const double> v, std::size_t frames, std::size_t height, std::size_t width);

/// field[f, y, x] = M[f, y, x] * temb_uf + (1 - M[f, y, x]) * scene[f], with
/// the mask taken at the requested layer resolution.
EmbeddingField scenemasker_blend(std::span<const std::vector<double>> scene_per_frame,
                                 std::span<const double> temb_uf, const ForegroundMask& mask, std::size_t height,
                                 std::size_t width);

/// Single fused vector broadcast over all frames.
EmbeddingField scenemasker_blend(std::span<const double> temb_f, std::span<const double> temb_uf,
                                 const ForegroundMask& mask, std::size_t height, std::size_t width,
                                 std::size_t frames);

// ---------------------------------------------------------------------------
// Frequency Fuser

enum class LowPassKind { Gaussian, Ideal };

/// Gains over the (frames, h, w) DFT grid.
struct LowPassFilter {
    std::size_t n0 = 0, n1 = 0, n2 = 0;
    std::vector<double> gains;
    double d0 = 0.0;
    LowPassKind kind = LowPassKind::Gaussian;

    double at(std::size_t kt, std::size_t kh, std::size_t kw) const { return gains[(kt * n1 + kh) * n2 + kw]; }
};

/// Signed normalized frequency of DFT bin k on an axis of size n, in [-0.5, 0.5].
double signed_frequency(std::size_t k, std::size_t n);

/// d = |(nu_t, nu_h, nu_w)| / (0.5 sqrt 3); gaussian P = exp(-d^2 / (2 d0^2)),
/// ideal P = [d <= d0].
LowPassFilter make_lowpass(std::size_t frames, std::size_t height, std::size_t width, double d0, LowPassKind kind);

/// Positive weights w[k, c] over temporal-frequency bins and channels.
struct FrequencyWeights {
    std::size_t bins = 0;
    std::size_t channels = 0;
    std::vector<double> values;  // bins x channels
    bool hermitian = true;

    double at(std::size_t k, std::size_t c) const { return values[k * channels + c]; }
    static FrequencyWeights identity(std::size_t bins, std::size_t channels);
};

/// Two affine layers around a tanh: n_mels -> hidden -> channels.
struct FreqEncoderView {
    AffineView hidden;
    AffineView output;
};

struct FreqEncoderGrad {
    AffineGrad hidden;
    AffineGrad output;
};

/// Output-layer bias at which softplus(b) + 0.5 == 1.
double identity_weight_bias();

/// log(1 + x) of the mel time axis average-pooled into n_frames chunks,
/// returned row-major as n_frames x n_mels.
std::vector<double> pool_mel(const audio::MelSpectrogram& mel, std::size_t n_frames);

/// Intermediate values of encode_freq_weights needed for backprop.
struct FreqEncoderTrace {
    std::vector<double> hidden;  // bins x hidden, post-tanh
    std::vector<double> raw;     // bins x channels, pre-softplus
};

/// w = sym(softplus(output(tanh(hidden(x_k)))) + 0.5) where sym averages each
/// bin with its conjugate bin (N - k) mod N.
FrequencyWeights encode_freq_weights(std::span<const double> pooled, std::size_t n_frames, std::size_t channels,
                                     const FreqEncoderView& enc, FreqEncoderTrace* trace = nullptr);

FrequencyWeights encode_freq_weights(const audio::MelSpectrogram& mel, std::size_t n_frames, std::size_t channels,
                                     const FreqEncoderView& enc);

/// Accumulates encoder parameter gradients from dL/dw (w after symmetrization).
void encode_freq_weights_backward(std::span<const double> pooled, const FreqEncoderView& enc,
                                  const FreqEncoderTrace& trace, const FrequencyWeights& grad_weights,
                                  const FreqEncoderGrad& grad);

/// Per channel: Re(IFFT3D(FFT3D(z) * (P + (1 - P) * w[k_t]))). Throws
/// ConsistencyError when the discarded imaginary part exceeds 1e-5.
Tensor4 freq_fuse(const Tensor4& z, const FrequencyWeights& weights, const LowPassFilter& filter);
LatentVideo freq_fuse(const LatentVideo& z, const FrequencyWeights& weights, const LowPassFilter& filter);

struct FreqFuseGrads {
    Tensor4 input;
    FrequencyWeights weights;
};

FreqFuseGrads freq_fuse_backward(const Tensor4& z, const Tensor4& grad_out, const FrequencyWeights& weights,
                                 const LowPassFilter& filter);

inline constexpr double kMaxImaginaryResidual = 1e-5;

}  // namespace scenetone::cond
