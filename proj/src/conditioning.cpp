// SPDX-License-Identifier: Apache-2.0

#include "scenetone/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "scenetone/error.hpp"
#include "scenetone/fft.hpp"

namespace scenetone::cond {

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> AffineView::apply(std::span<const double> x) const {
    SCENETONE_REQUIRE(x.size() == in, "affine map expects input of size ", in, ", got ", x.size());
    std::vector<double> y(bias.begin(), bias.end());
    for (std::size_t o = 0; o < out; ++o) {
        const double* row = weight.data() + o * in;
        double acc = 0.0;
        for (std::size_t i = 0; i < in; ++i) {
            acc += row[i] * x[i];
        }
        y[o] += acc;
    }
    return y;
}

std::vector<double> affine_backward(const AffineView& map, std::span<const double> x, std::span<const double> g,
                                    const AffineGrad& grad) {
    std::vector<double> dx(map.in, 0.0);
    for (std::size_t o = 0; o < map.out; ++o) {
        const double go = g[o];
        if (!grad.bias.empty()) {
            grad.bias[o] += go;
        }
        const double* row = map.weight.data() + o * map.in;
        double* grow = grad.weight.empty() ? nullptr : grad.weight.data() + o * map.in;
        for (std::size_t i = 0; i < map.in; ++i) {
            if (grow != nullptr) {
                grow[i] += go * x[i];
            }
            dx[i] += row[i] * go;
        }
    }
    return dx;
}

std::vector<double> ResidualMlpView::apply(std::span<const double> x) const {
    auto hidden = inner.apply(x);
    for (auto& h : hidden) {
        h = std::tanh(h);
    }
    auto y = outer.apply(hidden);
    for (std::size_t i = 0; i < y.size(); ++i) {
        y[i] += x[i];
    }
    return y;
}

std::vector<double> residual_mlp_backward(const ResidualMlpView& f, std::span<const double> x,
                                          std::span<const double> g, const ResidualMlpGrad& grad) {
    auto hidden = f.inner.apply(x);
    for (auto& h : hidden) {
        h = std::tanh(h);
    }
    auto dh = affine_backward(f.outer, hidden, g, grad.outer);
    for (std::size_t i = 0; i < dh.size(); ++i) {
        dh[i] *= 1.0 - hidden[i] * hidden[i];
    }
    auto dx = affine_backward(f.inner, x, dh, grad.inner);
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] += g[i];
    }
    return dx;
}

// ---------------------------------------------------------------------------

TimestepEmbedding timestep_embedding(int t, int d_emb) {
    SCENETONE_REQUIRE(d_emb > 0 && d_emb % 2 == 0, "timestep embedding: dimension must be even and positive, got ",
                      d_emb);
    TimestepEmbedding emb;
    emb.timestep = t;
    emb.values.resize(static_cast<std::size_t>(d_emb));
    for (int i = 0; i < d_emb / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / d_emb);
        emb.values[2 * i] = std::sin(t * freq);
        emb.values[2 * i + 1] = std::cos(t * freq);
    }
    return emb;
}

std::vector<double> tasi_fuse(const TimestepEmbedding& temb, const audio::SemanticEmbedding& e_a,
                              const AffineView& projection) {
    SCENETONE_REQUIRE(projection.in == e_a.dim() && projection.out == temb.values.size(),
                      "tasi: projection is ", projection.out, "x", projection.in, " but embeddings are ",
                      temb.values.size(), " and ", e_a.dim());
    auto fused = projection.apply(e_a.values);
    for (std::size_t i = 0; i < fused.size(); ++i) {
        fused[i] += temb.values[i];
    }
    return fused;
}

std::vector<std::vector<double>> magnitude_modulate(std::span<const double> temb_f,
                                                   const audio::MagnitudeEnvelope& envelope,
                                                   const ResidualMlpView& f) {
    const auto mapped = f.apply(temb_f);
    std::vector<std::vector<double>> frames(envelope.size(), mapped);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        for (auto& v : frames[i]) {
            v *= envelope.weights[i];
        }
    }
    return frames;
}

// ---------------------------------------------------------------------------

ForegroundMask::ForegroundMask(std::size_t frames, std::size_t height, std::size_t width)
    : m_frames(frames), m_height(height), m_width(width), m_bits(frames * height * width, 0) {}

ForegroundMask::ForegroundMask(std::size_t frames, std::size_t height, std::size_t width,
                               std::vector<std::uint8_t> bits)
    : m_frames(frames), m_height(height), m_width(width), m_bits(std::move(bits)) {
    SCENETONE_REQUIRE(m_bits.size() == frames * height * width, "foreground mask: ", m_bits.size(),
                      " bits for a ", frames, "x", height, "x", width, " mask");
    for (auto& b : m_bits) {
        b = b != 0 ? 1 : 0;
    }
}

ForegroundMask ForegroundMask::constant(std::size_t frames, std::size_t height, std::size_t width, bool foreground) {
    return ForegroundMask(frames, height, width,
                          std::vector<std::uint8_t>(frames * height * width, foreground ? 1 : 0));
}

std::size_t ForegroundMask::count() const noexcept {
    return static_cast<std::size_t>(std::count(m_bits.begin(), m_bits.end(), std::uint8_t{1}));
}

ForegroundMask ForegroundMask::at_resolution(std::size_t height, std::size_t width) const {
    if (height == m_height && width == m_width) {
        return *this;
    }
    SCENETONE_REQUIRE(height > 0 && width > 0 && height <= m_height && width <= m_width &&
                          m_height % height == 0 && m_width % width == 0,
                      "foreground mask: no downsampled view at ", height, "x", width, " from ", m_height, "x",
                      m_width);
    const std::size_t sy = m_height / height;
    const std::size_t sx = m_width / width;
    ForegroundMask out(m_frames, height, width);
    for (std::size_t f = 0; f < m_frames; ++f) {
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                out.set(f, y, x, at(f, y * sy, x * sx));
            }
        }
    }
    return out;
}

EmbeddingField broadcast_field(std::span<const double> v, std::size_t frames, std::size_t height,
                               std::size_t width) {
    EmbeddingField field{frames, height, width, v.size(), {}, true};
    field.values.reserve(frames * height * width * v.size());
    for (std::size_t i = 0; i < frames * height * width; ++i) {
        field.values.insert(field.values.end(), v.begin(), v.end());
    }
    return field;
}

EmbeddingField scenemasker_blend(std::span<const std::vector<double>> scene_per_frame,
                                 std::span<const double> temb_uf, const ForegroundMask& mask, std::size_t height,
                                 std::size_t width) {
    const std::size_t frames = scene_per_frame.size();
    SCENETONE_REQUIRE(mask.frames() == frames, "scenemasker: mask has ", mask.frames(), " frames, field has ",
                      frames);
    const ForegroundMask view = mask.at_resolution(height, width);
    const std::size_t dim = temb_uf.size();
    EmbeddingField field{frames, height, width, dim, std::vector<double>(frames * height * width * dim), true};
    for (std::size_t f = 0; f < frames; ++f) {
        SCENETONE_REQUIRE(scene_per_frame[f].size() == dim, "scenemasker: embedding sizes differ (",
                          scene_per_frame[f].size(), " vs ", dim, ")");
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const auto& src = view.at(f, y, x) ? temb_uf : std::span<const double>(scene_per_frame[f]);
                std::copy(src.begin(), src.end(), field.at(f, y, x).begin());
            }
        }
    }
    return field;
}

EmbeddingField scenemasker_blend(std::span<const double> temb_f, std::span<const double> temb_uf,
                                 const ForegroundMask& mask, std::size_t height, std::size_t width,
                                 std::size_t frames) {
    std::vector<std::vector<double>> scene(frames, std::vector<double>(temb_f.begin(), temb_f.end()));
    return scenemasker_blend(scene, temb_uf, mask, height, width);
}

// ---------------------------------------------------------------------------

double signed_frequency(std::size_t k, std::size_t n) {
    const auto ki = static_cast<long long>(k);
    const auto ni = static_cast<long long>(n);
    const long long s = (2 * ki <= ni) ? ki : ki - ni;
    return static_cast<double>(s) / static_cast<double>(n);
}

LowPassFilter make_lowpass(std::size_t frames, std::size_t height, std::size_t width, double d0, LowPassKind kind) {
    SCENETONE_REQUIRE(frames > 0 && height > 0 && width > 0, "low-pass filter: empty grid");
    if (kind == LowPassKind::Gaussian) {
        SCENETONE_REQUIRE(d0 > 0.0, "low-pass filter: gaussian cutoff must be positive, got ", d0);
    } else {
        SCENETONE_REQUIRE(d0 >= 0.0 && d0 <= 1.0, "low-pass filter: ideal cutoff must lie in [0, 1], got ", d0);
    }
    LowPassFilter filter{frames, height, width, std::vector<double>(frames * height * width), d0, kind};
    const double radius = 0.5 * std::sqrt(3.0);
    for (std::size_t kt = 0; kt < frames; ++kt) {
        const double nt = signed_frequency(kt, frames);
        for (std::size_t kh = 0; kh < height; ++kh) {
            const double nh = signed_frequency(kh, height);
            for (std::size_t kw = 0; kw < width; ++kw) {
                const double nw = signed_frequency(kw, width);
                const double d = std::sqrt(nt * nt + nh * nh + nw * nw) / radius;
                double gain = 0.0;
                if (kind == LowPassKind::Gaussian) {
                    gain = std::exp(-d * d / (2.0 * d0 * d0));
                } else {
                    gain = d <= d0 ? 1.0 : 0.0;
                }
                filter.gains[(kt * height + kh) * width + kw] = gain;
            }
        }
    }
    return filter;
}

FrequencyWeights FrequencyWeights::identity(std::size_t bins, std::size_t channels) {
    return {bins, channels, std::vector<double>(bins * channels, 1.0), true};
}

double identity_weight_bias() { return std::log(std::expm1(0.5)); }

std::vector<double> pool_mel(const audio::MelSpectrogram& mel, std::size_t n_frames) {
    SCENETONE_REQUIRE(mel.n_mels > 0 && mel.n_windows > 0, "frequency weights: empty mel spectrogram");
    SCENETONE_REQUIRE(n_frames > 0, "frequency weights: frame count must be positive");
    const auto windows = static_cast<std::size_t>(mel.n_windows);
    const auto n_mels = static_cast<std::size_t>(mel.n_mels);
    std::vector<double> pooled(n_frames * n_mels, 0.0);
    for (std::size_t k = 0; k < n_frames; ++k) {
        std::size_t begin = 0;
        std::size_t end = 0;
        if (windows >= n_frames) {
            const std::size_t chunk = windows / n_frames;
            begin = k * chunk;
            end = (k + 1 == n_frames) ? windows : begin + chunk;
        } else {
            begin = k * windows / n_frames;
            end = begin + 1;
        }
        for (std::size_t m = 0; m < n_mels; ++m) {
            double acc = 0.0;
            for (std::size_t w = begin; w < end; ++w) {
                acc += mel.bins[m * windows + w];
            }
            pooled[k * n_mels + m] = std::log1p(acc / static_cast<double>(end - begin));
        }
    }
    return pooled;
}

FrequencyWeights encode_freq_weights(std::span<const double> pooled, std::size_t n_frames, std::size_t channels,
                                     const FreqEncoderView& enc, FreqEncoderTrace* trace) {
    const std::size_t n_mels = enc.hidden.in;
    const std::size_t hidden = enc.hidden.out;
    SCENETONE_REQUIRE(pooled.size() == n_frames * n_mels, "frequency weights: pooled features have ", pooled.size(),
                      " values, expected ", n_frames, "x", n_mels);
    SCENETONE_REQUIRE(enc.output.in == hidden && enc.output.out == channels,
                      "frequency weights: encoder output is ", enc.output.out, "x", enc.output.in, ", expected ",
                      channels, "x", hidden);

    std::vector<double> raw(n_frames * channels);
    std::vector<double> act(n_frames * hidden);
    for (std::size_t k = 0; k < n_frames; ++k) {
        auto h = enc.hidden.apply(pooled.subspan(k * n_mels, n_mels));
        for (auto& v : h) {
            v = std::tanh(v);
        }
        const auto r = enc.output.apply(h);
        std::copy(h.begin(), h.end(), act.begin() + static_cast<std::ptrdiff_t>(k * hidden));
        std::copy(r.begin(), r.end(), raw.begin() + static_cast<std::ptrdiff_t>(k * channels));
    }

    FrequencyWeights w{n_frames, channels, std::vector<double>(n_frames * channels), true};
    for (std::size_t k = 0; k < n_frames; ++k) {
        const std::size_t mirror = (n_frames - k) % n_frames;
        for (std::size_t c = 0; c < channels; ++c) {
            const double a = softplus(raw[k * channels + c]) + 0.5;
            const double b = softplus(raw[mirror * channels + c]) + 0.5;
            w.values[k * channels + c] = (a + b) / 2.0;
        }
    }
    if (trace != nullptr) {
        trace->hidden = std::move(act);
        trace->raw = std::move(raw);
    }
    return w;
}

FrequencyWeights encode_freq_weights(const audio::MelSpectrogram& mel, std::size_t n_frames, std::size_t channels,
                                     const FreqEncoderView& enc) {
    const auto pooled = pool_mel(mel, n_frames);
    return encode_freq_weights(pooled, n_frames, channels, enc);
}

void encode_freq_weights_backward(std::span<const double> pooled, const FreqEncoderView& enc,
                                  const FreqEncoderTrace& trace, const FrequencyWeights& grad_weights,
                                  const FreqEncoderGrad& grad) {
    const std::size_t n = grad_weights.bins;
    const std::size_t channels = grad_weights.channels;
    const std::size_t n_mels = enc.hidden.in;
    const std::size_t hidden = enc.hidden.out;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t mirror = (n - k) % n;
        std::vector<double> draw(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            const double dv = 0.5 * (grad_weights.at(k, c) + grad_weights.at(mirror, c));
            draw[c] = dv * sigmoid(trace.raw[k * channels + c]);
        }
        const std::span<const double> h(trace.hidden.data() + k * hidden, hidden);
        auto dh = affine_backward(enc.output, h, draw, grad.output);
        for (std::size_t j = 0; j < hidden; ++j) {
            dh[j] *= 1.0 - h[j] * h[j];
        }
        affine_backward(enc.hidden, pooled.subspan(k * n_mels, n_mels), dh, grad.hidden);
    }
}

// ---------------------------------------------------------------------------

namespace {

void check_fuse_shapes(const Tensor4& z, const FrequencyWeights& weights, const LowPassFilter& filter) {
    SCENETONE_REQUIRE(weights.bins == z.n() && weights.channels == z.c(), "freq_fuse: weights are ", weights.bins,
                      "x", weights.channels, " but the volume has ", z.n(), " frames and ", z.c(), " channels");
    SCENETONE_REQUIRE(filter.n0 == z.n() && filter.n1 == z.h() && filter.n2 == z.w(), "freq_fuse: filter grid ",
                      filter.n0, "x", filter.n1, "x", filter.n2, " does not match volume ", z.n(), "x", z.h(), "x",
                      z.w());
}

// Combined gain P + (1 - P) * w[k_t, c] for one channel.
std::vector<double> channel_gain(const FrequencyWeights& weights, const LowPassFilter& filter, std::size_t c) {
    std::vector<double> gain(filter.gains.size());
    const std::size_t plane = filter.n1 * filter.n2;
    for (std::size_t kt = 0; kt < filter.n0; ++kt) {
        const double w = weights.at(kt, c);
        for (std::size_t i = 0; i < plane; ++i) {
            const double p = filter.gains[kt * plane + i];
            gain[kt * plane + i] = p + (1.0 - p) * w;
        }
    }
    return gain;
}

void gather_channel(const Tensor4& z, std::size_t c, std::vector<fft::Complex>& buffer) {
    const std::size_t plane = z.h() * z.w();
    for (std::size_t n = 0; n < z.n(); ++n) {
        const auto src = z.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) {
            buffer[n * plane + i] = fft::Complex(src[i], 0.0);
        }
    }
}

}  // namespace

Tensor4 freq_fuse(const Tensor4& z, const FrequencyWeights& weights, const LowPassFilter& filter) {
    check_fuse_shapes(z, weights, filter);
    Tensor4 out(z.shape());
    const std::size_t plane = z.h() * z.w();
    std::vector<fft::Complex> buffer(z.n() * plane);
    for (std::size_t c = 0; c < z.c(); ++c) {
        gather_channel(z, c, buffer);
        fft::transform3d(buffer, z.n(), z.h(), z.w(), false);
        const auto gain = channel_gain(weights, filter, c);
        for (std::size_t i = 0; i < buffer.size(); ++i) {
            buffer[i] *= gain[i];
        }
        fft::transform3d(buffer, z.n(), z.h(), z.w(), true);
        for (std::size_t n = 0; n < z.n(); ++n) {
            auto dst = out.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
                const auto& v = buffer[n * plane + i];
                if (std::abs(v.imag()) > kMaxImaginaryResidual) {
                    throw ConsistencyError("freq_fuse: imaginary residual " + std::to_string(std::abs(v.imag())) +
                                           " exceeds tolerance; frequency weights are not conjugate-symmetric");
                }
                dst[i] = v.real();
            }
        }
    }
    return out;
}

LatentVideo freq_fuse(const LatentVideo& z, const FrequencyWeights& weights, const LowPassFilter& filter) {
    return {freq_fuse(z.values, weights, filter)};
}

FreqFuseGrads freq_fuse_backward(const Tensor4& z, const Tensor4& grad_out, const FrequencyWeights& weights,
                                 const LowPassFilter& filter) {
    check_fuse_shapes(z, weights, filter);
    SCENETONE_REQUIRE(z.same_shape(grad_out), "freq_fuse_backward: gradient shape mismatch");
    FreqFuseGrads grads{Tensor4(z.shape()), {weights.bins, weights.channels,
                                             std::vector<double>(weights.values.size(), 0.0), false}};
    const std::size_t plane = z.h() * z.w();
    const double inv_total = 1.0 / static_cast<double>(z.n() * plane);
    std::vector<fft::Complex> spectrum(z.n() * plane);
    std::vector<fft::Complex> gspec(z.n() * plane);
    for (std::size_t c = 0; c < z.c(); ++c) {
        gather_channel(z, c, spectrum);
        fft::transform3d(spectrum, z.n(), z.h(), z.w(), false);
        gather_channel(grad_out, c, gspec);
        fft::transform3d(gspec, z.n(), z.h(), z.w(), false);

        for (std::size_t kt = 0; kt < z.n(); ++kt) {
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t k = kt * plane + i;
                const double dgain = (spectrum[k] * std::conj(gspec[k])).real() * inv_total;
                acc += (1.0 - filter.gains[k]) * dgain;
            }
            grads.weights.values[kt * weights.channels + c] = acc;
        }

        const auto gain = channel_gain(weights, filter, c);
        for (std::size_t i = 0; i < gspec.size(); ++i) {
            gspec[i] *= gain[i];
        }
        fft::transform3d(gspec, z.n(), z.h(), z.w(), true);
        for (std::size_t n = 0; n < z.n(); ++n) {
            auto dst = grads.input.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] = gspec[n * plane + i].real();
            }
        }
    }
    return grads;
}

}  // namespace scenetone::cond
