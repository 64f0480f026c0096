// SPDX-License-Identifier: Apache-2.0

#include "scenetone/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "scenetone/error.hpp"

namespace scenetone::nn {

void DenoiserConfig::validate() const {
    SCENETONE_REQUIRE(latent_channels > 0 && base_channels > 0, "denoiser: channel counts must be positive");
    SCENETONE_REQUIRE(!channel_mult.empty(), "denoiser: need at least one level");
    for (int m : channel_mult) {
        SCENETONE_REQUIRE(m > 0, "denoiser: channel multipliers must be positive");
    }
    SCENETONE_REQUIRE(temporal_kernel > 0 && temporal_kernel % 2 == 1, "denoiser: temporal kernel must be odd");
    SCENETONE_REQUIRE(spatial_kernel > 0 && spatial_kernel % 2 == 1, "denoiser: spatial kernel must be odd");
    SCENETONE_REQUIRE(d_emb > 0 && d_emb % 2 == 0, "denoiser: embedding width must be even");
    SCENETONE_REQUIRE(audio_dim > 0 && n_mels > 0 && enc_hidden > 0 && mlp_hidden > 0,
                      "denoiser: conditioning widths must be positive");
}

// ---------------------------------------------------------------------------

const ParamEntry& ParamLayout::add(const std::string& name, std::vector<std::size_t> shape) {
    SCENETONE_REQUIRE(!contains(name), "parameter '", name, "' declared twice");
    ParamEntry entry;
    entry.name = name;
    entry.offset = m_total;
    entry.size = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    entry.shape = std::move(shape);
    m_total += entry.size;
    m_index[name] = m_entries.size();
    m_entries.push_back(std::move(entry));
    return m_entries.back();
}

const ParamEntry& ParamLayout::at(const std::string& name) const {
    auto it = m_index.find(name);
    SCENETONE_REQUIRE(it != m_index.end(), "unknown parameter '", name, "'");
    return m_entries[it->second];
}

std::span<const double> DenoiserParams::view(const std::string& name) const {
    const auto& e = layout->at(name);
    return {values.data() + e.offset, e.size};
}

std::span<double> DenoiserParams::view(const std::string& name) {
    const auto& e = layout->at(name);
    return {values.data() + e.offset, e.size};
}

bool DenoiserParams::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Layers

namespace {

using SizeT = std::size_t;

void check_finite(const Tensor4& t, const std::string& layer) {
    if (!t.all_finite()) {
        throw NumericError("denoiser: non-finite activation in layer '" + layer + "'");
    }
}

void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (SizeT i = 0; i < y.size(); ++i) {
        y[i] += a * x[i];
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (SizeT i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

// Weights [cout][cin][k][k], zero padding k / 2.
Tensor4 conv2d(const Tensor4& x, std::span<const double> w, std::span<const double> b, SizeT cout, int k) {
    const SizeT cin = x.c();
    const SizeT H = x.h();
    const SizeT W = x.w();
    const int pad = k / 2;
    Tensor4 y(x.n(), cout, H, W);
    for (SizeT n = 0; n < x.n(); ++n) {
        for (SizeT o = 0; o < cout; ++o) {
            auto out = y.plane(n, o);
            std::fill(out.begin(), out.end(), b[o]);
            for (SizeT i = 0; i < cin; ++i) {
                const auto in = x.plane(n, i);
                for (int ky = 0; ky < k; ++ky) {
                    const long dy = ky - pad;
                    const SizeT y0 = dy < 0 ? static_cast<SizeT>(-dy) : 0;
                    const SizeT y1 = dy > 0 ? H - static_cast<SizeT>(dy) : H;
                    for (int kx = 0; kx < k; ++kx) {
                        const long dx = kx - pad;
                        const double wv = w[((o * cin + i) * k + ky) * k + kx];
                        const SizeT x0 = dx < 0 ? static_cast<SizeT>(-dx) : 0;
                        const SizeT x1 = dx > 0 ? W - static_cast<SizeT>(dx) : W;
                        for (SizeT yy = y0; yy < y1; ++yy) {
                            const double* src = in.data() + (yy + dy) * W + dx;
                            double* dst = out.data() + yy * W;
                            for (SizeT xx = x0; xx < x1; ++xx) {
                                dst[xx] += wv * src[xx];
                            }
                        }
                    }
                }
            }
        }
    }
    return y;
}

Tensor4 conv2d_backward(const Tensor4& x, const Tensor4& gy, std::span<const double> w, int k, std::span<double> gw,
                        std::span<double> gb, bool need_input) {
    const SizeT cin = x.c();
    const SizeT cout = gy.c();
    const SizeT H = x.h();
    const SizeT W = x.w();
    const int pad = k / 2;
    Tensor4 gx = need_input ? Tensor4(x.shape()) : Tensor4();
    for (SizeT n = 0; n < x.n(); ++n) {
        for (SizeT o = 0; o < cout; ++o) {
            const auto g = gy.plane(n, o);
            gb[o] += std::accumulate(g.begin(), g.end(), 0.0);
            for (SizeT i = 0; i < cin; ++i) {
                const auto in = x.plane(n, i);
                for (int ky = 0; ky < k; ++ky) {
                    const long dy = ky - pad;
                    const SizeT y0 = dy < 0 ? static_cast<SizeT>(-dy) : 0;
                    const SizeT y1 = dy > 0 ? H - static_cast<SizeT>(dy) : H;
                    for (int kx = 0; kx < k; ++kx) {
                        const long dx = kx - pad;
                        const SizeT widx = ((o * cin + i) * k + ky) * k + kx;
                        const double wv = w[widx];
                        const SizeT x0 = dx < 0 ? static_cast<SizeT>(-dx) : 0;
                        const SizeT x1 = dx > 0 ? W - static_cast<SizeT>(dx) : W;
                        double acc = 0.0;
                        for (SizeT yy = y0; yy < y1; ++yy) {
                            const double* src = in.data() + (yy + dy) * W + dx;
                            const double* gr = g.data() + yy * W;
                            for (SizeT xx = x0; xx < x1; ++xx) {
                                acc += gr[xx] * src[xx];
                            }
                            if (need_input) {
                                double* dst = gx.plane(n, i).data() + (yy + dy) * W + dx;
                                for (SizeT xx = x0; xx < x1; ++xx) {
                                    dst[xx] += wv * gr[xx];
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    return gx;
}

// Weights [cout][cin][k] over the frame axis, zero padding k / 2.
Tensor4 conv_time(const Tensor4& x, std::span<const double> w, std::span<const double> b, SizeT cout, int k) {
    const SizeT cin = x.c();
    const long frames = static_cast<long>(x.n());
    const int pad = k / 2;
    Tensor4 y(x.n(), cout, x.h(), x.w());
    for (long n = 0; n < frames; ++n) {
        for (SizeT o = 0; o < cout; ++o) {
            auto out = y.plane(static_cast<SizeT>(n), o);
            std::fill(out.begin(), out.end(), b[o]);
            for (SizeT i = 0; i < cin; ++i) {
                for (int j = 0; j < k; ++j) {
                    const long m = n + j - pad;
                    if (m < 0 || m >= frames) {
                        continue;
                    }
                    axpy(w[(o * cin + i) * k + j], x.plane(static_cast<SizeT>(m), i), out);
                }
            }
        }
    }
    return y;
}

Tensor4 conv_time_backward(const Tensor4& x, const Tensor4& gy, std::span<const double> w, int k,
                           std::span<double> gw, std::span<double> gb) {
    const SizeT cin = x.c();
    const SizeT cout = gy.c();
    const long frames = static_cast<long>(x.n());
    const int pad = k / 2;
    Tensor4 gx(x.shape());
    for (long n = 0; n < frames; ++n) {
        for (SizeT o = 0; o < cout; ++o) {
            const auto g = gy.plane(static_cast<SizeT>(n), o);
            gb[o] += std::accumulate(g.begin(), g.end(), 0.0);
            for (SizeT i = 0; i < cin; ++i) {
                for (int j = 0; j < k; ++j) {
                    const long m = n + j - pad;
                    if (m < 0 || m >= frames) {
                        continue;
                    }
                    const SizeT widx = (o * cin + i) * k + j;
                    gw[widx] += dot(g, x.plane(static_cast<SizeT>(m), i));
                    axpy(w[widx], g, gx.plane(static_cast<SizeT>(m), i));
                }
            }
        }
    }
    return gx;
}

// Weights [cout][cin].
Tensor4 conv_point(const Tensor4& x, std::span<const double> w, std::span<const double> b, SizeT cout) {
    const SizeT cin = x.c();
    Tensor4 y(x.n(), cout, x.h(), x.w());
    for (SizeT n = 0; n < x.n(); ++n) {
        for (SizeT o = 0; o < cout; ++o) {
            auto out = y.plane(n, o);
            std::fill(out.begin(), out.end(), b[o]);
            for (SizeT i = 0; i < cin; ++i) {
                axpy(w[o * cin + i], x.plane(n, i), out);
            }
        }
    }
    return y;
}

void conv_point_backward(const Tensor4& x, const Tensor4& gy, std::span<const double> w, std::span<double> gw,
                         std::span<double> gb, Tensor4& gx) {
    const SizeT cin = x.c();
    for (SizeT n = 0; n < x.n(); ++n) {
        for (SizeT o = 0; o < gy.c(); ++o) {
            const auto g = gy.plane(n, o);
            gb[o] += std::accumulate(g.begin(), g.end(), 0.0);
            for (SizeT i = 0; i < cin; ++i) {
                gw[o * cin + i] += dot(g, x.plane(n, i));
                axpy(w[o * cin + i], g, gx.plane(n, i));
            }
        }
    }
}

void tanh_inplace(Tensor4& t) {
    for (auto& v : t.data()) {
        v = std::tanh(v);
    }
}

// g *= 1 - h^2 for h = tanh(a).
void tanh_backward(const Tensor4& h, Tensor4& g) {
    const auto hv = h.data();
    auto gv = g.data();
    for (SizeT i = 0; i < gv.size(); ++i) {
        gv[i] *= 1.0 - hv[i] * hv[i];
    }
}

Tensor4 avg_pool2(const Tensor4& x) {
    SCENETONE_REQUIRE(x.h() % 2 == 0 && x.w() % 2 == 0, "denoiser: cannot pool a ", x.h(), "x", x.w(), " grid");
    Tensor4 y(x.n(), x.c(), x.h() / 2, x.w() / 2);
    for (SizeT n = 0; n < x.n(); ++n) {
        for (SizeT c = 0; c < x.c(); ++c) {
            for (SizeT yy = 0; yy < y.h(); ++yy) {
                for (SizeT xx = 0; xx < y.w(); ++xx) {
                    y(n, c, yy, xx) = 0.25 * (x(n, c, 2 * yy, 2 * xx) + x(n, c, 2 * yy, 2 * xx + 1) +
                                              x(n, c, 2 * yy + 1, 2 * xx) + x(n, c, 2 * yy + 1, 2 * xx + 1));
                }
            }
        }
    }
    return y;
}

Tensor4 avg_pool2_backward(const Tensor4& gy) {
    Tensor4 gx(gy.n(), gy.c(), gy.h() * 2, gy.w() * 2);
    for (SizeT n = 0; n < gx.n(); ++n) {
        for (SizeT c = 0; c < gx.c(); ++c) {
            for (SizeT yy = 0; yy < gx.h(); ++yy) {
                for (SizeT xx = 0; xx < gx.w(); ++xx) {
                    gx(n, c, yy, xx) = 0.25 * gy(n, c, yy / 2, xx / 2);
                }
            }
        }
    }
    return gx;
}

Tensor4 upsample2(const Tensor4& x) {
    Tensor4 y(x.n(), x.c(), x.h() * 2, x.w() * 2);
    for (SizeT n = 0; n < y.n(); ++n) {
        for (SizeT c = 0; c < y.c(); ++c) {
            for (SizeT yy = 0; yy < y.h(); ++yy) {
                for (SizeT xx = 0; xx < y.w(); ++xx) {
                    y(n, c, yy, xx) = x(n, c, yy / 2, xx / 2);
                }
            }
        }
    }
    return y;
}

Tensor4 upsample2_backward(const Tensor4& gy) {
    Tensor4 gx(gy.n(), gy.c(), gy.h() / 2, gy.w() / 2);
    for (SizeT n = 0; n < gy.n(); ++n) {
        for (SizeT c = 0; c < gy.c(); ++c) {
            for (SizeT yy = 0; yy < gy.h(); ++yy) {
                for (SizeT xx = 0; xx < gy.w(); ++xx) {
                    gx(n, c, yy / 2, xx / 2) += gy(n, c, yy, xx);
                }
            }
        }
    }
    return gx;
}

Tensor4 concat_channels(const Tensor4& a, const Tensor4& b) {
    Tensor4 y(a.n(), a.c() + b.c(), a.h(), a.w());
    for (SizeT n = 0; n < a.n(); ++n) {
        for (SizeT c = 0; c < a.c(); ++c) {
            std::ranges::copy(a.plane(n, c), y.plane(n, c).begin());
        }
        for (SizeT c = 0; c < b.c(); ++c) {
            std::ranges::copy(b.plane(n, c), y.plane(n, a.c() + c).begin());
        }
    }
    return y;
}

std::pair<Tensor4, Tensor4> split_channels(const Tensor4& g, SizeT first) {
    Tensor4 a(g.n(), first, g.h(), g.w());
    Tensor4 b(g.n(), g.c() - first, g.h(), g.w());
    for (SizeT n = 0; n < g.n(); ++n) {
        for (SizeT c = 0; c < g.c(); ++c) {
            auto dst = c < first ? a.plane(n, c) : b.plane(n, c - first);
            std::ranges::copy(g.plane(n, c), dst.begin());
        }
    }
    return {std::move(a), std::move(b)};
}

void add_into(Tensor4& dst, const Tensor4& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    auto d = dst.data();
    const auto s = src.data();
    for (SizeT i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

// ---------------------------------------------------------------------------
// Named parameter access

template <typename Span>
struct BlockSpans {
    Span spatial_w, spatial_b, t1_w, t1_b, field_w, field_b, t2_w, t2_b, skip_w, skip_b;
};

template <typename Span, typename Getter>
BlockSpans<Span> block_spans(const std::string& prefix, bool has_skip, Getter get) {
    BlockSpans<Span> s;
    s.spatial_w = get(prefix + ".spatial.weight");
    s.spatial_b = get(prefix + ".spatial.bias");
    s.t1_w = get(prefix + ".temporal1.weight");
    s.t1_b = get(prefix + ".temporal1.bias");
    s.field_w = get(prefix + ".field.weight");
    s.field_b = get(prefix + ".field.bias");
    s.t2_w = get(prefix + ".temporal2.weight");
    s.t2_b = get(prefix + ".temporal2.bias");
    if (has_skip) {
        s.skip_w = get(prefix + ".skip.weight");
        s.skip_b = get(prefix + ".skip.bias");
    }
    return s;
}

class GradAccess {
public:
    GradAccess(const ParamLayout& layout, std::vector<double>& grads) : m_layout(layout), m_grads(grads) {}
    std::span<double> operator()(const std::string& name) const {
        const auto& e = m_layout.at(name);
        return {m_grads.data() + e.offset, e.size};
    }

private:
    const ParamLayout& m_layout;
    std::vector<double>& m_grads;
};

std::string down_name(int level) { return "down" + std::to_string(level); }
std::string up_name(int level) { return "up" + std::to_string(level); }
std::string stage_name(int stage) { return "freq.stage" + std::to_string(stage); }

cond::AffineView affine(const DenoiserParams& p, const std::string& prefix, SizeT out, SizeT in) {
    return {p.view(prefix + ".weight"), p.view(prefix + ".bias"), out, in};
}

cond::AffineGrad affine_grad(const GradAccess& g, const std::string& prefix) {
    return {g(prefix + ".weight"), g(prefix + ".bias")};
}

// Conditioning derived from the bundle for one call.
struct CondState {
    std::vector<double> temb;
    std::vector<double> temb_f;
    bool tasi = false;
    bool magnitude = false;
    bool scenemasker = false;
    bool freq = false;
    std::vector<std::vector<double>> scene;  // per frame
    std::vector<cond::ForegroundMask> masks;  // per level, when the SceneMasker is active
};

}  // namespace

// ---------------------------------------------------------------------------

struct BlockTape {
    Tensor4 x;
    Tensor4 h1;
    Tensor4 h2;
};

struct StageTape {
    bool active = false;
    Tensor4 x;
    cond::FrequencyWeights weights;
    cond::FreqEncoderTrace trace;
    cond::LowPassFilter filter;
};

struct Denoiser::Tape {
    Tensor4 z;
    Tensor4 head_in;
    CondState cond;
    std::vector<BlockTape> down;
    std::vector<BlockTape> up;
    std::vector<StageTape> stages;
    std::vector<double> pooled_mel;
    std::vector<double> semantic;
    std::vector<double> magnitude;
};

Denoiser::Denoiser(DenoiserConfig config) : m_config(std::move(config)) {
    m_config.validate();
    auto layout = std::make_shared<ParamLayout>();
    const auto& c = m_config;
    const auto k = static_cast<SizeT>(c.spatial_kernel);
    const auto kt = static_cast<SizeT>(c.temporal_kernel);
    const auto d = static_cast<SizeT>(c.d_emb);
    const auto lat = static_cast<SizeT>(c.latent_channels);

    auto add_block = [&](const std::string& prefix, SizeT cin, SizeT cout) {
        layout->add(prefix + ".spatial.weight", {cout, cin, k, k});
        layout->add(prefix + ".spatial.bias", {cout});
        layout->add(prefix + ".temporal1.weight", {cout, cout, kt});
        layout->add(prefix + ".temporal1.bias", {cout});
        layout->add(prefix + ".field.weight", {cout, d});
        layout->add(prefix + ".field.bias", {cout});
        layout->add(prefix + ".temporal2.weight", {cout, cout, kt});
        layout->add(prefix + ".temporal2.bias", {cout});
        if (cin != cout) {
            layout->add(prefix + ".skip.weight", {cout, cin});
            layout->add(prefix + ".skip.bias", {cout});
        }
    };

    const int levels = c.levels();
    const auto c0 = static_cast<SizeT>(c.channels_at(0));
    layout->add("conv_in.weight", {c0, lat, k, k});
    layout->add("conv_in.bias", {c0});
    for (int l = 0; l < levels; ++l) {
        const auto cin = static_cast<SizeT>(l == 0 ? c.channels_at(0) : c.channels_at(l - 1));
        add_block(down_name(l), cin, static_cast<SizeT>(c.channels_at(l)));
    }
    for (int l = levels - 2; l >= 0; --l) {
        const auto cin = static_cast<SizeT>(c.channels_at(l + 1) + c.channels_at(l));
        add_block(up_name(l), cin, static_cast<SizeT>(c.channels_at(l)));
    }
    layout->add("conv_out.weight", {lat, c0, k, k});
    layout->add("conv_out.bias", {lat});

    const auto audio_dim = static_cast<SizeT>(c.audio_dim);
    const auto mlp = static_cast<SizeT>(c.mlp_hidden);
    layout->add("tasi.proj.weight", {d, audio_dim});
    layout->add("tasi.proj.bias", {d});
    layout->add("magnitude.inner.weight", {mlp, d});
    layout->add("magnitude.inner.bias", {mlp});
    layout->add("magnitude.outer.weight", {d, mlp});
    layout->add("magnitude.outer.bias", {d});

    const auto mels = static_cast<SizeT>(c.n_mels);
    const auto hidden = static_cast<SizeT>(c.enc_hidden);
    for (int s = 0; s < c.stage_count(); ++s) {
        const int level = s < levels ? s : (levels - 2 - (s - levels));
        const auto channels = static_cast<SizeT>(c.channels_at(level));
        layout->add(stage_name(s) + ".hidden.weight", {hidden, mels});
        layout->add(stage_name(s) + ".hidden.bias", {hidden});
        layout->add(stage_name(s) + ".output.weight", {channels, hidden});
        layout->add(stage_name(s) + ".output.bias", {channels});
    }
    m_layout = std::move(layout);
}

DenoiserParams Denoiser::init(std::uint64_t seed) const {
    DenoiserParams params{m_layout, std::vector<double>(m_layout->total(), 0.0)};
    std::mt19937_64 rng(seed);
    const double identity_bias = cond::identity_weight_bias();
    for (const auto& e : m_layout->entries()) {
        auto v = params.view(e.name);
        const bool weight = e.name.ends_with(".weight");
        const bool zero = e.group() == "conv_out" || e.group() == "tasi" || e.name == "magnitude.outer.weight" ||
                          (e.group() == "freq" && e.name.ends_with(".output.weight"));
        if (e.group() == "freq" && e.name.ends_with(".output.bias")) {
            std::fill(v.begin(), v.end(), identity_bias);
            continue;
        }
        if (!weight || zero) {
            continue;
        }
        const SizeT fan_in = e.size / e.shape[0];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& x : v) {
            x = dist(rng);
        }
    }
    return params;
}

namespace {

CondState build_condition(const DenoiserConfig& config, const DenoiserParams& params, const Tensor4& z, int t,
                          const diffusion::ConditioningBundle& bundle) {
    CondState cs;
    const auto d = static_cast<SizeT>(config.d_emb);
    const SizeT frames = z.n();
    cs.temb = cond::timestep_embedding(t, config.d_emb).values;
    cs.tasi = config.flags.tasi && bundle.tasi_active();
    cs.magnitude = cs.tasi && config.flags.magnitude && bundle.magnitude_active();
    cs.scenemasker = cs.tasi && config.flags.scenemasker && bundle.scenemasker_active();
    cs.freq = config.flags.freqfuse && !bundle.freq_identity();

    std::vector<double> scene_vec = cs.temb;
    if (cs.tasi) {
        const auto& e = *bundle.semantic;
        SCENETONE_REQUIRE(e.dim() == static_cast<SizeT>(config.audio_dim), "denoiser: audio embedding has ", e.dim(),
                          " values, model expects ", config.audio_dim);
        cs.temb_f = cond::tasi_fuse({cs.temb, t}, e, affine(params, "tasi.proj", d, e.dim()));
        scene_vec = cs.temb_f;
    }
    if (cs.magnitude) {
        const auto& env = *bundle.magnitude;
        SCENETONE_REQUIRE(env.size() == frames, "denoiser: magnitude envelope has ", env.size(),
                          " weights for ", frames, " frames");
        const auto mlp = static_cast<SizeT>(config.mlp_hidden);
        cond::ResidualMlpView f{affine(params, "magnitude.inner", mlp, d), affine(params, "magnitude.outer", d, mlp)};
        cs.scene = cond::magnitude_modulate(cs.temb_f, env, f);
    } else {
        cs.scene.assign(frames, scene_vec);
    }
    if (cs.scenemasker) {
        const auto& mask = *bundle.mask;
        SCENETONE_REQUIRE(mask.frames() == frames, "denoiser: mask has ", mask.frames(), " frames, latent has ",
                          frames);
        for (int l = 0; l < config.levels(); ++l) {
            const SizeT h = z.h() >> l;
            const SizeT w = z.w() >> l;
            SCENETONE_REQUIRE(h > 0 && w > 0 && mask.height() % h == 0 && mask.width() % w == 0, "denoiser: mask ",
                              mask.height(), "x", mask.width(), " does not downsample to ", h, "x", w);
            cs.masks.push_back(mask.at_resolution(h, w));
        }
    }
    if (cs.freq) {
        SCENETONE_REQUIRE(bundle.pooled_mel.size() == frames * static_cast<SizeT>(config.n_mels),
                          "denoiser: pooled mel has ", bundle.pooled_mel.size(), " values, expected ", frames, "x",
                          config.n_mels);
    }
    return cs;
}

// Adds A v + a to every location, where v is the field vector: temb at
// foreground locations when the SceneMasker is active, the frame's scene
// vector elsewhere.
void add_field_bias(Tensor4& a, const CondState& cs, int level, std::span<const double> w, std::span<const double> b) {
    const SizeT cout = a.c();
    const SizeT d = cs.temb.size();
    auto project = [&](std::span<const double> v) {
        std::vector<double> out(b.begin(), b.end());
        for (SizeT o = 0; o < cout; ++o) {
            out[o] += dot(w.subspan(o * d, d), v);
        }
        return out;
    };
    const auto fg = cs.scenemasker ? project(cs.temb) : std::vector<double>();
    const SizeT plane = a.h() * a.w();
    for (SizeT n = 0; n < a.n(); ++n) {
        const auto bg = project(cs.scene[n]);
        for (SizeT o = 0; o < cout; ++o) {
            auto p = a.plane(n, o);
            for (SizeT i = 0; i < plane; ++i) {
                const bool is_fg = cs.scenemasker && cs.masks[level].at(n, i / a.w(), i % a.w());
                p[i] += is_fg ? fg[o] : bg[o];
            }
        }
    }
}

void add_field_bias_backward(const Tensor4& g, const CondState& cs, int level, std::span<const double> w,
                             std::span<double> gw, std::span<double> gb, std::vector<std::vector<double>>& gscene) {
    const SizeT cout = g.c();
    const SizeT d = cs.temb.size();
    const SizeT plane = g.h() * g.w();
    std::vector<double> fg_sum(cout, 0.0);
    for (SizeT n = 0; n < g.n(); ++n) {
        std::vector<double> bg_sum(cout, 0.0);
        for (SizeT o = 0; o < cout; ++o) {
            const auto p = g.plane(n, o);
            for (SizeT i = 0; i < plane; ++i) {
                const bool is_fg = cs.scenemasker && cs.masks[level].at(n, i / g.w(), i % g.w());
                (is_fg ? fg_sum[o] : bg_sum[o]) += p[i];
            }
        }
        for (SizeT o = 0; o < cout; ++o) {
            gb[o] += bg_sum[o];
            axpy(bg_sum[o], cs.scene[n], gw.subspan(o * d, d));
            axpy(bg_sum[o], w.subspan(o * d, d), gscene[n]);
        }
    }
    if (cs.scenemasker) {
        for (SizeT o = 0; o < cout; ++o) {
            gb[o] += fg_sum[o];
            axpy(fg_sum[o], cs.temb, gw.subspan(o * d, d));
        }
    }
}

}  // namespace

LatentVideo Denoiser::run(const DenoiserParams& params, const LatentVideo& z_t, int t,
                          const diffusion::ConditioningBundle& bundle, Tape* tape) const {
    const auto& c = m_config;
    const auto& z = z_t.values;
    SCENETONE_REQUIRE(params.layout == m_layout || (params.layout && params.layout->total() == m_layout->total()),
                      "denoiser: parameters belong to a different model");
    SCENETONE_REQUIRE(params.values.size() == m_layout->total(), "denoiser: expected ", m_layout->total(),
                      " parameters, got ", params.values.size());
    SCENETONE_REQUIRE(z.c() == static_cast<SizeT>(c.latent_channels), "denoiser: latent has ", z.c(),
                      " channels, model expects ", c.latent_channels);
    SCENETONE_REQUIRE(z.n() > 0, "denoiser: empty latent");
    const SizeT scale = SizeT{1} << (c.levels() - 1);
    SCENETONE_REQUIRE(z.h() % scale == 0 && z.w() % scale == 0 && z.h() >= scale && z.w() >= scale,
                      "denoiser: latent grid ", z.h(), "x", z.w(), " is not divisible by ", scale);

    CondState cs = build_condition(c, params, z, t, bundle);
    const int levels = c.levels();
    const int k = c.spatial_kernel;
    const int kt = c.temporal_kernel;
    auto get = [&](const std::string& name) { return params.view(name); };

    auto block = [&](const std::string& prefix, int level, const Tensor4& x, BlockTape* bt) {
        const auto cout = static_cast<SizeT>(c.channels_at(level));
        const auto s = block_spans<std::span<const double>>(prefix, x.c() != cout, get);
        Tensor4 h1 = conv2d(x, s.spatial_w, s.spatial_b, cout, k);
        tanh_inplace(h1);
        check_finite(h1, prefix + ".spatial");
        Tensor4 h2 = conv_time(h1, s.t1_w, s.t1_b, cout, kt);
        add_field_bias(h2, cs, level, s.field_w, s.field_b);
        tanh_inplace(h2);
        check_finite(h2, prefix + ".temporal1");
        Tensor4 out = conv_time(h2, s.t2_w, s.t2_b, cout, kt);
        if (x.c() != cout) {
            add_into(out, conv_point(x, s.skip_w, s.skip_b, cout));
        } else {
            add_into(out, x);
        }
        check_finite(out, prefix + ".temporal2");
        if (bt != nullptr) {
            *bt = {x, std::move(h1), std::move(h2)};
        }
        return out;
    };

    auto stage = [&](int index, Tensor4 x, StageTape* st) {
        if (!cs.freq) {
            return x;
        }
        const std::string prefix = stage_name(index);
        const auto hidden = static_cast<SizeT>(c.enc_hidden);
        const cond::FreqEncoderView enc{affine(params, prefix + ".hidden", hidden, static_cast<SizeT>(c.n_mels)),
                                        affine(params, prefix + ".output", x.c(), hidden)};
        cond::FreqEncoderTrace trace;
        auto weights = cond::encode_freq_weights(bundle.pooled_mel, x.n(), x.c(), enc, &trace);
        auto filter = cond::make_lowpass(x.n(), x.h(), x.w(), c.lowpass_d0, c.lowpass_kind);
        Tensor4 y = cond::freq_fuse(x, weights, filter);
        check_finite(y, prefix);
        if (st != nullptr) {
            *st = {true, std::move(x), std::move(weights), std::move(trace), std::move(filter)};
        }
        return y;
    };

    if (tape != nullptr) {
        tape->z = z;
        tape->down.assign(static_cast<SizeT>(levels), {});
        tape->up.assign(static_cast<SizeT>(std::max(levels - 1, 0)), {});
        tape->stages.assign(static_cast<SizeT>(c.stage_count()), {});
    }

    Tensor4 x = conv2d(z, get("conv_in.weight"), get("conv_in.bias"), static_cast<SizeT>(c.channels_at(0)), k);
    check_finite(x, "conv_in");
    std::vector<Tensor4> skips;
    for (int l = 0; l < levels; ++l) {
        if (l > 0) {
            x = avg_pool2(x);
        }
        x = block(down_name(l), l, x, tape ? &tape->down[l] : nullptr);
        x = stage(l, std::move(x), tape ? &tape->stages[l] : nullptr);
        skips.push_back(x);
    }
    for (int l = levels - 2; l >= 0; --l) {
        const int s = levels + (levels - 2 - l);
        x = concat_channels(upsample2(x), skips[l]);
        x = block(up_name(l), l, x, tape ? &tape->up[l] : nullptr);
        x = stage(s, std::move(x), tape ? &tape->stages[s] : nullptr);
    }
    Tensor4 out = conv2d(x, get("conv_out.weight"), get("conv_out.bias"), static_cast<SizeT>(c.latent_channels), k);
    check_finite(out, "conv_out");
    if (tape != nullptr) {
        tape->head_in = std::move(x);
        tape->cond = std::move(cs);
    }
    return {std::move(out)};
}

void Denoiser::backprop(const DenoiserParams& params, const Tape& tape, const Tensor4& grad_out,
                        std::vector<double>& grads) const {
    const auto& c = m_config;
    const auto& cs = tape.cond;
    const int levels = c.levels();
    const int k = c.spatial_kernel;
    const int kt = c.temporal_kernel;
    const GradAccess gacc(*m_layout, grads);
    auto get = [&](const std::string& name) { return params.view(name); };
    std::vector<std::vector<double>> gscene(cs.scene.size(), std::vector<double>(cs.temb.size(), 0.0));

    auto block_back = [&](const std::string& prefix, int level, const BlockTape& bt, const Tensor4& g) {
        const auto cout = static_cast<SizeT>(c.channels_at(level));
        const bool has_skip = bt.x.c() != cout;
        const auto s = block_spans<std::span<const double>>(prefix, has_skip, get);
        const auto gs = block_spans<std::span<double>>(prefix, has_skip, gacc);
        Tensor4 gx(bt.x.shape());
        if (has_skip) {
            conv_point_backward(bt.x, g, s.skip_w, gs.skip_w, gs.skip_b, gx);
        } else {
            add_into(gx, g);
        }
        Tensor4 g2 = conv_time_backward(bt.h2, g, s.t2_w, kt, gs.t2_w, gs.t2_b);
        tanh_backward(bt.h2, g2);
        add_field_bias_backward(g2, cs, level, s.field_w, gs.field_w, gs.field_b, gscene);
        Tensor4 g1 = conv_time_backward(bt.h1, g2, s.t1_w, kt, gs.t1_w, gs.t1_b);
        tanh_backward(bt.h1, g1);
        add_into(gx, conv2d_backward(bt.x, g1, s.spatial_w, k, gs.spatial_w, gs.spatial_b, true));
        return gx;
    };

    auto stage_back = [&](int index, Tensor4 g) {
        const auto& st = tape.stages[index];
        if (!st.active) {
            return g;
        }
        const std::string prefix = stage_name(index);
        const auto hidden = static_cast<SizeT>(c.enc_hidden);
        const cond::FreqEncoderView enc{affine(params, prefix + ".hidden", hidden, static_cast<SizeT>(c.n_mels)),
                                        affine(params, prefix + ".output", st.x.c(), hidden)};
        auto fg = cond::freq_fuse_backward(st.x, g, st.weights, st.filter);
        const cond::FreqEncoderGrad enc_grad{affine_grad(gacc, prefix + ".hidden"),
                                             affine_grad(gacc, prefix + ".output")};
        cond::encode_freq_weights_backward(tape.pooled_mel, enc, st.trace, fg.weights, enc_grad);
        return std::move(fg.input);
    };

    Tensor4 g = conv2d_backward(tape.head_in, grad_out, get("conv_out.weight"), k, gacc("conv_out.weight"),
                                gacc("conv_out.bias"), true);
    std::vector<Tensor4> g_down(static_cast<SizeT>(levels));
    for (int l = 0; l <= levels - 2; ++l) {
        const int s = levels + (levels - 2 - l);
        g = stage_back(s, std::move(g));
        Tensor4 gcat = block_back(up_name(l), l, tape.up[l], g);
        auto [g_up, g_skip] = split_channels(gcat, static_cast<SizeT>(c.channels_at(l + 1)));
        add_into(g_down[l], g_skip);
        g = upsample2_backward(g_up);
    }
    add_into(g_down[levels - 1], g);
    Tensor4 g_in;
    for (int l = levels - 1; l >= 0; --l) {
        Tensor4 gl = stage_back(l, std::move(g_down[l]));
        gl = block_back(down_name(l), l, tape.down[l], gl);
        if (l > 0) {
            add_into(g_down[l - 1], avg_pool2_backward(gl));
        } else {
            g_in = std::move(gl);
        }
    }
    conv2d_backward(tape.z, g_in, get("conv_in.weight"), k, gacc("conv_in.weight"), gacc("conv_in.bias"), false);

    if (!cs.tasi) {
        return;
    }
    const auto d = static_cast<SizeT>(c.d_emb);
    std::vector<double> g_temb_f(d, 0.0);
    if (cs.magnitude) {
        const auto& env = tape.magnitude;
        std::vector<double> g_f(d, 0.0);
        for (SizeT n = 0; n < gscene.size(); ++n) {
            axpy(env[n], gscene[n], g_f);
        }
        const auto mlp = static_cast<SizeT>(c.mlp_hidden);
        const cond::ResidualMlpView f{affine(params, "magnitude.inner", mlp, d),
                                      affine(params, "magnitude.outer", d, mlp)};
        const cond::ResidualMlpGrad fgrad{affine_grad(gacc, "magnitude.inner"), affine_grad(gacc, "magnitude.outer")};
        g_temb_f = cond::residual_mlp_backward(f, cs.temb_f, g_f, fgrad);
    } else {
        for (const auto& gs : gscene) {
            axpy(1.0, gs, g_temb_f);
        }
    }
    const auto audio_dim = static_cast<SizeT>(c.audio_dim);
    cond::affine_backward(affine(params, "tasi.proj", d, audio_dim), tape.semantic, g_temb_f,
                          affine_grad(gacc, "tasi.proj"));
}

LatentVideo Denoiser::forward(const DenoiserParams& params, const LatentVideo& z_t, int t,
                              const diffusion::ConditioningBundle& bundle) const {
    return run(params, z_t, t, bundle, nullptr);
}

namespace {

void check_batch(const TrainingBatch& batch, const diffusion::NoiseSchedule& schedule) {
    SCENETONE_REQUIRE(batch.t >= 1 && batch.t <= schedule.steps(), "loss: timestep ", batch.t, " outside [1, ",
                      schedule.steps(), "]");
    SCENETONE_REQUIRE(batch.z0.values.same_shape(batch.eps.values), "loss: latent and noise shapes differ");
}

}  // namespace

double Denoiser::loss(const DenoiserParams& params, const TrainingBatch& batch,
                      const diffusion::NoiseSchedule& schedule) const {
    check_batch(batch, schedule);
    const auto z_t = diffusion::q_sample(batch.z0, batch.t, batch.eps, schedule);
    const auto pred = forward(params, z_t, batch.t, batch.bundle);
    const auto p = pred.values.data();
    const auto e = batch.eps.values.data();
    double acc = 0.0;
    for (SizeT i = 0; i < p.size(); ++i) {
        const double r = p[i] - e[i];
        acc += r * r;
    }
    return acc / static_cast<double>(p.size());
}

LossAndGrads Denoiser::loss_and_grads(const DenoiserParams& params, const TrainingBatch& batch,
                                      const diffusion::NoiseSchedule& schedule) const {
    check_batch(batch, schedule);
    const auto z_t = diffusion::q_sample(batch.z0, batch.t, batch.eps, schedule);
    Tape tape;
    const auto pred = run(params, z_t, batch.t, batch.bundle, &tape);
    if (tape.cond.freq) {
        tape.pooled_mel = batch.bundle.pooled_mel;
    }
    if (tape.cond.tasi) {
        tape.semantic = batch.bundle.semantic->values;
    }
    if (tape.cond.magnitude) {
        tape.magnitude = batch.bundle.magnitude->weights;
    }

    const auto p = pred.values.data();
    const auto e = batch.eps.values.data();
    const double m = static_cast<double>(p.size());
    Tensor4 grad_out(pred.values.shape());
    auto g = grad_out.data();
    double acc = 0.0;
    for (SizeT i = 0; i < p.size(); ++i) {
        const double r = p[i] - e[i];
        acc += r * r;
        g[i] = 2.0 * r / m;
    }
    LossAndGrads out{acc / m, std::vector<double>(m_layout->total(), 0.0)};
    backprop(params, tape, grad_out, out.grads);
    return out;
}

diffusion::NoisePredictor Denoiser::predictor(const DenoiserParams& params) const {
    return [model = *this, params](const LatentVideo& z, int t, const diffusion::ConditioningBundle& bundle) {
        return model.forward(params, z, t, bundle);
    };
}

std::vector<cond::EmbeddingField> Denoiser::embedding_fields(const DenoiserParams& params, const LatentVideo& z_t,
                                                             int t,
                                                             const diffusion::ConditioningBundle& bundle) const {
    const auto& z = z_t.values;
    const CondState cs = build_condition(m_config, params, z, t, bundle);
    std::vector<cond::EmbeddingField> fields;
    for (int l = 0; l < m_config.levels(); ++l) {
        const SizeT h = z.h() >> l;
        const SizeT w = z.w() >> l;
        const auto mask = cs.scenemasker ? cs.masks[l] : cond::ForegroundMask::constant(z.n(), h, w, false);
        fields.push_back(cond::scenemasker_blend(cs.scene, cs.temb, mask, h, w));
    }
    return fields;
}

// ---------------------------------------------------------------------------

TrainState TrainState::start(DenoiserParams params) {
    TrainState state;
    const SizeT n = params.values.size();
    state.params = std::move(params);
    state.first_moment.assign(n, 0.0);
    state.second_moment.assign(n, 0.0);
    return state;
}

TrainState adam_step(TrainState state, std::span<const double> grads, const AdamOptions& options) {
    auto& p = state.params.values;
    SCENETONE_REQUIRE(grads.size() == p.size(), "adam: gradient has ", grads.size(), " entries for ", p.size(),
                      " parameters");
    SCENETONE_REQUIRE(state.first_moment.size() == p.size() && state.second_moment.size() == p.size(),
                      "adam: optimizer moments do not match the parameters");
    SCENETONE_REQUIRE(options.lr > 0.0, "adam: learning rate must be positive");
    state.step += 1;
    const double c1 = 1.0 - std::pow(options.beta1, state.step);
    const double c2 = 1.0 - std::pow(options.beta2, state.step);
    for (SizeT i = 0; i < p.size(); ++i) {
        const double g = grads[i];
        SCENETONE_REQUIRE(std::isfinite(g), "adam: non-finite gradient at index ", i);
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        m = options.beta1 * m + (1.0 - options.beta1) * g;
        v = options.beta2 * v + (1.0 - options.beta2) * g * g;
        p[i] -= options.lr * (m / c1) / (std::sqrt(v / c2) + options.eps);
    }
    return state;
}

TrainState finetune(const Denoiser& denoiser, const PixelVideo& video, const audio::AudioClip& audio,
                    const diffusion::NoiseSchedule& schedule, const FinetuneOptions& options,
                    const std::optional<cond::ForegroundMask>& mask, const ProgressFn& progress) {
    const auto z0 = diffusion::vae_encode(video);
    const auto frames = z0.frames();
    const auto features = audio::extract_features(audio, static_cast<int>(frames), options.features);
    auto flags = denoiser.config().flags;
    flags.scenemasker = flags.scenemasker && denoiser.config().scenemasker_in_training;
    const auto bundle = diffusion::ConditioningBundle::from_audio(
        features, frames, flags, flags.scenemasker ? mask : std::nullopt);
    return finetune(denoiser, z0, bundle, schedule, options, progress);
}

TrainState finetune(const Denoiser& denoiser, const LatentVideo& z0, const diffusion::ConditioningBundle& bundle,
                    const diffusion::NoiseSchedule& schedule, const FinetuneOptions& options,
                    const ProgressFn& progress) {
    SCENETONE_REQUIRE(options.steps >= 0, "finetune: step count must be non-negative");
    TrainState state = TrainState::start(denoiser.init(options.seed));
    // Separate stream from the one used by init.
    std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<int> pick_t(1, schedule.steps());
    std::normal_distribution<double> normal(0.0, 1.0);
    const AdamOptions adam{options.lr};
    TrainingBatch batch{z0, 1, LatentVideo{Tensor4(z0.values.shape())}, bundle};
    for (int step = 0; step < options.steps; ++step) {
        batch.t = pick_t(rng);
        for (auto& v : batch.eps.values.data()) {
            v = normal(rng);
        }
        auto lg = denoiser.loss_and_grads(state.params, batch, schedule);
        if (!std::isfinite(lg.loss)) {
            throw NumericError("finetune: loss became non-finite at step " + std::to_string(step));
        }
        state = adam_step(std::move(state), lg.grads, adam);
        state.loss_history.push_back(lg.loss);
        if (progress) {
            progress(step, lg.loss);
        }
    }
    return state;
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport gradient_check(const Denoiser& denoiser, const DenoiserParams& params, const TrainingBatch& batch,
                               const diffusion::NoiseSchedule& schedule, std::size_t samples, double step,
                               std::uint64_t seed) {
    SCENETONE_REQUIRE(step > 0.0, "gradient check: step must be positive");
    const auto analytic = denoiser.loss_and_grads(params, batch, schedule).grads;
    const auto& entries = params.layout->entries();
    std::mt19937_64 rng(seed);
    GradCheckReport report;
    DenoiserParams probe = params;
    for (std::size_t i = 0; i < samples; ++i) {
        const auto& e = entries[i % entries.size()];
        std::uniform_int_distribution<std::size_t> pick(0, e.size - 1);
        const std::size_t index = e.offset + pick(rng);
        const double saved = probe.values[index];
        probe.values[index] = saved + step;
        const double up = denoiser.loss(probe, batch, schedule);
        probe.values[index] = saved - step;
        const double down = denoiser.loss(probe, batch, schedule);
        probe.values[index] = saved;
        GradCheckEntry entry{e.name, index, analytic[index], (up - down) / (2.0 * step), 0.0};
        entry.rel_error = relative_error(entry.analytic, entry.numeric);
        report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace scenetone::nn
