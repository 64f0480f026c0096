// SPDX-License-Identifier: Apache-2.0

#include "scenetone/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "scenetone/error.hpp"

namespace scenetone::metrics {

namespace {

void normalize(std::vector<double>& v) {
    double norm = 0.0;
    for (double x : v) {
        norm += x * x;
    }
    norm = std::sqrt(norm);
    SCENETONE_REQUIRE(norm > 0.0, "frame embedding: zero vector");
    for (auto& x : v) {
        x /= norm;
    }
}

double dct_basis(std::size_t k, std::size_t i, std::size_t n) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    return scale * std::cos(std::numbers::pi * (2.0 * i + 1.0) * k / (2.0 * n));
}

}  // namespace

FrameEmbedding HistDctEmbedder::embed(const Tensor4& image) const {
    SCENETONE_REQUIRE(image.n() == 1 && (image.c() == 3 || image.c() == 1), "frame embedding: expected one RGB or gray ",
                      "image, got ", image.n(), "x", image.c());
    SCENETONE_REQUIRE(image.h() > 0 && image.w() > 0, "frame embedding: empty image");
    const std::size_t H = image.h();
    const std::size_t W = image.w();
    const double pixels = static_cast<double>(H * W);
    auto channel = [&](std::size_t c) { return image.c() == 1 ? image.plane(0, 0) : image.plane(0, c); };

    std::vector<double> v(kDim, 0.0);
    for (std::size_t c = 0; c < 3; ++c) {
        for (double x : channel(c)) {
            const auto bin = std::min(kBinsPerChannel - 1,
                                      static_cast<std::size_t>(std::max(0.0, x) * kBinsPerChannel));
            v[c * kBinsPerChannel + bin] += 1.0 / pixels;
        }
    }

    std::vector<double> luma(H * W);
    const auto r = channel(0);
    const auto g = channel(1);
    const auto b = channel(2);
    for (std::size_t i = 0; i < luma.size(); ++i) {
        luma[i] = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
    }
    const double inv = 1.0 / std::sqrt(pixels);
    for (std::size_t u = 0; u < kDctSide; ++u) {
        for (std::size_t w = 0; w < kDctSide; ++w) {
            double acc = 0.0;
            for (std::size_t y = 0; y < H; ++y) {
                const double by = dct_basis(u, y, H);
                for (std::size_t x = 0; x < W; ++x) {
                    acc += by * dct_basis(w, x, W) * luma[y * W + x];
                }
            }
            v[3 * kBinsPerChannel + u * kDctSide + w] = acc * inv;
        }
    }
    normalize(v);
    return {std::move(v), id()};
}

Tensor4 frame_of(const PixelVideo& video, std::size_t i) {
    const auto& v = video.values;
    SCENETONE_REQUIRE(i < v.n(), "frame ", i, " out of range for ", v.n(), " frames");
    Tensor4 out(1, v.c(), v.h(), v.w());
    for (std::size_t c = 0; c < v.c(); ++c) {
        std::ranges::copy(v.plane(i, c), out.plane(0, c).begin());
    }
    return out;
}

FrameEmbedding frame_embed(const Tensor4& image) { return HistDctEmbedder().embed(image); }

std::vector<FrameEmbedding> embed_frames(const PixelVideo& video, const FrameEmbedder& embedder) {
    std::vector<FrameEmbedding> out;
    out.reserve(video.frames());
    for (std::size_t i = 0; i < video.frames(); ++i) {
        out.push_back(embedder.embed(frame_of(video, i)));
    }
    return out;
}

std::vector<FrameEmbedding> embed_frames(const PixelVideo& video) { return embed_frames(video, HistDctEmbedder()); }

double cosine(std::span<const double> a, std::span<const double> b) {
    SCENETONE_REQUIRE(a.size() == b.size(), "cosine: dimensions differ (", a.size(), " vs ", b.size(), ")");
    double ab = 0.0;
    double aa = 0.0;
    double bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    SCENETONE_REQUIRE(aa > 0.0 && bb > 0.0, "cosine: zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double clip_t(std::span<const FrameEmbedding> frames, std::span<const double> condition) {
    SCENETONE_REQUIRE(!frames.empty(), "clip_t: no frames");
    double acc = 0.0;
    for (const auto& f : frames) {
        acc += cosine(f.values, condition);
    }
    return acc / static_cast<double>(frames.size());
}

double clip_f(std::span<const FrameEmbedding> frames) {
    SCENETONE_REQUIRE(frames.size() >= 2, "clip_f: need at least two frames, got ", frames.size());
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        for (std::size_t j = i + 1; j < frames.size(); ++j) {
            acc += cosine(frames[i].values, frames[j].values);
            ++pairs;
        }
    }
    return acc / static_cast<double>(pairs);
}

double temp_s(std::span<const FrameEmbedding> frames, std::span<const double> condition) {
    return clip_f(frames) * clip_t(frames, condition);
}

double sem_a(std::span<const FrameEmbedding> frames, std::span<const double> source_condition,
             std::span<const double> target_condition) {
    SCENETONE_REQUIRE(!frames.empty(), "sem_a: no frames");
    std::size_t hits = 0;
    for (const auto& f : frames) {
        if (cosine(f.values, target_condition) > cosine(f.values, source_condition)) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(frames.size());
}

std::vector<double> mean_embedding(std::span<const FrameEmbedding> frames) {
    SCENETONE_REQUIRE(!frames.empty(), "mean embedding: no frames");
    std::vector<double> mean(frames.front().dim(), 0.0);
    for (const auto& f : frames) {
        SCENETONE_REQUIRE(f.dim() == mean.size(), "mean embedding: dimensions differ");
        for (std::size_t i = 0; i < mean.size(); ++i) {
            mean[i] += f.values[i];
        }
    }
    for (auto& v : mean) {
        v /= static_cast<double>(frames.size());
    }
    return mean;
}

// ---------------------------------------------------------------------------

cond::ForegroundMask erode(const cond::ForegroundMask& mask, int radius) {
    SCENETONE_REQUIRE(radius >= 0, "erode: radius must be non-negative");
    const auto r = static_cast<long>(radius);
    const auto H = static_cast<long>(mask.height());
    const auto W = static_cast<long>(mask.width());
    cond::ForegroundMask out(mask.frames(), mask.height(), mask.width());
    for (std::size_t f = 0; f < mask.frames(); ++f) {
        for (long y = 0; y < H; ++y) {
            for (long x = 0; x < W; ++x) {
                bool keep = y - r >= 0 && y + r < H && x - r >= 0 && x + r < W;
                for (long dy = -r; keep && dy <= r; ++dy) {
                    for (long dx = -r; keep && dx <= r; ++dx) {
                        keep = mask.at(f, static_cast<std::size_t>(y + dy), static_cast<std::size_t>(x + dx));
                    }
                }
                out.set(f, static_cast<std::size_t>(y), static_cast<std::size_t>(x), keep);
            }
        }
    }
    return out;
}

double masked_ssim(const Tensor4& a, const Tensor4& b, const cond::ForegroundMask& mask, std::size_t frame,
                   const SsimOptions& options) {
    SCENETONE_REQUIRE(a.same_shape(b), "masked_ssim: image shapes differ");
    SCENETONE_REQUIRE(a.n() == 1, "masked_ssim: expected single images");
    SCENETONE_REQUIRE(mask.height() == a.h() && mask.width() == a.w() && frame < mask.frames(),
                      "masked_ssim: mask ", mask.height(), "x", mask.width(), " does not match image ", a.h(), "x",
                      a.w());
    SCENETONE_REQUIRE(options.window > 0 && options.window % 2 == 1, "masked_ssim: window must be odd");
    const int half = options.window / 2;
    SCENETONE_REQUIRE(options.erosion_radius >= half, "masked_ssim: erosion radius ", options.erosion_radius,
                      " is smaller than the window half-width ", half);

    cond::ForegroundMask single(1, mask.height(), mask.width());
    for (std::size_t y = 0; y < mask.height(); ++y) {
        for (std::size_t x = 0; x < mask.width(); ++x) {
            single.set(0, y, x, mask.at(frame, y, x));
        }
    }
    const auto eroded = erode(single, options.erosion_radius);
    if (eroded.count() == 0) {
        throw InvalidArgument("masked_ssim: no valid foreground region remains after erosion");
    }

    std::vector<double> kernel(static_cast<std::size_t>(options.window));
    double ksum = 0.0;
    for (int i = 0; i < options.window; ++i) {
        const double d = i - half;
        kernel[i] = std::exp(-d * d / (2.0 * options.sigma * options.sigma));
        ksum += kernel[i];
    }
    for (auto& k : kernel) {
        k /= ksum;
    }

    const double c1 = std::pow(options.k1 * options.dynamic_range, 2);
    const double c2 = std::pow(options.k2 * options.dynamic_range, 2);
    double total = 0.0;
    for (std::size_t c = 0; c < a.c(); ++c) {
        double acc = 0.0;
        for (std::size_t y = 0; y < a.h(); ++y) {
            for (std::size_t x = 0; x < a.w(); ++x) {
                if (!eroded.at(0, y, x)) {
                    continue;
                }
                double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
                for (int dy = -half; dy <= half; ++dy) {
                    for (int dx = -half; dx <= half; ++dx) {
                        const double w = kernel[dy + half] * kernel[dx + half];
                        const double va = a(0, c, y + dy, x + dx);
                        const double vb = b(0, c, y + dy, x + dx);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                const double var_a = saa - ma * ma;
                const double var_b = sbb - mb * mb;
                const double cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            }
        }
        total += acc / static_cast<double>(eroded.count());
    }
    return total / static_cast<double>(a.c());
}

double masked_ssim(const PixelVideo& a, const PixelVideo& b, const cond::ForegroundMask& mask,
                   const SsimOptions& options) {
    SCENETONE_REQUIRE(a.values.same_shape(b.values), "masked_ssim: video shapes differ");
    SCENETONE_REQUIRE(mask.frames() == a.frames(), "masked_ssim: mask has ", mask.frames(), " frames, video has ",
                      a.frames());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.frames(); ++i) {
        acc += masked_ssim(frame_of(a, i), frame_of(b, i), mask, i, options);
    }
    return acc / static_cast<double>(a.frames());
}

// ---------------------------------------------------------------------------

MetricsReport evaluate(const PixelVideo& edited, const PixelVideo& source, const cond::ForegroundMask& mask,
                       std::span<const double> target_condition, const std::string& condition_provider,
                       const FrameEmbedder& embedder) {
    const auto edited_emb = embed_frames(edited, embedder);
    const auto source_emb = embed_frames(source, embedder);
    const auto source_condition = mean_embedding(source_emb);
    MetricsReport report;
    report.sem_a = sem_a(edited_emb, source_condition, target_condition);
    report.ssim_fg = masked_ssim(edited, source, mask);
    report.clip_f = clip_f(edited_emb);
    report.clip_t = clip_t(edited_emb, target_condition);
    report.temp_s = report.clip_f * report.clip_t;
    report.frame_provider = embedder.id();
    report.condition_provider = condition_provider;
    return report;
}

MetricsReport evaluate(const PixelVideo& edited, const PixelVideo& source, const cond::ForegroundMask& mask,
                       std::span<const double> target_condition, const std::string& condition_provider) {
    return evaluate(edited, source, mask, target_condition, condition_provider, HistDctEmbedder());
}

}  // namespace scenetone::metrics
