// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scenetone/conditioning.hpp"
#include "scenetone/tensor.hpp"
#include "scenetone/video.hpp"

namespace scenetone::metrics {

struct FrameEmbedding {
    std::vector<double> values;
    std::string provider_id;

    std::size_t dim() const noexcept { return values.size(); }
};

/// Maps one image (1 x C x H x W, values in [0, 1]) to a unit vector.
class FrameEmbedder {
public:
    virtual ~FrameEmbedder() = default;
    virtual std::string id() const = 0;
    virtual FrameEmbedding embed(const Tensor4& image) const = 0;
};

/// 16-bin histogram per RGB channel (each normalized by the pixel count)
/// followed by the 4 x 4 lowest orthonormal DCT-II coefficients of the
/// luminance divided by sqrt(H W), scaled to unit norm.
class HistDctEmbedder final : public FrameEmbedder {
public:
    static constexpr std::size_t kBinsPerChannel = 16;
    static constexpr std::size_t kDctSide = 4;
    static constexpr std::size_t kDim = 3 * kBinsPerChannel + kDctSide * kDctSide;

    std::string id() const override { return "hist48-dct16"; }
    FrameEmbedding embed(const Tensor4& image) const override;
};

/// Frame i as a 1 x C x H x W image.
Tensor4 frame_of(const PixelVideo& video, std::size_t i);

FrameEmbedding frame_embed(const Tensor4& image);
std::vector<FrameEmbedding> embed_frames(const PixelVideo& video, const FrameEmbedder& embedder);
std::vector<FrameEmbedding> embed_frames(const PixelVideo& video);

double cosine(std::span<const double> a, std::span<const double> b);

/// Mean cosine between the condition and each frame embedding.
double clip_t(std::span<const FrameEmbedding> frames, std::span<const double> condition);

/// Mean cosine over unordered frame pairs i < j.
double clip_f(std::span<const FrameEmbedding> frames);

double temp_s(std::span<const FrameEmbedding> frames, std::span<const double> condition);

/// Fraction of frames strictly closer (by cosine) to the target condition.
double sem_a(std::span<const FrameEmbedding> frames, std::span<const double> source_condition,
             std::span<const double> target_condition);

/// Mean embedding of a video's frames.
std::vector<double> mean_embedding(std::span<const FrameEmbedding> frames);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
    int erosion_radius = 5;
};

/// Square erosion; pixels outside the image count as background.
cond::ForegroundMask erode(const cond::ForegroundMask& mask, int radius);

/// SSIM map (Gaussian window) averaged over the pixels of the eroded mask of
/// `frame`, then over channels. Throws InvalidArgument when erosion leaves no
/// pixel.
double masked_ssim(const Tensor4& a, const Tensor4& b, const cond::ForegroundMask& mask, std::size_t frame,
                   const SsimOptions& options = {});

/// Mean of masked_ssim over frames.
double masked_ssim(const PixelVideo& a, const PixelVideo& b, const cond::ForegroundMask& mask,
                   const SsimOptions& options = {});

struct MetricsReport {
    double sem_a = 0.0;
    double ssim_fg = 0.0;
    double clip_f = 0.0;
    double clip_t = 0.0;
    double temp_s = 0.0;
    std::string frame_provider;
    std::string condition_provider;
};

/// Source condition: mean frame embedding of the source video. Target
/// condition: the target audio embedding, used directly as a vector in the
/// frame-embedding space.
MetricsReport evaluate(const PixelVideo& edited, const PixelVideo& source, const cond::ForegroundMask& mask,
                       std::span<const double> target_condition, const std::string& condition_provider,
                       const FrameEmbedder& embedder);

MetricsReport evaluate(const PixelVideo& edited, const PixelVideo& source, const cond::ForegroundMask& mask,
                       std::span<const double> target_condition, const std::string& condition_provider);

}  // namespace scenetone::metrics
