// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "scenetone/tensor.hpp"

namespace scenetone {

/// Latent volume z_t: frames x latent channels x h x w.
struct LatentVideo {
    Tensor4 values;

    std::size_t frames() const noexcept { return values.n(); }
    std::size_t channels() const noexcept { return values.c(); }
    friend bool operator==(const LatentVideo&, const LatentVideo&) = default;
};

/// Pixel-space video: frames x 3 x H x W, entries in [0, 1].
struct PixelVideo {
    Tensor4 values;

    std::size_t frames() const noexcept { return values.n(); }
    std::size_t height() const noexcept { return values.h(); }
    std::size_t width() const noexcept { return values.w(); }
    friend bool operator==(const PixelVideo&, const PixelVideo&) = default;
};

}  // namespace scenetone
