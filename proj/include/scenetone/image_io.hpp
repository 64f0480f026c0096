// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

#include "scenetone/conditioning.hpp"
#include "scenetone/tensor.hpp"
#include "scenetone/video.hpp"

namespace scenetone::io {

/// Binary PPM (P6) or PGM (P5), 8 bits per sample. Returns 1 x C x H x W in [0, 1].
Tensor4 read_image(const std::filesystem::path& path);

/// Writes P6 for 3 channels and P5 for 1 channel; values are clamped and rounded.
void write_image(const std::filesystem::path& path, const Tensor4& image);

std::string frame_name(std::size_t index, const std::string& extension);

/// Frames frame_0000.ppm, frame_0001.ppm, ...
void write_frames(const std::filesystem::path& dir, const PixelVideo& video);

/// A directory of frame_XXXX images or a single .ascv volume.
PixelVideo read_video(const std::filesystem::path& path);

/// Masks mask_0000.pgm, ... with 0 = scene and 255 = foreground.
void write_mask(const std::filesystem::path& dir, const cond::ForegroundMask& mask);

/// A directory of mask_XXXX images (pixels >= 128 are foreground) or an
/// .ascv volume of 0/1 values.
cond::ForegroundMask read_mask(const std::filesystem::path& path);

}  // namespace scenetone::io
