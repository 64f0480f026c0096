// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "scenetone/audio_features.hpp"

namespace scenetone::audio {

/// Parses a RIFF/WAVE PCM 16-bit little-endian stream. Multi-channel input
/// is averaged to mono; samples are divided by 32768.
AudioClip decode_wav(std::span<const std::uint8_t> bytes);
AudioClip read_wav(const std::filesystem::path& path);

/// Mono PCM 16-bit encoding; samples are clamped to [-1, 1] and scaled by 32767.
std::vector<std::uint8_t> encode_wav(const AudioClip& clip);
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

}  // namespace scenetone::audio
