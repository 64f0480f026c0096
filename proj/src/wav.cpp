// SPDX-License-Identifier: Apache-2.0

#include "scenetone/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "scenetone/error.hpp"

namespace scenetone::audio {

namespace {

std::uint32_t u32_at(std::span<const std::uint8_t> b, std::size_t pos) {
    return static_cast<std::uint32_t>(b[pos]) | (static_cast<std::uint32_t>(b[pos + 1]) << 8) |
           (static_cast<std::uint32_t>(b[pos + 2]) << 16) | (static_cast<std::uint32_t>(b[pos + 3]) << 24);
}

std::uint16_t u16_at(std::span<const std::uint8_t> b, std::size_t pos) {
    return static_cast<std::uint16_t>(b[pos] | (b[pos + 1] << 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
    SCENETONE_REQUIRE(bytes.size() >= 12 && std::memcmp(bytes.data(), "RIFF", 4) == 0 &&
                          std::memcmp(bytes.data() + 8, "WAVE", 4) == 0,
                      "wav: not a RIFF/WAVE stream");
    std::size_t pos = 12;
    int channels = 0;
    int sample_rate = 0;
    int bits = 0;
    std::span<const std::uint8_t> data;
    bool have_fmt = false;
    while (pos + 8 <= bytes.size()) {
        const std::uint32_t size = u32_at(bytes, pos + 4);
        const std::size_t body = pos + 8;
        SCENETONE_REQUIRE(body + size <= bytes.size(), "wav: chunk overruns stream");
        if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
            SCENETONE_REQUIRE(size >= 16, "wav: short fmt chunk");
            const auto format = u16_at(bytes, body);
            SCENETONE_REQUIRE(format == 1, "wav: only PCM (format 1) is supported, got ", format);
            channels = u16_at(bytes, body + 2);
            sample_rate = static_cast<int>(u32_at(bytes, body + 4));
            bits = u16_at(bytes, body + 14);
            have_fmt = true;
        } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
            data = bytes.subspan(body, size);
        }
        pos = body + size + (size & 1u);
    }
    SCENETONE_REQUIRE(have_fmt, "wav: missing fmt chunk");
    SCENETONE_REQUIRE(bits == 16, "wav: only 16-bit PCM is supported, got ", bits, " bits");
    SCENETONE_REQUIRE(channels > 0, "wav: zero channels");
    SCENETONE_REQUIRE(!data.empty(), "wav: missing or empty data chunk");

    const std::size_t frame_bytes = 2 * static_cast<std::size_t>(channels);
    const std::size_t frames = data.size() / frame_bytes;
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0.0;
        for (int c = 0; c < channels; ++c) {
            const auto raw = static_cast<std::int16_t>(u16_at(data, i * frame_bytes + 2 * c));
            acc += std::max(-1.0, raw / 32767.0);
        }
        clip.samples[i] = acc / channels;
    }
    validate(clip);
    return clip;
}

AudioClip read_wav(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    SCENETONE_REQUIRE(file.good(), "wav: cannot open ", path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return decode_wav(bytes);
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip) {
    validate(clip);
    const auto data_size = static_cast<std::uint32_t>(clip.samples.size() * 2);
    std::vector<std::uint8_t> out;
    out.reserve(44 + data_size);
    out.insert(out.end(), {'R', 'I', 'F', 'F'});
    put_u32(out, 36 + data_size);
    out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(out, 16);
    put_u16(out, 1);
    put_u16(out, 1);
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(clip.sample_rate) * 2);
    put_u16(out, 2);
    put_u16(out, 16);
    out.insert(out.end(), {'d', 'a', 't', 'a'});
    put_u32(out, data_size);
    for (double s : clip.samples) {
        const auto q = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0));
        put_u16(out, static_cast<std::uint16_t>(q));
    }
    return out;
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip) {
    const auto bytes = encode_wav(clip);
    std::ofstream file(path, std::ios::binary);
    SCENETONE_REQUIRE(file.good(), "wav: cannot open ", path.string(), " for writing");
    file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace scenetone::audio
