// SPDX-License-Identifier: Apache-2.0

#include "scenetone/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "scenetone/ascv.hpp"
#include "scenetone/error.hpp"

namespace scenetone::io {

namespace fs = std::filesystem;

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
    std::string token;
    char ch = 0;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string ignored;
            std::getline(in, ignored);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!token.empty()) {
                return token;
            }
            continue;
        }
        token.push_back(ch);
    }
    return token;
}

std::size_t parse_dim(const std::string& token, const fs::path& path) {
    try {
        const long v = std::stol(token);
        SCENETONE_REQUIRE(v > 0, path.string(), ": bad image header value '", token, "'");
        return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
        throw InvalidArgument(path.string() + ": bad image header value '" + token + "'");
    }
}

std::vector<fs::path> numbered(const fs::path& dir, const std::string& prefix) {
    std::vector<fs::path> files;
    for (std::size_t i = 0;; ++i) {
        bool found = false;
        for (const char* ext : {".ppm", ".pgm"}) {
            char name[64];
            std::snprintf(name, sizeof(name), "%s_%04zu%s", prefix.c_str(), i, ext);
            const fs::path p = dir / name;
            if (fs::exists(p)) {
                files.push_back(p);
                found = true;
                break;
            }
        }
        if (!found) {
            break;
        }
    }
    SCENETONE_REQUIRE(!files.empty(), dir.string(), ": no ", prefix, "_0000 image found");
    return files;
}

}  // namespace

Tensor4 read_image(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    SCENETONE_REQUIRE(in.good(), "cannot open image ", path.string());
    const std::string magic = next_token(in);
    SCENETONE_REQUIRE(magic == "P6" || magic == "P5", path.string(), ": unsupported image type '", magic,
                      "', expected binary PPM or PGM");
    const std::size_t width = parse_dim(next_token(in), path);
    const std::size_t height = parse_dim(next_token(in), path);
    const std::size_t maxval = parse_dim(next_token(in), path);
    SCENETONE_REQUIRE(maxval <= 255, path.string(), ": only 8-bit images are supported");
    const std::size_t channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> bytes(width * height * channels);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    SCENETONE_REQUIRE(static_cast<std::size_t>(in.gcount()) == bytes.size(), path.string(), ": truncated pixel data");
    Tensor4 image(1, channels, height, width);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            for (std::size_t c = 0; c < channels; ++c) {
                image(0, c, y, x) = bytes[(y * width + x) * channels + c] / static_cast<double>(maxval);
            }
        }
    }
    return image;
}

void write_image(const fs::path& path, const Tensor4& image) {
    SCENETONE_REQUIRE(image.n() == 1 && (image.c() == 1 || image.c() == 3), "write_image: expected one gray or RGB ",
                      "image");
    std::ofstream out(path, std::ios::binary);
    SCENETONE_REQUIRE(out.good(), "cannot write image ", path.string());
    out << (image.c() == 3 ? "P6" : "P5") << "\n" << image.w() << " " << image.h() << "\n255\n";
    std::vector<unsigned char> bytes(image.size());
    for (std::size_t y = 0; y < image.h(); ++y) {
        for (std::size_t x = 0; x < image.w(); ++x) {
            for (std::size_t c = 0; c < image.c(); ++c) {
                const double v = std::clamp(image(0, c, y, x), 0.0, 1.0);
                bytes[(y * image.w() + x) * image.c() + c] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string frame_name(std::size_t index, const std::string& extension) {
    char name[64];
    std::snprintf(name, sizeof(name), "frame_%04zu%s", index, extension.c_str());
    return name;
}

void write_frames(const fs::path& dir, const PixelVideo& video) {
    fs::create_directories(dir);
    const auto& v = video.values;
    for (std::size_t n = 0; n < v.n(); ++n) {
        Tensor4 frame(1, v.c(), v.h(), v.w());
        for (std::size_t c = 0; c < v.c(); ++c) {
            std::ranges::copy(v.plane(n, c), frame.plane(0, c).begin());
        }
        write_image(dir / frame_name(n, v.c() == 3 ? ".ppm" : ".pgm"), frame);
    }
}

PixelVideo read_video(const fs::path& path) {
    if (fs::is_regular_file(path) && path.extension() == ".ascv") {
        return {ascv::read_tensor4(path)};
    }
    SCENETONE_REQUIRE(fs::is_directory(path), "video path ", path.string(), " is neither a directory nor .ascv file");
    const auto files = numbered(path, "frame");
    Tensor4 first = read_image(files.front());
    Tensor4 video(files.size(), 3, first.h(), first.w());
    for (std::size_t n = 0; n < files.size(); ++n) {
        const Tensor4 img = n == 0 ? first : read_image(files[n]);
        SCENETONE_REQUIRE(img.h() == first.h() && img.w() == first.w(), files[n].string(),
                          ": frame size differs from frame 0");
        for (std::size_t c = 0; c < 3; ++c) {
            std::ranges::copy(img.plane(0, img.c() == 3 ? c : 0), video.plane(n, c).begin());
        }
    }
    return {std::move(video)};
}

void write_mask(const fs::path& dir, const cond::ForegroundMask& mask) {
    fs::create_directories(dir);
    for (std::size_t f = 0; f < mask.frames(); ++f) {
        Tensor4 img(1, 1, mask.height(), mask.width());
        for (std::size_t y = 0; y < mask.height(); ++y) {
            for (std::size_t x = 0; x < mask.width(); ++x) {
                img(0, 0, y, x) = mask.at(f, y, x) ? 1.0 : 0.0;
            }
        }
        char name[64];
        std::snprintf(name, sizeof(name), "mask_%04zu.pgm", f);
        write_image(dir / name, img);
    }
}

cond::ForegroundMask read_mask(const fs::path& path) {
    if (fs::is_regular_file(path) && path.extension() == ".ascv") {
        const Tensor4 t = ascv::read_tensor4(path);
        SCENETONE_REQUIRE(t.c() == 1, path.string(), ": mask volume must have one channel");
        cond::ForegroundMask mask(t.n(), t.h(), t.w());
        for (std::size_t f = 0; f < t.n(); ++f) {
            for (std::size_t y = 0; y < t.h(); ++y) {
                for (std::size_t x = 0; x < t.w(); ++x) {
                    const double v = t(f, 0, y, x);
                    SCENETONE_REQUIRE(v == 0.0 || v == 1.0, path.string(), ": mask values must be 0 or 1");
                    mask.set(f, y, x, v == 1.0);
                }
            }
        }
        return mask;
    }
    SCENETONE_REQUIRE(fs::is_directory(path), "mask path ", path.string(), " is neither a directory nor .ascv file");
    const auto files = numbered(path, "mask");
    cond::ForegroundMask mask;
    for (std::size_t f = 0; f < files.size(); ++f) {
        const Tensor4 img = read_image(files[f]);
        if (f == 0) {
            mask = cond::ForegroundMask(files.size(), img.h(), img.w());
        }
        SCENETONE_REQUIRE(img.h() == mask.height() && img.w() == mask.width(), files[f].string(),
                          ": mask size differs from mask 0");
        for (std::size_t y = 0; y < img.h(); ++y) {
            for (std::size_t x = 0; x < img.w(); ++x) {
                mask.set(f, y, x, img(0, 0, y, x) >= 0.5);
            }
        }
    }
    return mask;
}

}  // namespace scenetone::io
