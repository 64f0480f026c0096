// SPDX-License-Identifier: Apache-2.0

#pragma once

// ASCV tensor container, byte layout (all integers little-endian):
//   magic "ASCV" (4 bytes) | version u32 = 1 | rank u32 | dims rank x u64 |
//   dtype u32 (1 = f64 LE) | payload, row-major.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scenetone/tensor.hpp"

namespace scenetone::ascv {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

struct Array {
    std::vector<std::uint64_t> dims;
    std::vector<double> values;
};

std::vector<std::uint8_t> encode(std::span<const std::uint64_t> dims, std::span<const double> values);
Array decode(std::span<const std::uint8_t> bytes);

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const double> values);
Array read(const std::filesystem::path& path);

void write(const std::filesystem::path& path, const Tensor4& tensor);
Tensor4 read_tensor4(const std::filesystem::path& path);

}  // namespace scenetone::ascv
