// SPDX-License-Identifier: Apache-2.0

#include "scenetone/ascv.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "scenetone/error.hpp"

namespace scenetone::ascv {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        std::reverse(std::begin(bytes), std::end(bytes));
    }
    out.insert(out.end(), std::begin(bytes), std::end(bytes));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : m_bytes(bytes) {}

    template <typename T>
    T get() {
        SCENETONE_REQUIRE(m_pos + sizeof(T) <= m_bytes.size(), "ascv: truncated stream at byte ", m_pos);
        std::uint8_t bytes[sizeof(T)];
        std::memcpy(bytes, m_bytes.data() + m_pos, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) {
            std::reverse(std::begin(bytes), std::end(bytes));
        }
        m_pos += sizeof(T);
        T value;
        std::memcpy(&value, bytes, sizeof(T));
        return value;
    }

    std::size_t remaining() const { return m_bytes.size() - m_pos; }

private:
    std::span<const std::uint8_t> m_bytes;
    std::size_t m_pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode(std::span<const std::uint64_t> dims, std::span<const double> values) {
    std::uint64_t count = 1;
    for (auto d : dims) {
        count *= d;
    }
    SCENETONE_REQUIRE(count == values.size(), "ascv: dims describe ", count, " elements but ", values.size(),
                      " were given");
    std::vector<std::uint8_t> out{'A', 'S', 'C', 'V'};
    out.reserve(4 + 12 + 8 * dims.size() + 8 * values.size());
    put_le(out, kVersion);
    put_le(out, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) {
        put_le(out, d);
    }
    put_le(out, kDtypeF64);
    for (double v : values) {
        put_le(out, v);
    }
    return out;
}

Array decode(std::span<const std::uint8_t> bytes) {
    SCENETONE_REQUIRE(bytes.size() >= 4 && std::memcmp(bytes.data(), "ASCV", 4) == 0, "ascv: bad magic");
    Reader reader(bytes.subspan(4));
    const auto version = reader.get<std::uint32_t>();
    SCENETONE_REQUIRE(version == kVersion, "ascv: unsupported version ", version);
    const auto rank = reader.get<std::uint32_t>();
    Array array;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        array.dims.push_back(reader.get<std::uint64_t>());
        count *= array.dims.back();
    }
    const auto dtype = reader.get<std::uint32_t>();
    SCENETONE_REQUIRE(dtype == kDtypeF64, "ascv: unsupported dtype tag ", dtype);
    SCENETONE_REQUIRE(reader.remaining() == count * sizeof(double), "ascv: payload has ", reader.remaining(),
                      " bytes, expected ", count * sizeof(double));
    array.values.resize(count);
    for (auto& v : array.values) {
        v = reader.get<double>();
    }
    return array;
}

void write(const std::filesystem::path& path, std::span<const std::uint64_t> dims, std::span<const double> values) {
    const auto bytes = encode(dims, values);
    std::ofstream file(path, std::ios::binary);
    SCENETONE_REQUIRE(file.good(), "ascv: cannot open ", path.string(), " for writing");
    file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Array read(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    SCENETONE_REQUIRE(file.good(), "ascv: cannot open ", path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

void write(const std::filesystem::path& path, const Tensor4& tensor) {
    const std::uint64_t dims[4] = {tensor.n(), tensor.c(), tensor.h(), tensor.w()};
    write(path, dims, tensor.data());
}

Tensor4 read_tensor4(const std::filesystem::path& path) {
    Array array = read(path);
    SCENETONE_REQUIRE(array.dims.size() == 4, "ascv: expected a rank-4 volume in ", path.string(), ", got rank ",
                      array.dims.size());
    Tensor4 tensor(array.dims[0], array.dims[1], array.dims[2], array.dims[3]);
    tensor.storage() = std::move(array.values);
    return tensor;
}

}  // namespace scenetone::ascv
