// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace scenetone {

/// Dense row-major rank-4 volume, laid out as [n][c][h][w].
class Tensor4 {
public:
    using Shape = std::array<std::size_t, 4>;

    Tensor4() = default;
    Tensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
        : m_shape{n, c, h, w}, m_data(n * c * h * w, fill) {}
    explicit Tensor4(const Shape& shape, double fill = 0.0)
        : Tensor4(shape[0], shape[1], shape[2], shape[3], fill) {}

    std::size_t n() const noexcept { return m_shape[0]; }
    std::size_t c() const noexcept { return m_shape[1]; }
    std::size_t h() const noexcept { return m_shape[2]; }
    std::size_t w() const noexcept { return m_shape[3]; }
    const Shape& shape() const noexcept { return m_shape; }
    std::size_t size() const noexcept { return m_data.size(); }
    bool empty() const noexcept { return m_data.empty(); }

    std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return ((n * m_shape[1] + c) * m_shape[2] + y) * m_shape[3] + x;
    }

    double& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) noexcept {
        return m_data[index(n, c, y, x)];
    }
    double operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return m_data[index(n, c, y, x)];
    }

    /// Contiguous h*w plane for frame n, channel c.
    std::span<double> plane(std::size_t n, std::size_t c) noexcept {
        return {m_data.data() + index(n, c, 0, 0), m_shape[2] * m_shape[3]};
    }
    std::span<const double> plane(std::size_t n, std::size_t c) const noexcept {
        return {m_data.data() + index(n, c, 0, 0), m_shape[2] * m_shape[3]};
    }

    std::span<double> data() noexcept { return m_data; }
    std::span<const double> data() const noexcept { return m_data; }
    std::vector<double>& storage() noexcept { return m_data; }
    const std::vector<double>& storage() const noexcept { return m_data; }

    bool same_shape(const Tensor4& other) const noexcept { return m_shape == other.m_shape; }
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor4&, const Tensor4&) = default;

private:
    Shape m_shape{0, 0, 0, 0};
    std::vector<double> m_data;
};

}  // namespace scenetone
