// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace scenetone::fft {

using Complex = std::complex<double>;

/// In-place 3D DFT over a row-major n0 x n1 x n2 grid. The forward transform
/// is unnormalized; the inverse divides by n0*n1*n2 so that
/// inverse(forward(x)) == x.
void transform3d(std::span<Complex> data, std::size_t n0, std::size_t n1, std::size_t n2, bool inverse);

/// |X_k|^2 for k = 0..n/2 of the real input frame.
std::vector<double> power_spectrum(std::span<const double> frame);

}  // namespace scenetone::fft
