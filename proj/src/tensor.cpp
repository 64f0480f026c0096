// SPDX-License-Identifier: Apache-2.0

#include "scenetone/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace scenetone {

bool Tensor4::all_finite() const noexcept {
    return std::all_of(m_data.begin(), m_data.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace scenetone
