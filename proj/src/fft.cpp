// SPDX-License-Identifier: Apache-2.0

#include "scenetone/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>
#include <tuple>

#include "scenetone/error.hpp"

namespace scenetone::fft {

namespace {

// The FFTW planner is not thread-safe, executing a plan on new arrays is.
// Plans are created once per shape and kept for the process lifetime.
using PlanKey = std::tuple<int, std::size_t, std::size_t, std::size_t>;

std::mutex g_plan_mutex;
std::map<PlanKey, fftw_plan> g_plans;

fftw_plan complex_plan(std::size_t n0, std::size_t n1, std::size_t n2, int sign) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    const PlanKey key{sign, n0, n1, n2};
    if (auto it = g_plans.find(key); it != g_plans.end()) {
        return it->second;
    }
    const std::size_t total = n0 * n1 * n2;
    fftw_complex* scratch = fftw_alloc_complex(total);
    fftw_plan plan = fftw_plan_dft_3d(static_cast<int>(n0), static_cast<int>(n1), static_cast<int>(n2), scratch,
                                      scratch, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(scratch);
    if (plan == nullptr) {
        throw ConsistencyError("fftw failed to create a 3d plan");
    }
    g_plans.emplace(key, plan);
    return plan;
}

fftw_plan real_plan(std::size_t n) {
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    const PlanKey key{0, n, 0, 0};
    if (auto it = g_plans.find(key); it != g_plans.end()) {
        return it->second;
    }
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(in);
    fftw_free(out);
    if (plan == nullptr) {
        throw ConsistencyError("fftw failed to create an r2c plan");
    }
    g_plans.emplace(key, plan);
    return plan;
}

}  // namespace

void transform3d(std::span<Complex> data, std::size_t n0, std::size_t n1, std::size_t n2, bool inverse) {
    const std::size_t total = n0 * n1 * n2;
    SCENETONE_REQUIRE(total > 0 && data.size() == total, "fft3d: buffer of ", data.size(),
                      " does not match grid ", n0, "x", n1, "x", n2);
    fftw_plan plan = complex_plan(n0, n1, n2, inverse ? FFTW_BACKWARD : FFTW_FORWARD);
    auto* buffer = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(plan, buffer, buffer);
    if (inverse) {
        const double scale = 1.0 / static_cast<double>(total);
        for (auto& v : data) {
            v *= scale;
        }
    }
}

std::vector<double> power_spectrum(std::span<const double> frame) {
    const std::size_t n = frame.size();
    SCENETONE_REQUIRE(n > 0, "power_spectrum: empty frame");
    std::vector<double> in(frame.begin(), frame.end());
    std::vector<Complex> out(n / 2 + 1);
    fftw_execute_dft_r2c(real_plan(n), in.data(), reinterpret_cast<fftw_complex*>(out.data()));
    std::vector<double> power(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        power[k] = std::norm(out[k]);
    }
    return power;
}

}  // namespace scenetone::fft
