// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion with its pinned
// tolerance, measured value and runtime. Exit status is the number of
// failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "scenetone/ascv.hpp"
#include "scenetone/audio_features.hpp"
#include "scenetone/conditioning.hpp"
#include "scenetone/denoiser.hpp"
#include "scenetone/diffusion.hpp"
#include "scenetone/fft.hpp"
#include "scenetone/image_io.hpp"
#include "scenetone/metrics.hpp"
#include "scenetone/pipeline.hpp"
#include "scenetone/synth.hpp"
#include "scenetone/wav.hpp"

using namespace scenetone;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double budget_seconds;  // 0 = no runtime bound
    std::function<Outcome()> run;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), format, args...);
    return buf;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a.storage()[i] - b.storage()[i]));
    }
    return m;
}

double mae(const PixelVideo& a, const PixelVideo& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        s += std::abs(a.values.storage()[i] - b.values.storage()[i]);
    }
    return s / static_cast<double>(a.values.size());
}

// Shared synthetic fixture: a textured square over a drifting background,
// a steady two-tone source clip and a louder-in-the-second-half target.
synth::AudioParams target_params(double scale) {
    synth::AudioParams p;
    p.tones = {880.0, 1320.0, 1760.0};
    p.envelope = {{0.0, 0.1 * scale}, {0.5, 0.1 * scale}, {0.5, 0.4 * scale}, {1.0, 0.4 * scale}};
    return p;
}

pipeline::EditInputs fixture() {
    const auto scene = synth::synth_scene({}, 7);
    synth::AudioParams source;
    source.tones = {220.0, 330.0};
    source.envelope = {{0.0, 0.3}, {1.0, 0.3}};
    return {scene.video, synth::synth_audio(source, 1), synth::synth_audio(target_params(1.0), 2), scene.mask};
}

constexpr std::uint64_t kSeed = 3;

pipeline::EditConfig base_config() {
    pipeline::EditConfig c;
    c.seed = kSeed;
    return c;
}

// ---------------------------------------------------------------------------

Outcome softmax_suite() {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> value(-1.0, 1.0);
    std::uniform_int_distribution<int> count(2, 32);
    const double taus[] = {0.1, 1.0, 10.0};
    double worst_sum = 0.0, worst_limit = 0.0;
    int order_violations = 0, negative = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> x(static_cast<std::size_t>(count(rng)));
        for (auto& v : x) {
            v = value(rng);
        }
        const double tau = taus[trial % 3];
        const auto w = audio::tempered_softmax(x, tau);
        double total = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            negative += w[i] < 0.0;
            total += w[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                order_violations += x[i] > x[j] && !(w[i] > w[j]);
            }
        }
        worst_sum = std::max(worst_sum, std::abs(total - 1.0));
        const auto limit = audio::tempered_softmax(x, 1e6);
        for (double v : limit) {
            worst_limit = std::max(worst_limit, std::abs(v - 1.0 / static_cast<double>(limit.size())));
        }
    }
    double worst_uniform = 0.0;
    for (int n = 1; n <= 64; ++n) {
        const std::vector<double> equal(static_cast<std::size_t>(n), 0.37);
        for (double v : audio::tempered_softmax(equal, 1.0)) {
            worst_uniform = std::max(worst_uniform, std::abs(v - 1.0 / n));
        }
    }
    const bool pass = worst_sum <= 1e-9 && order_violations == 0 && negative == 0 && worst_limit <= 1e-4 &&
                      worst_uniform <= 1e-9;
    return {pass, fmt("|sum-1| %.1e (<=1e-9), order violations %d, tau=1e6 dev %.1e (<=1e-4), uniform err %.1e "
                      "(<=1e-9)",
                      worst_sum, order_violations, worst_limit, worst_uniform)};
}

Outcome fft_suite() {
    double oracle_err = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto z = oracle::normal_tensor({4, 3, 4, 4}, 100 + s);
        const auto w = oracle::symmetric_weights(4, 3, 200 + s);
        const bool ideal = s % 2 == 1;
        const double d0 = ideal ? 0.5 : 0.25;
        const auto filter =
            cond::make_lowpass(4, 4, 4, d0, ideal ? cond::LowPassKind::Ideal : cond::LowPassKind::Gaussian);
        oracle_err = std::max(oracle_err, max_abs_diff(cond::freq_fuse(z, w, filter),
                                                       oracle::freq_fuse(z, w.values, d0, ideal)));
    }
    double round_trip = 0.0;
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    for (std::size_t n : {2, 4, 5, 8}) {
        std::vector<fft::Complex> x(n * n * n);
        for (auto& v : x) {
            v = {normal(rng), normal(rng)};
        }
        auto y = x;
        fft::transform3d(y, n, n, n, false);
        fft::transform3d(y, n, n, n, true);
        for (std::size_t i = 0; i < x.size(); ++i) {
            round_trip = std::max(round_trip, std::abs(y[i] - x[i]));
        }
    }
    double identity = 0.0;
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto z = oracle::normal_tensor({4, 2, 4, 8}, 300 + s);
        const auto filter = cond::make_lowpass(4, 4, 8, 0.05 + 0.018 * static_cast<double>(s),
                                               s % 2 ? cond::LowPassKind::Ideal : cond::LowPassKind::Gaussian);
        identity = std::max(identity, max_abs_diff(cond::freq_fuse(z, cond::FrequencyWeights::identity(4, 2), filter), z));
    }
    const bool pass = oracle_err <= 1e-5 && round_trip <= 1e-10 && identity <= 1e-6;
    return {pass, fmt("vs brute-force DFT %.1e (<=1e-5), round trip %.1e (<=1e-10), unit weights %.1e (<=1e-6)",
                      oracle_err, round_trip, identity)};
}

Outcome gradient_suite() {
    const nn::Denoiser d(nn::DenoiserConfig{});
    auto params = d.init(1);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    // Move every parameter off its initial value so that all groups carry signal.
    for (auto& v : params.values) {
        v += 0.1 * normal(rng);
    }
    nn::TrainingBatch batch;
    batch.z0.values = oracle::normal_tensor({2, 12, 4, 4}, 4);
    batch.eps.values = oracle::normal_tensor({2, 12, 4, 4}, 5);
    batch.t = 37;
    const auto clip = synth::synth_audio(target_params(1.0), 6);
    auto mask = cond::ForegroundMask::constant(2, 8, 8, false);
    mask.set(0, 2, 2, true);
    mask.set(1, 5, 4, true);
    batch.bundle = diffusion::ConditioningBundle::from_audio(audio::extract_features(clip, 2), 2,
                                                             cond::MechanismFlags::all(), mask);
    const auto schedule = diffusion::make_schedule(100, 1e-4, 0.02);
    const auto report = nn::gradient_check(d, params, batch, schedule, 200, 1e-4, 7);
    std::string worst;
    double worst_err = -1.0;
    for (const auto& e : report.entries) {
        if (e.rel_error > worst_err) {
            worst_err = e.rel_error;
            worst = e.name;
        }
    }
    return {report.entries.size() == 200 && report.max_rel_error <= 1e-4,
            fmt("%zu coordinates, max rel err %.2e (<=1e-4) at %s", report.entries.size(), report.max_rel_error,
                worst.c_str())};
}

Outcome diffusion_suite() {
    const auto s = diffusion::make_schedule(100, 1e-4, 0.02);
    const LatentVideo z0{oracle::normal_tensor({4, 12, 8, 8}, 10)};
    const LatentVideo eps{oracle::normal_tensor({4, 12, 8, 8}, 11)};
    double inverse = 0.0;
    for (int t = 1; t <= 100; t += 11) {
        const auto z_t = diffusion::q_sample(z0, t, eps, s);
        inverse = std::max(inverse, max_abs_diff(diffusion::ddim_step(z_t, eps, t, 0, s).values, z0.values));
    }

    diffusion::NoisePredictor perfect = [&](const LatentVideo& z_t, int t, const diffusion::ConditioningBundle&) {
        LatentVideo out{Tensor4(z_t.values.shape())};
        const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            out.values.storage()[i] = (z_t.values.storage()[i] - a * z0.values.storage()[i]) / b;
        }
        return out;
    };
    const auto z_T = diffusion::q_sample(z0, 100, eps, s);
    const double recovery = max_abs_diff(
        diffusion::ddim_sample(z_T, perfect, diffusion::ConditioningBundle::unconditional(), 10, s).values, z0.values);

    // Monte-Carlo moments of one coordinate at t = 50.
    const int t = 50, draws = 10000;
    LatentVideo one{Tensor4(1, 1, 1, 1, 0.8)};
    std::mt19937_64 rng(12);
    std::normal_distribution<double> normal;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < draws; ++i) {
        LatentVideo e{Tensor4(1, 1, 1, 1, normal(rng))};
        const double v = diffusion::q_sample(one, t, e, s).values.storage()[0];
        sum += v;
        sum2 += v * v;
    }
    const double mean = sum / draws;
    const double var = sum2 / draws - mean * mean;
    const double target_var = 1.0 - s.alpha_bar(t);
    const double mean_z = std::abs(mean - std::sqrt(s.alpha_bar(t)) * 0.8) / std::sqrt(target_var / draws);
    const double var_rel = std::abs(var / target_var - 1.0);
    const bool pass = inverse <= 1e-10 && recovery <= 1e-6 && mean_z <= 3.0 && var_rel <= 0.05;
    return {pass, fmt("step-inverts-q_sample %.1e (<=1e-10), perfect-denoiser 10 steps %.1e (<=1e-6), MC mean "
                      "%.2f sigma (<=3), MC var rel %.3f (<=0.05)",
                      inverse, recovery, mean_z, var_rel)};
}

struct Trained {
    pipeline::EditInputs inputs;
    std::optional<pipeline::PreparedEdit> prepared;
};

Trained& trained() {
    static Trained t{fixture(), std::nullopt};
    if (!t.prepared) {
        t.prepared = pipeline::prepare(t.inputs, base_config());
    }
    return t;
}

Outcome training_suite() {
    const auto& h = trained().prepared->loss_history;
    if (h.size() != 200) {
        return {false, fmt("expected 200 losses, got %zu", h.size())};
    }
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 20; ++i) {
        first += h[static_cast<std::size_t>(i)];
        last += h[h.size() - 1 - static_cast<std::size_t>(i)];
    }
    first /= 20.0;
    last /= 20.0;
    return {last <= 0.5 * first,
            fmt("mean loss first 20 %.4f, last 20 %.4f, ratio %.3f (<=0.5)", first, last, last / first)};
}

Outcome reconstruction_suite() {
    auto& t = trained();
    const auto result = pipeline::sample(*t.prepared, t.inputs, t.inputs.source_audio, base_config().flags);
    const double err = mae(result.edited, t.inputs.source);
    return {err <= 0.05, fmt("same-audio edit MAE %.4f (<=0.05), 20 DDIM steps", err)};
}

std::vector<pipeline::AblationRow>& ablation() {
    static std::vector<pipeline::AblationRow> rows;
    if (rows.empty()) {
        rows = pipeline::ablation_run(fixture(), base_config());
        std::printf("%s", pipeline::format_table(rows).c_str());
    }
    return rows;
}

const pipeline::AblationRow& row(const std::string& name) {
    for (const auto& r : ablation()) {
        if (r.name == name) {
            return r;
        }
    }
    throw std::runtime_error("missing ablation row " + name);
}

Outcome scenemasker_suite() {
    const double full = row("full").metrics.ssim_fg;
    const double without = row("w/o SceneMasker").metrics.ssim_fg;
    bool same_inputs = true;
    for (const auto& r : ablation()) {
        same_inputs = same_inputs && r.input_hash == ablation().front().input_hash && r.seed == kSeed;
    }
    return {full >= 0.99 && full > without && same_inputs,
            fmt("fg SSIM full %.4f (>=0.99), w/o SceneMasker %.4f (< full), shared inputs %s", full, without,
                same_inputs ? "yes" : "no")};
}

Outcome freqfuse_suite() {
    const double full = row("full").metrics.temp_s;
    const double without = row("w/o FrequencyFuser").metrics.temp_s;
    return {full >= without, fmt("Temp-S full %.4f >= w/o FrequencyFuser %.4f", full, without)};
}

// Mean over frames of Spearman(c, scene-region L1 deviation of frame n).
double dose_response(double tau) {
    auto inputs = fixture();
    inputs.target_audio = inputs.source_audio;
    auto config = base_config();
    config.tau = tau;
    const auto prepared = pipeline::prepare(inputs, config);
    const std::vector<double> scales{0.5, 1.0, 2.0};
    const std::size_t frames = inputs.source.frames();
    std::vector<std::vector<double>> dev(frames, std::vector<double>(scales.size(), 0.0));
    for (std::size_t k = 0; k < scales.size(); ++k) {
        const auto target = synth::synth_audio(target_params(scales[k]), 2);
        const auto r = pipeline::sample(prepared, inputs, target, config.flags);
        const auto& v = r.edited.values;
        for (std::size_t n = 0; n < frames; ++n)
            for (std::size_t c = 0; c < v.c(); ++c)
                for (std::size_t y = 0; y < v.h(); ++y)
                    for (std::size_t x = 0; x < v.w(); ++x)
                        if (!inputs.mask.at(n, y, x)) {
                            dev[n][k] += std::abs(v(n, c, y, x) - inputs.source.values(n, c, y, x));
                        }
    }
    double total = 0.0;
    for (const auto& d : dev) {
        total += oracle::spearman(scales, d);
    }
    return total / static_cast<double>(frames);
}

Outcome dose_suite() {
    const double rho = dose_response(0.1);
    const double rho_default = dose_response(1.0);
    return {rho >= 0.9, fmt("mean per-frame Spearman %.3f (>=0.9) at tau 0.1; info: %.3f at tau 1.0", rho,
                            rho_default)};
}

Outcome metric_suite() {
    std::mt19937_64 rng(20);
    double factor_err = 0.0;
    bool ssim_one = true, determinism = true, ranges = true;
    for (std::uint64_t s = 0; s < 30; ++s) {
        const PixelVideo v{oracle::random_tensor({4, 3, 32, 32}, 400 + s, 0.0, 1.0)};
        const auto frames = metrics::embed_frames(v);
        const auto again = metrics::embed_frames(v);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            determinism = determinism && frames[i].values == again[i].values;
        }
        const auto cond = metrics::frame_embed(oracle::random_tensor({1, 3, 32, 32}, 500 + s, 0.0, 1.0));
        const double ts = metrics::temp_s(frames, cond.values);
        factor_err = std::max(factor_err,
                              std::abs(ts - metrics::clip_f(frames) * metrics::clip_t(frames, cond.values)));
        ranges = ranges && ts >= -1.0 && ts <= 1.0;
        auto mask = cond::ForegroundMask::constant(4, 32, 32, false);
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t y = 4; y < 28; ++y)
                for (std::size_t x = 6; x < 26; ++x)
                    mask.set(n, y, x, true);
        ssim_one = ssim_one && metrics::masked_ssim(v, v, mask) == 1.0;
    }
    // Every frame equidistant from source and target.
    const std::vector<double> src{1.0, 0.0, 0.0}, tgt{0.0, 1.0, 0.0};
    const std::vector<metrics::FrameEmbedding> ties(5, {{1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0), 0.0}, "t"});
    const double tie = metrics::sem_a(ties, src, tgt);
    const bool pass = factor_err <= 1e-12 && ssim_one && tie == 0.0 && determinism && ranges;
    return {pass, fmt("|temp_s - clip_f*clip_t| %.1e (<=1e-12), SSIM(a,a)==1 %s, sem_a tie %.1f (==0), embeddings "
                      "bitwise %s",
                      factor_err, ssim_one ? "yes" : "no", tie, determinism ? "yes" : "no")};
}

Outcome determinism_suite() {
    const auto root = fs::temp_directory_path() / "scenetone_acceptance_determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    const auto in = fixture();
    ascv::write(root / "source.ascv", in.source.values);
    audio::write_wav(root / "source.wav", in.source_audio);
    audio::write_wav(root / "target.wav", in.target_audio);
    io::write_mask(root / "mask", in.mask);

    auto run = [&](const std::string& out) {
        pipeline::EditRequest r;
        r.source_video = root / "source.ascv";
        r.source_audio = root / "source.wav";
        r.target_audio = root / "target.wav";
        r.mask = root / "mask";
        r.output_dir = root / out;
        r.config = base_config();
        pipeline::run_request(r);
        std::ifstream f(root / out / "edited.ascv", std::ios::binary);
        return std::vector<char>(std::istreambuf_iterator<char>(f), {});
    };
    const auto a = run("a");
    const auto b = run("b");
    fs::remove_all(root);
    return {!a.empty() && a == b, fmt("edited.ascv %zu bytes, identical %s", a.size(), a == b ? "yes" : "no")};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {1, "softmax envelope", 1.0, softmax_suite},
        {2, "FFT / frequency fuser", 10.0, fft_suite},
        {3, "gradient check", 60.0, gradient_suite},
        {4, "diffusion algebra", 0.0, diffusion_suite},
        {5, "training loss drop", 300.0, training_suite},
        {6, "reconstruction", 0.0, reconstruction_suite},
        {7, "SceneMasker ablation ordering", 0.0, scenemasker_suite},
        {8, "Frequency Fuser ablation ordering", 0.0, freqfuse_suite},
        {9, "magnitude dose-response", 0.0, dose_suite},
        {10, "metric identities", 0.0, metric_suite},
        {11, "end-to-end determinism", 0.0, determinism_suite},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        Outcome o;
        const auto start = std::chrono::steady_clock::now();
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool pass = o.pass;
        std::string timing = fmt("%.2fs", seconds);
        if (c.budget_seconds > 0.0) {
            timing += fmt(" (<%.0fs)", c.budget_seconds);
            pass = pass && seconds < c.budget_seconds;
        }
        failures += pass ? 0 : 1;
        std::printf("[%s] %2d %-34s %s [%s]\n", pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures;
}
