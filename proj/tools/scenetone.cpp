// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>

#include "CLI11.hpp"

#include <nlohmann/json.hpp>

#include "scenetone/ascv.hpp"
#include "scenetone/error.hpp"
#include "scenetone/image_io.hpp"
#include "scenetone/pipeline.hpp"
#include "scenetone/synth.hpp"
#include "scenetone/wav.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scenetone;

namespace {

// Options shared by edit, finetune and ablate. Values given on the command
// line override the config file.
struct RequestOptions {
    std::string config;
    std::string source_video;
    std::string source_audio;
    std::string target_audio;
    std::string mask;
    std::string out;

    std::uint64_t seed = 0;
    int steps = 0;
    int ddim_steps = 0;
    double lr = 0.0;
    double tau = 0.0;
    double d0 = 0.0;
    bool no_tasi = false;
    bool no_scenemasker = false;
    bool no_magnitude = false;
    bool no_freqfuse = false;

    CLI::App* app = nullptr;
};

void add_request_options(CLI::App* app, RequestOptions& o, bool needs_target) {
    o.app = app;
    app->add_option("-c,--config", o.config, "JSON request; keys mirror the command-line options")
        ->check(CLI::ExistingFile);
    app->add_option("--source-video", o.source_video, "Frame directory or .ascv volume");
    app->add_option("--source-audio", o.source_audio, "16-bit PCM WAV");
    if (needs_target) {
        app->add_option("--target-audio", o.target_audio, "16-bit PCM WAV");
    }
    app->add_option("--mask", o.mask, "Mask directory (mask_XXXX.pgm) or .ascv volume");
    app->add_option("-o,--out", o.out, "Output directory");
    app->add_option("--seed", o.seed, "Random seed");
    app->add_option("--steps", o.steps, "Fine-tuning steps")->check(CLI::NonNegativeNumber);
    app->add_option("--ddim-steps", o.ddim_steps, "DDIM steps")->check(CLI::PositiveNumber);
    app->add_option("--lr", o.lr, "Learning rate")->check(CLI::PositiveNumber);
    app->add_option("--tau", o.tau, "Magnitude softmax temperature")->check(CLI::PositiveNumber);
    app->add_option("--d0", o.d0, "Low-pass cutoff of the frequency fuser")->check(CLI::PositiveNumber);
    app->add_flag("--no-tasi", o.no_tasi, "Disable semantic injection");
    app->add_flag("--no-scenemasker", o.no_scenemasker, "Disable mask blending");
    app->add_flag("--no-magnitude", o.no_magnitude, "Disable magnitude modulation");
    app->add_flag("--no-freqfuse", o.no_freqfuse, "Disable the frequency fuser");
}

bool given(const RequestOptions& o, const std::string& name) {
    return o.app->count(name) > 0;
}

pipeline::EditRequest build_request(const RequestOptions& o) {
    pipeline::EditRequest r;
    if (!o.config.empty()) {
        r = pipeline::read_request(o.config);
    }
    auto& c = r.config;
    if (given(o, "--source-video")) r.source_video = o.source_video;
    if (given(o, "--source-audio")) r.source_audio = o.source_audio;
    if (o.app->get_option_no_throw("--target-audio") && given(o, "--target-audio")) r.target_audio = o.target_audio;
    if (given(o, "--mask")) r.mask = o.mask;
    if (given(o, "--out")) r.output_dir = o.out;
    if (given(o, "--seed")) c.seed = o.seed;
    if (given(o, "--steps")) c.finetune_steps = o.steps;
    if (given(o, "--ddim-steps")) c.ddim_steps = o.ddim_steps;
    if (given(o, "--lr")) c.lr = o.lr;
    if (given(o, "--tau")) c.tau = o.tau;
    if (given(o, "--d0")) c.d0 = o.d0;
    c.flags.tasi = c.flags.tasi && !o.no_tasi;
    c.flags.scenemasker = c.flags.scenemasker && !o.no_scenemasker;
    c.flags.magnitude = c.flags.magnitude && !o.no_magnitude;
    c.flags.freqfuse = c.flags.freqfuse && !o.no_freqfuse;
    return r;
}

pipeline::ProgressFn console_progress() {
    return [](const std::string& stage, int step, double value) {
        if (stage == "finetune" && (step + 1) % 25 == 0) {
            std::fprintf(stderr, "  finetune step %4d  loss %.5f\n", step + 1, value);
        }
    };
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    SCENETONE_REQUIRE(out.good(), "cannot write ", path.string());
    out << j.dump(2) << "\n";
}

void print_metrics(const metrics::MetricsReport& m) {
    std::printf("Sem-A %.4f  SSIM(fg) %.4f  CLIP-F %.4f  CLIP-T %.4f  Temp-S %.4f\n", m.sem_a, m.ssim_fg, m.clip_f,
                m.clip_t, m.temp_s);
}

// ---------------------------------------------------------------------------

int run_edit(const RequestOptions& o) {
    const auto request = build_request(o);
    const auto result = pipeline::run_request(request, console_progress());
    print_metrics(result.metrics);
    std::printf("wrote %s\n", request.output_dir.string().c_str());
    return EXIT_SUCCESS;
}

int run_ablate(const RequestOptions& o) {
    const auto request = build_request(o);
    const auto inputs = pipeline::load(request);
    const auto rows = pipeline::ablation_run(inputs, request.config, console_progress());
    const auto table = pipeline::format_table(rows);
    std::printf("%s", table.c_str());

    json j = json::array();
    for (const auto& r : rows) {
        j.push_back({{"variant", r.name},
                     {"flags", pipeline::to_json(r.flags)},
                     {"metrics", pipeline::to_json(r.metrics)},
                     {"input_hash", r.input_hash},
                     {"seed", r.seed}});
    }
    fs::create_directories(request.output_dir);
    write_json(request.output_dir / "ablation.json", j);
    std::ofstream(request.output_dir / "ablation.txt") << table;
    return EXIT_SUCCESS;
}

int run_finetune(const RequestOptions& o) {
    const auto request = build_request(o);
    const auto& config = request.config;
    const auto video = io::read_video(request.source_video);
    const auto clip = audio::read_wav(request.source_audio);
    std::optional<cond::ForegroundMask> mask;
    if (!request.mask.empty()) {
        mask = io::read_mask(request.mask);
    }

    const nn::Denoiser denoiser(config.model_config());
    nn::FinetuneOptions options;
    options.steps = config.finetune_steps;
    options.lr = config.lr;
    options.seed = config.seed;
    options.features = config.feature_options();
    const auto progress = console_progress();
    const auto state = nn::finetune(denoiser, video, clip, config.schedule(), options, mask,
                                    [&](int step, double loss) { progress("finetune", step, loss); });

    const auto& dir = request.output_dir;
    fs::create_directories(dir);
    const std::uint64_t total = state.params.values.size();
    ascv::write(dir / "params.ascv", std::span<const std::uint64_t>(&total, 1), state.params.values);

    json entries = json::array();
    for (const auto& e : denoiser.layout().entries()) {
        entries.push_back({{"name", e.name}, {"offset", e.offset}, {"shape", e.shape}});
    }
    write_json(dir / "params.json", {{"tensor", "params.ascv"},
                                     {"total", total},
                                     {"entries", entries},
                                     {"seed", config.seed},
                                     {"steps", state.step},
                                     {"flags", pipeline::to_json(config.flags)}});
    write_json(dir / "loss_history.json", state.loss_history);
    if (!state.loss_history.empty()) {
        std::printf("final loss %.5f after %d steps\n", state.loss_history.back(), state.step);
    }
    std::printf("%llu parameters written to %s\n", static_cast<unsigned long long>(total),
                (dir / "params.ascv").string().c_str());
    return EXIT_SUCCESS;
}

struct MetricsOptions {
    std::string edited;
    std::string source;
    std::string mask;
    std::string target_audio;
    std::string out;
};

int run_metrics(const MetricsOptions& o) {
    const auto edited = io::read_video(o.edited);
    const auto source = io::read_video(o.source);
    const auto mask = io::read_mask(o.mask);
    const auto target = audio::spectral_embed(audio::read_wav(o.target_audio));
    const auto report = metrics::evaluate(edited, source, mask, target.values, target.provider_id);
    print_metrics(report);
    if (!o.out.empty()) {
        write_json(o.out, pipeline::to_json(report));
    }
    return EXIT_SUCCESS;
}

struct SynthOptions {
    std::string out = "synthetic";
    std::uint64_t seed = 7;
    std::size_t frames = 8;
    std::size_t size = 32;
    double target_scale = 1.0;
};

int run_synth(const SynthOptions& o) {
    synth::SceneParams params;
    params.frames = o.frames;
    params.height = o.size;
    params.width = o.size;
    params.square = o.size / 2;
    params.x0 = static_cast<long>(o.size / 8);
    params.y0 = static_cast<long>(o.size / 4);
    params.vx = o.frames > 1 ? std::min<long>(1, static_cast<long>((o.size - params.square - o.size / 8) /
                                                                    (o.frames - 1)))
                             : 0;
    const auto scene = synth::synth_scene(params, o.seed);

    synth::AudioParams source;
    source.tones = {220.0, 330.0};
    source.envelope = {{0.0, 0.3}, {1.0, 0.3}};
    synth::AudioParams target;
    target.tones = {880.0, 1320.0, 1760.0};
    const double s = o.target_scale;
    target.envelope = {{0.0, 0.1 * s}, {0.5, 0.1 * s}, {0.5, 0.4 * s}, {1.0, 0.4 * s}};

    const fs::path dir = o.out;
    fs::create_directories(dir);
    io::write_frames(dir / "source", scene.video);
    ascv::write(dir / "source.ascv", scene.video.values);
    io::write_mask(dir / "mask", scene.mask);
    audio::write_wav(dir / "source.wav", synth::synth_audio(source, o.seed + 1));
    audio::write_wav(dir / "target.wav", synth::synth_audio(target, o.seed + 2));
    write_json(dir / "edit.json", {{"source_video", "source.ascv"},
                                   {"source_audio", "source.wav"},
                                   {"target_audio", "target.wav"},
                                   {"mask", "mask"},
                                   {"output_dir", "edit"},
                                   {"seed", 3}});
    std::printf("wrote %zu frames of %zux%zu to %s (config %s)\n", o.frames, o.size, o.size, dir.string().c_str(),
                (dir / "edit.json").string().c_str());
    return EXIT_SUCCESS;
}

struct GradcheckOptions {
    std::size_t samples = 200;
    std::uint64_t seed = 0;
    double step = 1e-4;
    double tolerance = 1e-4;
    bool verbose = false;
};

int run_gradcheck(const GradcheckOptions& o) {
    const nn::Denoiser denoiser(nn::DenoiserConfig{});
    auto params = denoiser.init(o.seed);
    std::mt19937_64 rng(o.seed + 1);
    std::normal_distribution<double> normal;
    for (auto& v : params.values) {
        v += 0.1 * normal(rng);
    }
    nn::TrainingBatch batch;
    batch.z0.values = Tensor4(2, 12, 4, 4);
    batch.eps.values = Tensor4(2, 12, 4, 4);
    for (auto& v : batch.z0.values.storage()) v = normal(rng);
    for (auto& v : batch.eps.values.storage()) v = normal(rng);
    batch.t = 37;

    synth::AudioParams ap;
    ap.envelope = {{0.0, 0.2}, {1.0, 0.6}};
    auto mask = cond::ForegroundMask::constant(2, 8, 8, false);
    mask.set(0, 2, 2, true);
    mask.set(1, 5, 4, true);
    const auto features = audio::extract_features(synth::synth_audio(ap, o.seed), 2);
    batch.bundle = diffusion::ConditioningBundle::from_audio(features, 2, cond::MechanismFlags::all(), mask);

    const auto schedule = diffusion::make_schedule(100, 1e-4, 0.02);
    const auto report = nn::gradient_check(denoiser, params, batch, schedule, o.samples, o.step, o.seed + 2);
    for (const auto& e : report.entries) {
        if (o.verbose || e.rel_error > o.tolerance) {
            std::printf("%-32s [%6zu] analytic % .6e numeric % .6e rel %.2e\n", e.name.c_str(), e.index, e.analytic,
                        e.numeric, e.rel_error);
        }
    }
    const bool ok = report.max_rel_error <= o.tolerance;
    std::printf("%zu coordinates, max relative error %.3e (tolerance %.1e): %s\n", report.entries.size(),
                report.max_rel_error, o.tolerance, ok ? "ok" : "FAILED");
    return ok ? EXIT_SUCCESS : EXIT_FAILURE;
}

}  // namespace

int main(int argc, char* argv[]) try {
    CLI::App app{"scenetone: audio-guided scene editing for short videos"};
    app.require_subcommand(1);

    RequestOptions edit_opts;
    auto* edit = app.add_subcommand("edit", "Fine-tune, invert and re-sample a video under a target clip");
    add_request_options(edit, edit_opts, true);

    RequestOptions ablate_opts;
    auto* ablate = app.add_subcommand("ablate", "Run the full model and one run without each mechanism");
    add_request_options(ablate, ablate_opts, true);

    RequestOptions finetune_opts;
    auto* finetune = app.add_subcommand("finetune", "Fine-tune the denoiser and write its parameters");
    add_request_options(finetune, finetune_opts, false);

    MetricsOptions metrics_opts;
    auto* metrics = app.add_subcommand("metrics", "Score an edited video against its source");
    metrics->add_option("--edited", metrics_opts.edited, "Edited frames or .ascv")->required();
    metrics->add_option("--source", metrics_opts.source, "Source frames or .ascv")->required();
    metrics->add_option("--mask", metrics_opts.mask, "Foreground mask")->required();
    metrics->add_option("--target-audio", metrics_opts.target_audio, "Target clip")->required();
    metrics->add_option("-o,--out", metrics_opts.out, "Write the report as JSON");

    SynthOptions synth_opts;
    auto* synth = app.add_subcommand("synth", "Write a synthetic scene, mask, clips and an edit config");
    synth->add_option("-o,--out", synth_opts.out, "Output directory")->capture_default_str();
    synth->add_option("--seed", synth_opts.seed, "Background seed")->capture_default_str();
    synth->add_option("--frames", synth_opts.frames, "Frame count")->capture_default_str()->check(CLI::Range(2, 256));
    synth->add_option("--size", synth_opts.size, "Frame side in pixels (multiple of 8)")
        ->capture_default_str()
        ->check(CLI::Range(16, 512));
    synth->add_option("--target-scale", synth_opts.target_scale, "Target envelope scale")->capture_default_str();

    GradcheckOptions grad_opts;
    auto* gradcheck = app.add_subcommand("gradcheck", "Compare backprop against central finite differences");
    gradcheck->add_option("--samples", grad_opts.samples, "Coordinates to check")->capture_default_str();
    gradcheck->add_option("--seed", grad_opts.seed, "Random seed")->capture_default_str();
    gradcheck->add_option("--step", grad_opts.step, "Finite-difference step")->capture_default_str();
    gradcheck->add_option("--tolerance", grad_opts.tolerance, "Maximum relative error")->capture_default_str();
    gradcheck->add_flag("-v,--verbose", grad_opts.verbose, "Print every coordinate");

    CLI11_PARSE(app, argc, argv);

    if (*edit) return run_edit(edit_opts);
    if (*ablate) return run_ablate(ablate_opts);
    if (*finetune) return run_finetune(finetune_opts);
    if (*metrics) return run_metrics(metrics_opts);
    if (*synth) return run_synth(synth_opts);
    if (*gradcheck) return run_gradcheck(grad_opts);
    return EXIT_FAILURE;
} catch (const StageError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
} catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << std::endl;
    return 2;
} catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
}
