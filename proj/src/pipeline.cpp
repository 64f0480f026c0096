// SPDX-License-Identifier: Apache-2.0

#include "scenetone/pipeline.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "scenetone/ascv.hpp"
#include "scenetone/error.hpp"
#include "scenetone/image_io.hpp"
#include "scenetone/wav.hpp"

namespace scenetone::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

nn::DenoiserConfig EditConfig::model_config() const {
    nn::DenoiserConfig c;
    c.flags = flags;
    c.lowpass_d0 = d0;
    return c;
}

audio::FeatureOptions EditConfig::feature_options() const {
    audio::FeatureOptions o;
    o.envelope.temperature = tau;
    return o;
}

diffusion::NoiseSchedule EditConfig::schedule() const {
    return diffusion::make_schedule(schedule_steps, beta_start, beta_end);
}

void validate(const EditInputs& inputs, const EditConfig& config) {
    const auto& v = inputs.source.values;
    SCENETONE_REQUIRE(v.n() >= 2, "edit: need at least two frames, got ", v.n());
    SCENETONE_REQUIRE(v.c() == 3, "edit: source video must be RGB, got ", v.c(), " channels");
    SCENETONE_REQUIRE(inputs.mask.frames() == v.n(), "edit: mask has ", inputs.mask.frames(),
                      " frames but the video has ", v.n());
    SCENETONE_REQUIRE(inputs.mask.height() == v.h() && inputs.mask.width() == v.w(), "edit: mask is ",
                      inputs.mask.height(), "x", inputs.mask.width(), " but frames are ", v.h(), "x", v.w());
    const auto model = config.model_config();
    const std::size_t multiple = std::size_t{2} << (model.levels() - 1);
    SCENETONE_REQUIRE(v.h() % multiple == 0 && v.w() % multiple == 0, "edit: frame size ", v.h(), "x", v.w(),
                      " must be a multiple of ", multiple);
    audio::validate(inputs.source_audio);
    audio::validate(inputs.target_audio);
    SCENETONE_REQUIRE(config.ddim_steps >= 1 && config.ddim_steps <= config.schedule_steps,
                      "edit: DDIM steps must lie in [1, ", config.schedule_steps, "], got ", config.ddim_steps);
    SCENETONE_REQUIRE(config.finetune_steps >= 0, "edit: fine-tune steps must be non-negative");
    SCENETONE_REQUIRE(config.lr > 0.0, "edit: learning rate must be positive");
    SCENETONE_REQUIRE(config.tau > 0.0, "edit: temperature must be positive");
}

namespace {

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

}  // namespace

PreparedEdit prepare(const EditInputs& inputs, const EditConfig& config, const ProgressFn& progress) {
    validate(inputs, config);
    const std::size_t frames = inputs.source.frames();
    const auto schedule = config.schedule();
    nn::Denoiser denoiser(config.model_config());

    const auto bundle = stage("features", [&] {
        const auto features =
            audio::extract_features(inputs.source_audio, static_cast<int>(frames), config.feature_options());
        auto flags = config.flags;
        flags.scenemasker = flags.scenemasker && denoiser.config().scenemasker_in_training;
        return diffusion::ConditioningBundle::from_audio(features, frames, flags,
                                                         flags.scenemasker ? std::optional(inputs.mask)
                                                                           : std::nullopt);
    });
    const auto z0 = diffusion::vae_encode(inputs.source);

    auto state = stage("finetune", [&] {
        nn::FinetuneOptions options;
        options.steps = config.finetune_steps;
        options.lr = config.lr;
        options.seed = config.seed;
        options.features = config.feature_options();
        nn::ProgressFn cb;
        if (progress) {
            cb = [&](int step, double loss) { progress("finetune", step, loss); };
        }
        return nn::finetune(denoiser, z0, bundle, schedule, options, cb);
    });

    auto z_T = stage("invert", [&] {
        return diffusion::ddim_invert(z0, denoiser.predictor(state.params), config.ddim_steps, schedule);
    });
    return {denoiser, std::move(state.params), std::move(state.loss_history), z0, std::move(z_T), schedule, config};
}

EditResult sample(const PreparedEdit& prepared, const EditInputs& inputs, const audio::AudioClip& target,
                  const cond::MechanismFlags& flags) {
    const std::size_t frames = inputs.source.frames();
    const auto features = stage("features", [&] {
        return audio::extract_features(target, static_cast<int>(frames), prepared.config.feature_options());
    });
    const auto bundle = diffusion::ConditioningBundle::from_audio(features, frames, flags, inputs.mask);
    EditResult result;
    result.latent = stage("sample", [&] {
        return diffusion::ddim_sample(prepared.z_T, prepared.denoiser.predictor(prepared.params), bundle,
                                      prepared.config.ddim_steps, prepared.schedule);
    });
    result.edited = stage("decode", [&] { return diffusion::vae_decode(result.latent); });
    result.metrics = stage("metrics", [&] {
        return metrics::evaluate(result.edited, inputs.source, inputs.mask, features.semantic.values,
                                 features.semantic.provider_id);
    });
    result.loss_history = prepared.loss_history;
    result.target_embedding = features.semantic;
    return result;
}

EditResult edit(const EditInputs& inputs, const EditConfig& config, const ProgressFn& progress) {
    const auto prepared = prepare(inputs, config, progress);
    return sample(prepared, inputs, inputs.target_audio, config.flags);
}

// ---------------------------------------------------------------------------

std::vector<AblationRow> ablation_run(const EditInputs& inputs, const EditConfig& base, const ProgressFn& progress) {
    struct Variant {
        const char* name;
        cond::MechanismFlags flags;
    };
    auto without = [&](bool cond::MechanismFlags::*member) {
        auto f = base.flags;
        f.*member = false;
        return f;
    };
    const Variant variants[] = {
        {"full", base.flags},
        {"w/o TASI", without(&cond::MechanismFlags::tasi)},
        {"w/o SceneMasker", without(&cond::MechanismFlags::scenemasker)},
        {"w/o FrequencyFuser", without(&cond::MechanismFlags::freqfuse)},
    };
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        EditConfig config = base;
        config.flags = v.flags;
        const auto result = edit(inputs, config, progress);
        rows.push_back({v.name, v.flags, result.metrics, input_hash(inputs, config.seed), config.seed});
    }
    return rows;
}

std::string input_hash(const EditInputs& inputs, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL;
    auto feed = [&](const void* data, std::size_t size) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    };
    const auto video = inputs.source.values.data();
    feed(video.data(), video.size_bytes());
    feed(inputs.source_audio.samples.data(), inputs.source_audio.samples.size() * sizeof(double));
    feed(inputs.target_audio.samples.data(), inputs.target_audio.samples.size() * sizeof(double));
    feed(inputs.mask.bits().data(), inputs.mask.bits().size());
    feed(&seed, sizeof(seed));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string format_table(const std::vector<AblationRow>& rows) {
    std::ostringstream ss;
    char line[160];
    std::snprintf(line, sizeof(line), "%-20s %8s %8s %8s %8s %8s  %s\n", "variant", "Sem-A", "SSIM", "CLIP-F",
                  "CLIP-T", "Temp-S", "inputs");
    ss << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-20s %8.4f %8.4f %8.4f %8.4f %8.4f  %s\n", r.name.c_str(),
                      r.metrics.sem_a, r.metrics.ssim_fg, r.metrics.clip_f, r.metrics.clip_t, r.metrics.temp_s,
                      r.input_hash.c_str());
        ss << line;
    }
    return ss.str();
}

// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& known_keys() {
    static const std::set<std::string> keys{
        "source_video", "source_audio", "target_audio", "mask",       "output_dir",  "seed",
        "finetune_steps", "ddim_steps", "lr",           "tau",        "d0",          "tasi",
        "scenemasker",  "magnitude",    "freqfuse",     "schedule_steps", "beta_start", "beta_end"};
    return keys;
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    return p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

EditRequest request_from_json(const json& j, const fs::path& base_dir) {
    SCENETONE_REQUIRE(j.is_object(), "config: top level must be an object");
    for (const auto& [key, value] : j.items()) {
        SCENETONE_REQUIRE(known_keys().count(key) != 0, "config: unknown key '", key, "'");
    }
    EditRequest r;
    try {
        auto path = [&](const char* key, fs::path& dst) {
            if (j.contains(key)) {
                dst = resolve(j.at(key).get<std::string>(), base_dir);
            }
        };
        path("source_video", r.source_video);
        path("source_audio", r.source_audio);
        path("target_audio", r.target_audio);
        path("mask", r.mask);
        path("output_dir", r.output_dir);
        auto& c = r.config;
        c.seed = j.value("seed", c.seed);
        c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
        c.ddim_steps = j.value("ddim_steps", c.ddim_steps);
        c.lr = j.value("lr", c.lr);
        c.tau = j.value("tau", c.tau);
        c.d0 = j.value("d0", c.d0);
        c.schedule_steps = j.value("schedule_steps", c.schedule_steps);
        c.beta_start = j.value("beta_start", c.beta_start);
        c.beta_end = j.value("beta_end", c.beta_end);
        c.flags.tasi = j.value("tasi", c.flags.tasi);
        c.flags.scenemasker = j.value("scenemasker", c.flags.scenemasker);
        c.flags.magnitude = j.value("magnitude", c.flags.magnitude);
        c.flags.freqfuse = j.value("freqfuse", c.flags.freqfuse);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("config: ") + e.what());
    }
    return r;
}

EditRequest read_request(const fs::path& path) {
    std::ifstream in(path);
    SCENETONE_REQUIRE(in.good(), "cannot open config ", path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidArgument("config " + path.string() + ": " + e.what());
    }
    return request_from_json(j, path.parent_path());
}

json to_json(const EditRequest& r) {
    const auto& c = r.config;
    return json{{"source_video", r.source_video.string()},
                {"source_audio", r.source_audio.string()},
                {"target_audio", r.target_audio.string()},
                {"mask", r.mask.string()},
                {"output_dir", r.output_dir.string()},
                {"seed", c.seed},
                {"finetune_steps", c.finetune_steps},
                {"ddim_steps", c.ddim_steps},
                {"lr", c.lr},
                {"tau", c.tau},
                {"d0", c.d0},
                {"schedule_steps", c.schedule_steps},
                {"beta_start", c.beta_start},
                {"beta_end", c.beta_end},
                {"tasi", c.flags.tasi},
                {"scenemasker", c.flags.scenemasker},
                {"magnitude", c.flags.magnitude},
                {"freqfuse", c.flags.freqfuse}};
}

EditInputs load(const EditRequest& request) {
    return stage("load", [&] {
        EditInputs in;
        in.source = io::read_video(request.source_video);
        in.source_audio = audio::read_wav(request.source_audio);
        in.target_audio = audio::read_wav(request.target_audio);
        in.mask = io::read_mask(request.mask);
        return in;
    });
}

json to_json(const metrics::MetricsReport& m) {
    return json{{"sem_a", m.sem_a},   {"ssim_fg", m.ssim_fg}, {"clip_f", m.clip_f},
                {"clip_t", m.clip_t}, {"temp_s", m.temp_s},   {"frame_embedding", m.frame_provider},
                {"condition_embedding", m.condition_provider}};
}

json to_json(const cond::MechanismFlags& f) {
    return json{{"tasi", f.tasi}, {"scenemasker", f.scenemasker}, {"magnitude", f.magnitude},
                {"freqfuse", f.freqfuse}};
}

json edit_report(const EditResult& result, const EditConfig& config, const std::string& hash) {
    return json{
        {"note", "Stand-in embedders; values are not comparable to CLIP-based scores. No depth condition is used: "
                 "shape preservation relies on the foreground mask and inversion only."},
        {"metrics", to_json(result.metrics)},
        {"flags", to_json(config.flags)},
        {"seed", config.seed},
        {"finetune_steps", config.finetune_steps},
        {"ddim_steps", config.ddim_steps},
        {"lr", config.lr},
        {"tau", config.tau},
        {"d0", config.d0},
        {"input_hash", hash},
        {"final_loss", result.loss_history.empty() ? json(nullptr) : json(result.loss_history.back())},
    };
}

void write_outputs(const fs::path& dir, const EditResult& result, const json& report) {
    stage("write", [&] {
        fs::create_directories(dir);
        io::write_frames(dir / "frames", result.edited);
        ascv::write(dir / "edited.ascv", result.edited.values);
        std::ofstream(dir / "loss_history.json") << json(result.loss_history).dump() << "\n";
        std::ofstream(dir / "report.json") << report.dump(2) << "\n";
    });
}

EditResult run_request(const EditRequest& request, const ProgressFn& progress) {
    const auto inputs = load(request);
    auto result = edit(inputs, request.config, progress);
    write_outputs(request.output_dir, result, edit_report(result, request.config, input_hash(inputs, request.config.seed)));
    return result;
}

}  // namespace scenetone::pipeline
