#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "savekit/archive.hpp"
#include "savekit/config.hpp"
#include "savekit/errors.hpp"
#include "savekit/eval.hpp"
#include "savekit/model.hpp"
#include "savekit/pseudo_flow.hpp"
#include "savekit/sampler.hpp"
#include "savekit/trainer.hpp"

namespace savekit::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class Logger {
public:
    Logger(std::ostream& sink, bool json_lines) : sink_(sink), json_(json_lines) {}

    void event(const std::string& name, const json& fields = json::object()) const {
        if (json_) {
            json line = fields;
            line["event"] = name;
            sink_ << line.dump() << "\n";
            return;
        }
        sink_ << "[savekit] " << name;
        for (const auto& [k, v] : fields.items()) sink_ << " " << k << "=" << (v.is_string() ? v.get<std::string>() : v.dump());
        sink_ << "\n";
    }

private:
    std::ostream& sink_;
    bool json_;
};

struct Options {
    std::string config_path;
    std::string run_dir;
    bool json_logs = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::int64_t> steps;
    std::optional<double> lambda_attn;
    std::optional<double> guidance;
    std::optional<std::int64_t> ddim_steps;
    // subcommand specific
    std::string prompt;
    std::string edits_dir;
    std::string dump_path;
    std::optional<double> t_fraction;
    bool force = false;
};

struct Context {
    RunConfig config;
    Options options;
    Logger log;
    std::ostream& out;
};

fs::path default_run_dir(const Options& o) {
    if (const char* env = std::getenv(kRunDirEnv); env && *env) return env;
    if (!o.run_dir.empty()) return o.run_dir;
    return RunConfig{}.run_dir;
}

RunConfig resolve_config(const Options& o) {
    const fs::path path = o.config_path.empty() ? default_run_dir(o) / "config.toml" : fs::path(o.config_path);
    auto config = RunConfig::load(path);
    if (!o.run_dir.empty() && !std::getenv(kRunDirEnv)) config.run_dir = o.run_dir;
    if (const char* env = std::getenv(kRunDirEnv); env && *env) config.run_dir = env;
    if (o.seed) config.train.seed = config.sampler.seed = config.pretrain.seed = *o.seed;
    if (o.lambda_attn) config.train.lambda_attn = *o.lambda_attn;
    if (o.guidance) config.sampler.guidance_scale = *o.guidance;
    if (o.ddim_steps) config.sampler.ddim_steps = *o.ddim_steps;
    return config;
}

// Replaces the lines of `stage` in log.jsonl with the entries of `state`.
void write_stage_log(const fs::path& path, const std::string& stage, const TrainState& state) {
    std::string kept;
    if (fs::exists(path)) {
        std::istringstream in(read_file(path));
        for (std::string line; std::getline(in, line);) {
            if (line.empty()) continue;
            auto j = json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.value("stage", "") == stage) continue;
            kept += line + "\n";
        }
    }
    for (std::size_t i = 0; i < state.log.size(); ++i) {
        auto j = state.log[i].to_json();
        j["stage"] = stage;
        j["step"] = i;
        kept += j.dump() + "\n";
    }
    write_file_atomic(path, kept);
}

std::function<void(const TrainState&)> progress(const Context& ctx, const std::string& stage, std::int64_t total) {
    return [&ctx, stage, total](const TrainState& s) {
        const auto n = s.step;
        if (n % 50 != 0 && n != total) return;
        const auto& r = s.log.back();
        ctx.log.event("step", {{"stage", stage}, {"step", n}, {"total_steps", total}, {"ldm", r.ldm}, {"attn", r.attn},
                               {"loss", r.total}});
    };
}

void save_word_bundle(const StageCheckpoint& ck, const RunConfig& config) {
    WordBundle bundle;
    bundle.motion = ck.motion;
    bundle.protagonist = ck.protagonist;
    bundle.prompts = {{"stage1", config.stage1_prompt}, {"source", config.source_prompt}, {"edit", config.edit_prompts}};
    save_words(bundle, config.words_path().string());
}

std::string slug(std::size_t index, const std::string& prompt) {
    std::ostringstream s;
    s << std::setw(2) << std::setfill('0') << index + 1;
    std::istringstream words(prompt);
    for (std::string w; words >> w;) {
        std::string clean;
        for (char c : w)
            if (std::isalnum(static_cast<unsigned char>(c))) clean += c;
        if (!clean.empty()) s << "_" << clean;
    }
    return s.str();
}

int cmd_init(Context& ctx) {
    const auto path = ctx.options.config_path.empty() ? ctx.config.config_path() : fs::path(ctx.options.config_path);
    if (fs::exists(path) && !ctx.options.force)
        throw DependencyError("config '" + path.string() + "' exists; pass --force to overwrite");
    ctx.config.validate();
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    write_file_atomic(path, ctx.config.dump());
    ctx.log.event("init", {{"config", path.string()}});
    return kOk;
}

int cmd_pretrain(Context& ctx) {
    auto& c = ctx.config;
    if (ctx.options.steps) c.pretrain.steps = *ctx.options.steps;
    c.validate();
    fs::create_directories(c.run_dir);
    double window = 0.0;
    auto kit = pretrain_base_model(c.pretrain, [&](std::int64_t step, double loss) {
        window += loss;
        if ((step + 1) % 100 == 0 || step + 1 == c.pretrain.steps) {
            const auto n = (step % 100) + 1;
            ctx.log.event("step", {{"stage", "pretrain"}, {"step", step + 1}, {"loss", window / static_cast<double>(n)}});
            window = 0.0;
        }
    });
    save_kit(kit, c.base_model_path(), {{"pretrain", c.pretrain.to_json()}});
    ctx.log.event("saved", {{"path", c.base_model_path().string()}});
    return kOk;
}

int cmd_train_stage1(Context& ctx) {
    auto& c = ctx.config;
    if (ctx.options.steps) c.train.stage1_steps = *ctx.options.steps;
    c.validate();
    auto base = load_kit(c.base_model_path());
    auto video = load_source(c);
    auto trainer = Trainer::stage1(base, video, c.stage1_prompt, c.train);
    trainer.run(std::nullopt, progress(ctx, "stage1", trainer.total_steps()));
    auto ck = trainer.checkpoint();
    save_checkpoint(ck, c.stage1_path());
    save_word_bundle(ck, c);
    write_stage_log(c.log_path(), "stage1", trainer.state());
    ctx.log.event("saved", {{"path", c.stage1_path().string()}});
    return kOk;
}

int cmd_train_stage2(Context& ctx) {
    auto& c = ctx.config;
    if (ctx.options.steps) c.train.stage2_steps = *ctx.options.steps;
    c.validate();
    auto stage1 = load_checkpoint(c.stage1_path(), "stage1");
    auto trainer = Trainer::stage2(stage1, c.source_prompt, c.train, c.masks_dir() / "cache");
    trainer.run(std::nullopt, progress(ctx, "stage2", trainer.total_steps()));
    auto ck = trainer.checkpoint();
    save_checkpoint(ck, c.stage2_path());
    save_word_bundle(ck, c);
    write_stage_log(c.log_path(), "stage2", trainer.state());
    if (ck.masks) export_masks(*ck.masks, c.masks_dir());
    ctx.log.event("saved", {{"path", c.stage2_path().string()}, {"masks", ck.masks.has_value()}});
    return kOk;
}

int cmd_extract_masks(Context& ctx) {
    auto& c = ctx.config;
    c.validate();
    auto ck = load_checkpoint(c.stage2_path(), "stage2");
    torch::NoGradGuard no_grad;
    auto& backbone = *ck.kit.backbone;
    auto cond = training_conditionings(ck);
    const auto model_hash = savekit::hash_tensor(cond, hash_parameters(backbone));
    MaskCache cache(c.masks_dir() / "cache");
    auto masks = masks_from_video(backbone, backbone.config(), ck.kit.schedule, ck.latent, cond, ck.config.mask, &cache,
                                  model_hash);
    export_masks(masks, c.masks_dir());
    ctx.log.event("masks", {{"dir", c.masks_dir().string()},
                            {"cache", cache.writes() == 0 ? "hit" : "miss"},
                            {"key", mask_cache_key(ck.latent, ck.config.mask, model_hash)}});
    return kOk;
}

int cmd_reconstruct(Context& ctx) {
    auto& c = ctx.config;
    // Identical conditioning for inversion and sampling unless overridden.
    if (!ctx.options.guidance) c.sampler.guidance_scale = 1.0;
    c.validate();
    auto ck = load_checkpoint(c.stage2_path(), "stage2");
    auto video = reconstruct(ck, c.sampler);
    auto source = load_source(c);
    const double score = psnr(video.frames, resize_frames(source.frames, video.height(), video.width()));
    const auto dir = c.run_dir / "reconstruction";
    write_video(dir, video, {{"prompt", ck.prompt}, {"seed", c.sampler.seed}, {"config", c.sampler.to_json()},
                             {"psnr", score}});
    ctx.log.event("reconstruct", {{"dir", dir.string()}, {"psnr", score}});
    return kOk;
}

int cmd_edit(Context& ctx) {
    auto& c = ctx.config;
    if (!ctx.options.prompt.empty()) c.edit_prompts = {ctx.options.prompt};
    c.validate();
    auto ck = load_checkpoint(c.stage2_path(), "stage2");
    auto source = load_source(c);
    for (std::size_t i = 0; i < c.edit_prompts.size(); ++i) {
        const auto& prompt = c.edit_prompts[i];
        auto video = edit_video(source, ck, prompt, c.sampler);
        const auto dir = c.run_dir / "edits" / slug(i, prompt);
        write_video(dir, video, {{"prompt", prompt}, {"seed", c.sampler.seed}, {"config", c.sampler.to_json()},
                                 {"source", c.source}});
        ctx.log.event("edit", {{"prompt", prompt}, {"dir", dir.string()}});
    }
    return kOk;
}

int cmd_eval(Context& ctx) {
    auto& c = ctx.config;
    const fs::path edits = ctx.options.edits_dir.empty() ? c.run_dir / "edits" : fs::path(ctx.options.edits_dir);
    c.validate();
    if (!fs::is_directory(edits)) throw DependencyError("edits directory '" + edits.string() + "' not found");
    auto ck = load_checkpoint(c.stage2_path(), "stage2");
    auto source = load_source(c);
    std::vector<fs::path> pairs;
    for (const auto& entry : fs::directory_iterator(edits))
        if (entry.is_directory() && fs::exists(entry.path() / "frame_0001.png")) pairs.push_back(entry.path());
    std::sort(pairs.begin(), pairs.end());
    if (pairs.empty()) throw DependencyError("no edited videos under '" + edits.string() + "'");

    const auto out_dir = c.run_dir / "eval";
    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "name,flow_similarity,frame_consistency,share_mot,share_pro\n";
    PixelEmbedder embedder;
    for (const auto& dir : pairs) {
        auto edited = ingest(dir, source.height(), source.width());
        auto report = evaluate_pair(ck, source, edited, embedder);
        auto j = report.to_json();
        j["name"] = dir.filename().string();
        write_file_atomic(out_dir / (dir.filename().string() + ".json"), j.dump(2) + "\n");
        const auto shares = report.shares_by_token();
        auto share = [&](const char* token) {
            auto it = shares.find(token);
            return it == shares.end() ? 0.0 : it->second;
        };
        csv << std::setprecision(10) << dir.filename().string() << "," << report.flow_similarity << ","
            << report.frame_consistency << "," << share(kMotionMarker) << "," << share(kProtagonistMarker) << "\n";
        ctx.log.event("eval", {{"name", dir.filename().string()},
                               {"flow_similarity", report.flow_similarity},
                               {"frame_consistency", report.frame_consistency}});
    }
    write_file_atomic(out_dir / "summary.csv", csv.str());
    ctx.out << csv.str();
    return kOk;
}

int cmd_inspect_attn(Context& ctx) {
    auto& c = ctx.config;
    c.validate();
    auto ck = load_checkpoint(c.stage2_path(), "stage2");
    torch::NoGradGuard no_grad;
    auto& kit = ck.kit;
    auto& backbone = *kit.backbone;
    const auto prompt_text = ctx.options.prompt.empty() ? ck.prompt : ctx.options.prompt;
    auto prompt = kit.tokenize(prompt_text);
    const auto n = ck.frames();
    torch::Tensor cond;
    if (prompt.protagonist_slot)
        cond = build_frame_conditionings(prompt, ck.motion ? &*ck.motion : nullptr, &*ck.protagonist, kit.encoder, n)
                   .embeddings;
    else if (prompt.motion_slot)
        cond = build_edit_conditionings(prompt, *ck.motion, kit.encoder, n).embeddings;
    else
        cond = build_frame_conditionings(prompt, nullptr, nullptr, kit.encoder, n).embeddings;

    const double fraction = ctx.options.t_fraction.value_or(ck.config.mask.t_probe_fractions.front());
    const auto t = probe_timesteps({fraction}, kit.schedule.steps()).front();
    auto noise = seeded_noise({1, ck.latent.size(1), ck.latent.size(2), ck.latent.size(3)}, ck.config.mask.noise_seed)
                     .expand_as(ck.latent);
    auto result = backbone.denoise(kit.schedule.add_noise(ck.latent, noise, t), t, cond, DenoiseOptions(true));
    const auto& record = *result.record;
    auto shares = token_attention_share(record, prompt, kit.vocab);

    json report = {{"prompt", prompt_text}, {"t", t}, {"shares", json::array()}};
    ctx.out << "t = " << t << "\n";
    for (const auto& s : shares) {
        report["shares"].push_back({{"position", s.position}, {"token", s.token}, {"share", s.share}});
        ctx.out << std::setw(3) << s.position << "  " << std::setw(8) << s.token << "  " << std::fixed
                << std::setprecision(4) << s.share << "\n";
    }
    write_file_atomic(c.run_dir / "attention.json", report.dump(2) + "\n");
    if (!ctx.options.dump_path.empty()) {
        TensorArchive archive;
        archive.metadata() = report;
        for (const auto& [layer, probs] : record.cross_attn) archive.add("cross." + layer, probs);
        for (const auto& [key, probs] : record.st_attn) {
            const auto& [layer, i, j] = key;
            archive.add("st." + layer + "." + std::to_string(i) + "." + std::to_string(j), probs);
        }
        archive.save(ctx.options.dump_path);
        ctx.log.event("dump", {{"path", ctx.options.dump_path}});
    }
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Motion-word training and editing on toy video diffusion", "savekit"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("-c,--config", o.config_path, "config file (default: <run dir>/config.toml)");
    app.add_option("--run-dir", o.run_dir, "run directory (SAVEKIT_RUN_DIR takes precedence)");
    app.add_flag("--json-logs", o.json_logs, "log events as JSON lines");
    app.add_option("--seed", o.seed, "override every seed");
    app.add_option("--steps", o.steps, "override the step count of the training subcommand");
    app.add_option("--lambda-attn", o.lambda_attn, "override the attention-loss weight");
    app.add_option("--guidance", o.guidance, "override the guidance scale");
    app.add_option("--ddim-steps", o.ddim_steps, "override the DDIM step count");

    using Command = int (*)(Context&);
    std::vector<std::pair<CLI::App*, Command>> commands;
    auto add = [&](const char* name, const char* help, Command fn) {
        auto* sub = app.add_subcommand(name, help);
        commands.emplace_back(sub, fn);
        return sub;
    };
    add("init", "write a default config", cmd_init)->add_flag("--force", o.force, "overwrite an existing config");
    add("pretrain", "train the toy text-to-image base model", cmd_pretrain);
    add("train-stage1", "register the protagonist word", cmd_train_stage1);
    add("train-stage2", "learn the motion word", cmd_train_stage2);
    add("extract-masks", "compute and export motion masks", cmd_extract_masks);
    add("reconstruct", "invert and resample the source video", cmd_reconstruct);
    add("edit", "render the edit prompts", cmd_edit)->add_option("--prompt", o.prompt, "single edit prompt");
    add("eval", "score edited videos against the source", cmd_eval)
        ->add_option("--edits", o.edits_dir, "directory of edited videos (default: <run dir>/edits)");
    auto* inspect = add("inspect-attn", "cross-attention share per prompt token", cmd_inspect_attn);
    inspect->add_option("--prompt", o.prompt, "prompt (default: the training prompt)");
    inspect->add_option("--t-fraction", o.t_fraction, "noise level as a fraction of T");
    inspect->add_option("--dump", o.dump_path, "write the attention record to this file");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    Logger log(err, o.json_logs);
    try {
        for (const auto& [sub, fn] : commands) {
            if (!sub->parsed()) continue;
            RunConfig config;
            if (std::string(sub->get_name()) == "init") {
                config.run_dir = default_run_dir(o);
            } else {
                config = resolve_config(o);
            }
            Context ctx{std::move(config), o, log, out};
            const auto start = std::chrono::steady_clock::now();
            const int code = fn(ctx);
            log.event("done", {{"command", sub->get_name()},
                               {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}});
            return code;
        }
    } catch (const ConfigError& e) {
        log.event("error", {{"kind", "config"}, {"message", e.what()}});
        return kInvalidConfig;
    } catch (const DependencyError& e) {
        log.event("error", {{"kind", "dependency"}, {"message", e.what()}});
        return kMissingDependency;
    } catch (const Error& e) {
        log.event("error", {{"kind", "module"}, {"message", e.what()}});
        return kModuleError;
    } catch (const std::exception& e) {
        log.event("error", {{"kind", "internal"}, {"message", e.what()}});
        return kFailure;
    }
    return kUsage;
}

}  // namespace savekit::cli
