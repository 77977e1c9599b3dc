#include "savekit/trainer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "savekit/errors.hpp"

namespace savekit {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::int64_t step) {
    return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ static_cast<std::uint64_t>(step));
}

std::vector<std::int64_t> to_vector(const torch::Tensor& t) {
    auto c = t.to(torch::kInt64).contiguous();
    return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

std::string save_optimizer(const torch::optim::Optimizer& optimizer) {
    torch::serialize::OutputArchive archive;
    optimizer.save(archive);
    std::ostringstream out;
    archive.save_to(out);
    return out.str();
}

void load_optimizer(torch::optim::Optimizer& optimizer, const std::string& blob) {
    if (blob.empty()) return;
    torch::serialize::InputArchive archive;
    std::istringstream in(blob);
    archive.load_from(in);
    optimizer.load(archive);
}

bool matches_any(const std::string& name, const std::vector<std::string>& patterns) {
    const auto dotted = "." + name;
    for (const auto& p : patterns)
        if (dotted.find(p) != std::string::npos) return true;
    return false;
}

void set_lr(torch::optim::Optimizer& optimizer, double lr) {
    for (auto& group : optimizer.param_groups())
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

}  // namespace

// ---------------------------------------------------------------------------
// Toy base model

nlohmann::json PretrainConfig::to_json() const {
    return {{"steps", steps},         {"batch", batch},           {"lr", lr},
            {"caption_dropout", caption_dropout}, {"image_size", image_size}, {"seed", seed},
            {"backbone", backbone.to_json()}};
}

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
    PretrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.caption_dropout = j.value("caption_dropout", c.caption_dropout);
    c.image_size = j.value("image_size", c.image_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("backbone")) {
        auto merged = c.backbone.to_json();
        merged.merge_patch(j.at("backbone"));
        c.backbone = BackboneConfig::from_json(merged);
    }
    return c;
}

void PretrainConfig::validate() const {
    std::vector<std::string> problems;
    if (steps < 1) problems.push_back("pretrain steps must be positive");
    if (batch < 1) problems.push_back("pretrain batch must be positive");
    if (!(lr > 0.0)) problems.push_back("pretrain lr must be positive");
    if (!(caption_dropout >= 0.0 && caption_dropout <= 1.0)) problems.push_back("caption_dropout must lie in [0, 1]");
    if (image_size < backbone.height) problems.push_back("image_size must be at least the latent height");
    if (backbone.temporal) problems.push_back("the base model is an image model (backbone.temporal = false)");
    try {
        backbone.validate();
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    }
    if (!problems.empty()) {
        std::string msg = "invalid pretrain config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

CaptionedImage sample_captioned_shape(std::mt19937_64& rng, std::int64_t size, double caption_dropout) {
    static const std::vector<std::string> foregrounds{"red", "green", "blue", "yellow", "white"};
    static const std::vector<std::string> backgrounds{"gray", "black", "white"};
    static const std::vector<std::string> motions{"moving", "sliding", "jumping"};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto pick = [&](const std::vector<std::string>& v) { return v[rng() % v.size()]; };

    ShapeSpec spec;
    spec.shape = static_cast<Shape>(rng() % 3);
    spec.background = pick(backgrounds);
    do spec.color = pick(foregrounds);
    while (spec.color == spec.background);
    const double min_size = 0.25 * static_cast<double>(size), max_size = 0.5 * static_cast<double>(size);
    spec.size = min_size + (max_size - min_size) * u(rng);
    spec.row = (static_cast<double>(size) - spec.size) * u(rng);
    spec.col = (static_cast<double>(size) - spec.size) * u(rng);

    CaptionedImage out{render_shape(spec, size, size), ""};
    if (u(rng) < caption_dropout) return out;
    std::string caption = u(rng) < 0.5 ? "a photo of a" : "a";
    if (u(rng) < 0.9) caption += " " + spec.color;
    caption += " " + (u(rng) < 0.15 ? std::string("object") : to_string(spec.shape));
    if (u(rng) < 0.3) caption += " " + pick(motions);
    if (u(rng) < 0.8) caption += " on " + spec.background;
    out.caption = caption;
    return out;
}

ModelKit pretrain_base_model(const PretrainConfig& config, const std::function<void(std::int64_t, double)>& on_step) {
    config.validate();
    auto backbone_config = config.backbone;
    backbone_config.temporal = false;
    auto kit = ModelKit::create(backbone_config, config.text);
    auto& backbone = kit.backbone;
    const auto& bc = backbone->config();

    torch::optim::AdamW optimizer(backbone->parameters(), torch::optim::AdamWOptions(config.lr).weight_decay(1e-4));
    for (std::int64_t step = 0; step < config.steps; ++step) {
        std::mt19937_64 rng(mix_seed(config.seed, 0, step));
        auto gen = step_generator(config.seed, 1, step);
        std::vector<torch::Tensor> images, tokens;
        for (std::int64_t b = 0; b < config.batch; ++b) {
            auto sample = sample_captioned_shape(rng, config.image_size, config.caption_dropout);
            images.push_back(sample.image);
            tokens.push_back(kit.encoder->embed_tokens(kit.tokenize(sample.caption)));
        }
        torch::Tensor cond;
        {
            torch::NoGradGuard no_grad;
            cond = kit.encoder->encode(torch::stack(tokens));
        }
        auto z0 = frames_to_latent(VideoFrames{torch::stack(images)}, bc.height, bc.width);
        auto ts = to_vector(torch::randint(1, kit.schedule.steps() + 1, {config.batch}, gen));
        auto noise = torch::randn(z0.sizes(), gen, z0.options());
        auto z_t = kit.schedule.add_noise(z0, noise, ts);

        // Cosine decay to a tenth of the base rate.
        const double progress = static_cast<double>(step) / static_cast<double>(config.steps);
        set_lr(optimizer, config.lr * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress))));

        auto pred = backbone->denoise(z_t, ts, cond, {false, FrameMode::Image}).noise_pred;
        auto loss = ldm_loss(pred, noise);
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
        if (on_step) on_step(step, loss.item<double>());
    }
    for (auto& p : backbone->parameters()) p.set_requires_grad(false);
    return kit;
}

// ---------------------------------------------------------------------------
// Configuration and state

void TrainConfig::validate() const {
    std::vector<std::string> problems;
    if (stage1_steps < 1) problems.push_back("stage1_steps must be positive");
    if (stage2_steps < 1) problems.push_back("stage2_steps must be positive");
    if (stage1_batch < 1) problems.push_back("stage1_batch must be positive");
    if (!(lr_words > 0.0)) problems.push_back("lr_words must be positive");
    if (!(lr_backbone > 0.0)) problems.push_back("lr_backbone must be positive");
    if (!(weight_decay >= 0.0)) problems.push_back("weight_decay must be nonnegative");
    if (!(lambda_attn >= 0.0)) problems.push_back("lambda_attn must be nonnegative");
    if (mask_warmup_steps < 0 || mask_warmup_steps >= stage2_steps)
        problems.push_back("mask_warmup_steps must lie in [0, stage2_steps)");
    try {
        mask.validate();
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    }
    if (!problems.empty()) {
        std::string msg = "invalid training config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

nlohmann::json TrainConfig::to_json() const {
    return {{"stage1_steps", stage1_steps},
            {"stage2_steps", stage2_steps},
            {"stage1_batch", stage1_batch},
            {"lr_words", lr_words},
            {"lr_backbone", lr_backbone},
            {"weight_decay", weight_decay},
            {"lambda_attn", lambda_attn},
            {"mask_warmup_steps", mask_warmup_steps},
            {"seed", seed},
            {"mask", mask.to_json()},
            {"motion", motion.to_json()},
            {"trainable_layers", trainable_layers},
            {"protagonist_init", protagonist_init},
            {"motion_init", motion_init}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
    c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
    c.stage1_batch = j.value("stage1_batch", c.stage1_batch);
    c.lr_words = j.value("lr_words", c.lr_words);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lambda_attn = j.value("lambda_attn", c.lambda_attn);
    c.mask_warmup_steps = j.value("mask_warmup_steps", c.mask_warmup_steps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("mask")) c.mask = MaskConfig::from_json(j.at("mask"));
    if (j.contains("motion")) c.motion = MotionWordConfig::from_json(j.at("motion"));
    c.trainable_layers = j.value("trainable_layers", c.trainable_layers);
    c.protagonist_init = j.value("protagonist_init", c.protagonist_init);
    c.motion_init = j.value("motion_init", c.motion_init);
    return c;
}

double TrainState::window_mean(const std::string& field, std::size_t begin, std::size_t count) const {
    if (count == 0 || begin + count > log.size())
        throw ContractError("loss window [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                            ") outside a log of " + std::to_string(log.size()));
    double sum = 0.0;
    for (std::size_t i = begin; i < begin + count; ++i) {
        const auto& r = log[i];
        if (field == "ldm") sum += r.ldm;
        else if (field == "attn") sum += r.attn;
        else if (field == "total") sum += r.total;
        else throw ContractError("unknown loss field '" + field + "'");
    }
    return sum / static_cast<double>(count);
}

nlohmann::json TrainState::to_json() const {
    auto entries = nlohmann::json::array();
    for (const auto& r : log) entries.push_back(r.to_json());
    return {{"step", step}, {"log", entries}};
}

TrainState TrainState::from_json(const nlohmann::json& j) {
    TrainState s;
    s.step = j.at("step");
    for (const auto& r : j.at("log")) s.log.push_back(LossReport::from_json(r));
    return s;
}

torch::Generator step_generator(std::uint64_t seed, std::uint64_t stream, std::int64_t step) {
    return at::make_generator<at::CPUGeneratorImpl>(mix_seed(seed, stream, step));
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const StageCheckpoint& ck, const std::filesystem::path& path) {
    TensorArchive archive;
    auto& meta = archive.metadata();
    meta["kind"] = ck.stage;
    meta["prompt"] = ck.prompt;
    meta["frame_height"] = ck.frame_height;
    meta["frame_width"] = ck.frame_width;
    meta["train_config"] = ck.config.to_json();
    meta["state"] = ck.state.to_json();
    add_kit(archive, ck.kit);
    archive.add("latent", ck.latent);
    if (ck.protagonist) archive.add("protagonist.v_pro", (*ck.protagonist)->v_pro);
    if (ck.motion) {
        meta["motion"] = (*ck.motion)->config().to_json();
        for (auto& [name, p] : named_parameter_list(**ck.motion)) archive.add("motion." + name, p);
    }
    if (ck.masks) {
        meta["masks"] = ck.masks->metadata();
        archive.add("masks", ck.masks->masks);
    }
    const auto& blob = ck.optimizer_state;
    archive.add("optimizer",
                torch::from_blob(const_cast<char*>(blob.data()), {static_cast<std::int64_t>(blob.size())}, torch::kUInt8));
    archive.save(path);
}

StageCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_stage) {
    if (!std::filesystem::exists(path))
        throw DependencyError(expected_stage + " checkpoint '" + path.string() + "' not found");
    auto archive = TensorArchive::load(path, kCheckpointVersion);
    const auto& meta = archive.metadata();
    const std::string kind = meta.value("kind", "");
    if (kind != expected_stage)
        throw FormatError("'" + path.string() + "' holds a '" + kind + "' checkpoint, expected " + expected_stage);

    StageCheckpoint ck{kind, read_kit(archive)};
    ck.latent = archive.at("latent").clone();
    ck.frame_height = meta.at("frame_height");
    ck.frame_width = meta.at("frame_width");
    ck.prompt = meta.at("prompt");
    ck.config = TrainConfig::from_json(meta.at("train_config"));
    ck.state = TrainState::from_json(meta.at("state"));
    if (archive.contains("protagonist.v_pro")) ck.protagonist = ProtagonistEmbedding(archive.at("protagonist.v_pro"));
    if (meta.contains("motion")) {
        const auto dim = ck.kit.encoder->config().dim;
        MotionWord motion(torch::zeros({dim}, torch::kFloat64), MotionWordConfig::from_json(meta.at("motion")));
        load_parameters(*motion, archive, "motion.");
        ck.motion = motion;
    }
    if (archive.contains("masks")) {
        MotionMasks masks;
        masks.masks = archive.at("masks").clone();
        const auto& m = meta.at("masks");
        masks.quantile = m.value("quantile", masks.quantile);
        masks.floor = m.value("floor", masks.floor);
        masks.smooth_radius = m.value("smooth_radius", masks.smooth_radius);
        ck.masks = masks;
    }
    const auto& blob = archive.at("optimizer");
    ck.optimizer_state.assign(reinterpret_cast<const char*>(blob.data_ptr<std::uint8_t>()),
                              static_cast<std::size_t>(blob.numel()));
    return ck;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(StageCheckpoint checkpoint, std::optional<std::filesystem::path> mask_cache_dir)
    : ck_(std::move(checkpoint)) {
    if (mask_cache_dir) cache_.emplace(*mask_cache_dir);
    configure();
}

Trainer Trainer::stage1(const ModelKit& base, const VideoFrames& video, const std::string& prompt,
                        const TrainConfig& config) {
    config.validate();
    StageCheckpoint ck{"stage1", base.clone()};
    const auto& bc = ck.kit.backbone->config();
    ck.latent = frames_to_latent(video, bc.height, bc.width);
    ck.frame_height = video.frames.size(2);
    ck.frame_width = video.frames.size(3);
    ck.prompt = prompt;
    ck.config = config;
    auto tokens = ck.kit.tokenize(prompt);
    if (!tokens.protagonist_slot) throw PromptError("stage-1 prompt '" + prompt + "' lacks a <pro> slot");
    if (tokens.motion_slot) throw PromptError("stage-1 prompt '" + prompt + "' must not carry a <mot> slot");
    ck.protagonist = ProtagonistEmbedding(ck.kit.encoder->token_embedding(ck.kit.vocab.id(config.protagonist_init)));
    return Trainer(std::move(ck), std::nullopt);
}

Trainer Trainer::stage2(const StageCheckpoint& stage1, const std::string& prompt, const TrainConfig& config,
                        std::optional<std::filesystem::path> mask_cache_dir) {
    config.validate();
    if (stage1.stage != "stage1" || !stage1.protagonist)
        throw DependencyError("stage 2 needs a stage-1 checkpoint with a protagonist word");
    StageCheckpoint ck{"stage2", stage1.kit.clone()};
    if (!ck.kit.backbone->config().temporal) ck.kit.backbone = inflate_from_image_model(ck.kit.backbone);
    ck.latent = stage1.latent.clone();
    ck.frame_height = stage1.frame_height;
    ck.frame_width = stage1.frame_width;
    ck.prompt = prompt;
    ck.config = config;
    auto tokens = ck.kit.tokenize(prompt);
    if (!tokens.motion_slot) throw PromptError("stage-2 prompt '" + prompt + "' lacks a <mot> slot");
    if (!tokens.protagonist_slot) throw PromptError("stage-2 prompt '" + prompt + "' lacks a <pro> slot");
    ck.protagonist = ProtagonistEmbedding((*stage1.protagonist)->v_pro);
    ck.motion = MotionWord(ck.kit.encoder->token_embedding(ck.kit.vocab.id(config.motion_init)), config.motion);
    return Trainer(std::move(ck), std::move(mask_cache_dir));
}

Trainer Trainer::resume(StageCheckpoint checkpoint, std::optional<std::filesystem::path> mask_cache_dir) {
    checkpoint.config.validate();
    return Trainer(std::move(checkpoint), std::move(mask_cache_dir));
}

std::vector<std::pair<std::string, torch::Tensor>> Trainer::trainable_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    if (ck_.stage == "stage1") {
        out.emplace_back("v_pro", (*ck_.protagonist)->v_pro);
        return out;
    }
    for (auto& [name, p] : named_parameter_list(**ck_.motion)) out.emplace_back("motion." + name, p);
    for (auto& [name, p] : named_parameter_list(*ck_.kit.backbone))
        if (matches_any(name, ck_.config.trainable_layers)) out.emplace_back("backbone." + name, p);
    return out;
}

void Trainer::configure() {
    prompt_ = ck_.kit.tokenize(ck_.prompt);
    for (auto& p : ck_.kit.backbone->parameters()) p.set_requires_grad(false);
    for (auto& p : ck_.kit.encoder->parameters()) p.set_requires_grad(false);
    if (ck_.protagonist) (*ck_.protagonist)->v_pro.set_requires_grad(false);
    if (ck_.motion)
        for (auto& p : (*ck_.motion)->parameters()) p.set_requires_grad(false);

    std::vector<torch::Tensor> words, layers;
    for (auto& [name, p] : trainable_parameters()) {
        p.set_requires_grad(true);
        (name.rfind("backbone.", 0) == 0 ? layers : words).push_back(p);
    }
    std::vector<torch::optim::OptimizerParamGroup> groups;
    auto options = [&](double lr) {
        return std::make_unique<torch::optim::AdamWOptions>(
            torch::optim::AdamWOptions(lr).weight_decay(ck_.config.weight_decay));
    };
    groups.emplace_back(words, options(ck_.config.lr_words));
    if (!layers.empty()) groups.emplace_back(layers, options(ck_.config.lr_backbone));
    optimizer_ = std::make_unique<torch::optim::AdamW>(std::move(groups),
                                                       torch::optim::AdamWOptions(ck_.config.lr_words));
    load_optimizer(*optimizer_, ck_.optimizer_state);
}

std::int64_t Trainer::total_steps() const {
    return ck_.stage == "stage1" ? ck_.config.stage1_steps : ck_.config.stage2_steps;
}

LossReport Trainer::step() {
    auto report = ck_.stage == "stage1" ? step_stage1() : step_stage2();
    ck_.state.log.push_back(report);
    ++ck_.state.step;
    return report;
}

void Trainer::run(std::optional<std::int64_t> until, const std::function<void(const TrainState&)>& on_step) {
    const auto target = until.value_or(total_steps());
    while (ck_.state.step < target) {
        step();
        if (on_step) on_step(ck_.state);
    }
}

StageCheckpoint Trainer::checkpoint() const {
    StageCheckpoint out = ck_;
    out.optimizer_state = save_optimizer(*optimizer_);
    return out;
}

void Trainer::set_masks(MotionMasks masks) {
    if (masks.masks.size(0) != ck_.frames() - 1)
        throw ContractError("expected " + std::to_string(ck_.frames() - 1) + " motion masks, got " +
                            std::to_string(masks.masks.size(0)));
    ck_.masks = std::move(masks);
}

LossReport Trainer::step_stage1() {
    auto& kit = ck_.kit;
    const auto batch = ck_.config.stage1_batch;
    auto gen = step_generator(ck_.config.seed, 1, ck_.state.step);
    auto frames = torch::randint(0, ck_.frames(), {batch}, gen);
    auto ts = to_vector(torch::randint(1, kit.schedule.steps() + 1, {batch}, gen));
    auto z0 = ck_.latent.index_select(0, frames);
    auto noise = torch::randn(z0.sizes(), gen, z0.options());
    auto z_t = kit.schedule.add_noise(z0, noise, ts);

    auto cond = build_frame_conditionings(prompt_, nullptr, &*ck_.protagonist, kit.encoder, 1).embeddings;
    auto pred = kit.backbone->denoise(z_t, ts, cond.expand({batch, -1, -1}), {false, FrameMode::Image}).noise_pred;
    auto loss = ldm_loss(pred, noise);
    optimizer_->zero_grad();
    loss.backward();
    optimizer_->step();
    return total_loss(loss.item<double>(), 0.0, 0.0);
}

void Trainer::ensure_masks() {
    if (ck_.masks || ck_.config.lambda_attn == 0.0 || ck_.state.step < ck_.config.mask_warmup_steps) return;
    torch::NoGradGuard no_grad;
    auto& kit = ck_.kit;
    auto cond = build_frame_conditionings(prompt_, &*ck_.motion, &*ck_.protagonist, kit.encoder, ck_.frames())
                    .embeddings;
    const auto model_hash = savekit::hash_tensor(cond, hash_parameters(*kit.backbone));
    ck_.masks = masks_from_video(*kit.backbone, kit.backbone->config(), kit.schedule, ck_.latent, cond,
                                 ck_.config.mask, cache_ ? &*cache_ : nullptr, model_hash);
    ++mask_extractions_;
}

LossReport Trainer::step_stage2() {
    ensure_masks();
    auto& kit = ck_.kit;
    const double lambda = ck_.config.lambda_attn;
    const bool use_attn = lambda > 0.0 && ck_.masks.has_value();
    auto gen = step_generator(ck_.config.seed, 2, ck_.state.step);
    const auto t = torch::randint(1, kit.schedule.steps() + 1, {1}, gen).item<std::int64_t>();
    auto noise = torch::randn(ck_.latent.sizes(), gen, ck_.latent.options());
    auto z_t = kit.schedule.add_noise(ck_.latent, noise, t);

    auto cond = build_frame_conditionings(prompt_, &*ck_.motion, &*ck_.protagonist, kit.encoder, ck_.frames())
                    .embeddings;
    DenoiseOptions options{use_attn, FrameMode::Video};
    options.record_spatio_temporal = false;
    auto result = kit.backbone->denoise(z_t, t, cond, options);
    auto ldm = ldm_loss(result.noise_pred, noise);
    torch::Tensor total = ldm;
    double attn_value = 0.0;
    if (use_attn) {
        auto attn = cross_attention_loss(*result.record, *prompt_.motion_slot, *ck_.masks,
                                         kit.backbone->config().mask_blocks);
        total = total_loss(ldm, attn, lambda);
        attn_value = attn.item<double>();
    }
    optimizer_->zero_grad();
    total.backward();
    optimizer_->step();
    return total_loss(ldm.item<double>(), attn_value, use_attn ? lambda : 0.0);
}

StageCheckpoint train_stage1(const ModelKit& base, const VideoFrames& video, const std::string& prompt,
                             const TrainConfig& config) {
    auto trainer = Trainer::stage1(base, video, prompt, config);
    trainer.run();
    return trainer.checkpoint();
}

StageCheckpoint train_stage2(const StageCheckpoint& stage1, const std::string& prompt, const TrainConfig& config,
                             std::optional<std::filesystem::path> mask_cache_dir) {
    auto trainer = Trainer::stage2(stage1, prompt, config, std::move(mask_cache_dir));
    trainer.run();
    return trainer.checkpoint();
}

// ---------------------------------------------------------------------------
// Reconstruction

torch::Tensor training_conditionings(const StageCheckpoint& ck, std::int64_t frames) {
    auto prompt = ck.kit.tokenize(ck.prompt);
    auto& encoder = const_cast<ToyTextEncoder&>(ck.kit.encoder);
    const MotionWord* motion = ck.motion ? &*ck.motion : nullptr;
    const ProtagonistEmbedding* protagonist = ck.protagonist ? &*ck.protagonist : nullptr;
    return build_frame_conditionings(prompt, motion, protagonist, encoder, frames < 1 ? ck.frames() : frames)
        .embeddings;
}

VideoFrames reconstruct(const StageCheckpoint& ck, const SamplerConfig& config) {
    if (ck.stage != "stage2") throw DependencyError("reconstruct needs a stage-2 checkpoint");
    torch::NoGradGuard no_grad;
    auto& backbone = *const_cast<VideoUNet&>(ck.kit.backbone);
    auto& encoder = const_cast<ToyTextEncoder&>(ck.kit.encoder);
    auto cond = training_conditionings(ck);
    auto uncond = unconditional_conditionings(ck.kit.vocab, encoder, ck.frames()).embeddings;
    auto inverted = ddim_invert(backbone, ck.latent, cond, config.ddim_steps, ck.kit.schedule);
    auto z0 = ddim_sample(backbone, inverted.latent, cond, uncond, config, ck.kit.schedule);
    return latent_to_frames(z0, ck.frame_height, ck.frame_width);
}

}  // namespace savekit
