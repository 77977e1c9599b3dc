#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/losses.hpp"
#include "savekit/model.hpp"
#include "savekit/motion_embedding.hpp"
#include "savekit/pseudo_flow.hpp"
#include "savekit/sampler.hpp"
#include "savekit/video.hpp"

namespace savekit {

// ---------------------------------------------------------------------------
// Toy base model

struct PretrainConfig {
    std::int64_t steps = 1500;
    std::int64_t batch = 16;
    double lr = 1e-3;
    double caption_dropout = 0.1;
    std::int64_t image_size = 32;
    std::uint64_t seed = 0;
    BackboneConfig backbone = [] {
        BackboneConfig c;
        c.temporal = false;
        return c;
    }();
    TextEncoderConfig text;

    void validate() const;
    nlohmann::json to_json() const;
    static PretrainConfig from_json(const nlohmann::json& j);
};

struct CaptionedImage {
    torch::Tensor image;  // [3, H, W] in [0, 1]
    std::string caption;
};

/// One random shape on a plain background with a matching caption
/// ("a photo of a red square on gray", "a blue object", ...). The caption is
/// empty with probability `caption_dropout`.
CaptionedImage sample_captioned_shape(std::mt19937_64& rng, std::int64_t size, double caption_dropout);

/// Trains a text-to-image toy denoiser (image mode, no temporal layers) on
/// synthetic captioned shapes. `on_step(step, loss)` is optional.
ModelKit pretrain_base_model(const PretrainConfig& config,
                             const std::function<void(std::int64_t, double)>& on_step = {});

// ---------------------------------------------------------------------------
// Two-stage training

struct TrainConfig {
    std::int64_t stage1_steps = 250;
    std::int64_t stage2_steps = 250;
    std::int64_t stage1_batch = 4;
    double lr_words = 1e-3;
    double lr_backbone = 1e-4;
    double weight_decay = 1e-2;
    double lambda_attn = 0.1;
    std::int64_t mask_warmup_steps = 50;
    std::uint64_t seed = 0;
    MaskConfig mask;
    MotionWordConfig motion;
    // Backbone parameters trained in stage 2: names containing any of these.
    std::vector<std::string> trainable_layers{".t_attn.", ".norm_t.", ".st_attn.to_q."};
    std::string protagonist_init = "object";
    std::string motion_init = "moving";

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Progress of one stage. Randomness is counter-based (derived from seed and
/// step), so the step counter is the whole RNG state.
struct TrainState {
    std::int64_t step = 0;
    std::vector<LossReport> log;

    /// Mean of `field` ("ldm", "attn", "total") over log[begin, begin + count).
    double window_mean(const std::string& field, std::size_t begin, std::size_t count) const;
    nlohmann::json to_json() const;
    static TrainState from_json(const nlohmann::json& j);
};

/// A stage-1 or stage-2 checkpoint: model, learned words, source video latent,
/// masks, optimizer moments and training state.
struct StageCheckpoint {
    StageCheckpoint(std::string stage_name, ModelKit model) : stage(std::move(stage_name)), kit(std::move(model)) {}

    std::string stage;  // "stage1" | "stage2"
    ModelKit kit;
    torch::Tensor latent;  // [N, c, h, w]
    std::int64_t frame_height = 0;
    std::int64_t frame_width = 0;
    std::string prompt;
    std::optional<ProtagonistEmbedding> protagonist;
    std::optional<MotionWord> motion;
    std::optional<MotionMasks> masks;
    TrainConfig config;
    TrainState state;
    std::string optimizer_state;

    std::int64_t frames() const { return latent.size(0); }
};

void save_checkpoint(const StageCheckpoint& checkpoint, const std::filesystem::path& path);
/// DependencyError if the file is missing, FormatError if it holds another stage.
StageCheckpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_stage);

/// Per-step generator, a pure function of (seed, stream, step).
torch::Generator step_generator(std::uint64_t seed, std::uint64_t stream, std::int64_t step);

class Trainer {
public:
    /// Stage 1 on frames-as-images; only v_pro trains. The prompt needs a <pro> slot.
    static Trainer stage1(const ModelKit& base, const VideoFrames& video, const std::string& prompt,
                          const TrainConfig& config);
    /// Stage 2 on the inflated backbone; W_mot, v_b and the configured layers train.
    /// The prompt needs <pro> and <mot> slots.
    static Trainer stage2(const StageCheckpoint& stage1, const std::string& prompt, const TrainConfig& config,
                          std::optional<std::filesystem::path> mask_cache_dir = std::nullopt);
    static Trainer resume(StageCheckpoint checkpoint,
                          std::optional<std::filesystem::path> mask_cache_dir = std::nullopt);

    LossReport step();
    /// Steps until `until` (default: the stage's configured step count).
    void run(std::optional<std::int64_t> until = std::nullopt,
             const std::function<void(const TrainState&)>& on_step = {});

    std::int64_t total_steps() const;
    const TrainState& state() const { return ck_.state; }
    const StageCheckpoint& current() const { return ck_; }
    /// Snapshot including optimizer moments.
    StageCheckpoint checkpoint() const;

    /// Supplies masks up front (skips extraction).
    void set_masks(MotionMasks masks);
    std::int64_t mask_extractions() const { return mask_extractions_; }
    std::int64_t mask_cache_writes() const { return cache_ ? cache_->writes() : 0; }

    /// Trainable tensors of the current stage, in optimizer order.
    std::vector<std::pair<std::string, torch::Tensor>> trainable_parameters() const;

private:
    explicit Trainer(StageCheckpoint checkpoint, std::optional<std::filesystem::path> mask_cache_dir);
    void configure();
    LossReport step_stage1();
    LossReport step_stage2();
    void ensure_masks();

    StageCheckpoint ck_;
    TokenizedPrompt prompt_;
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    std::optional<MaskCache> cache_;
    std::int64_t mask_extractions_ = 0;
};

StageCheckpoint train_stage1(const ModelKit& base, const VideoFrames& video, const std::string& prompt,
                             const TrainConfig& config);
StageCheckpoint train_stage2(const StageCheckpoint& stage1, const std::string& prompt, const TrainConfig& config,
                             std::optional<std::filesystem::path> mask_cache_dir = std::nullopt);

/// Training conditionings of a checkpoint: [frames, L, d] (frames < 1: the source length).
torch::Tensor training_conditionings(const StageCheckpoint& checkpoint, std::int64_t frames = 0);

/// Inverts the source latent under the training conditionings and samples it
/// back; frames at the source resolution.
VideoFrames reconstruct(const StageCheckpoint& checkpoint, const SamplerConfig& config);

}  // namespace savekit
