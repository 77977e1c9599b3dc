#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/backbone.hpp"
#include "savekit/schedule.hpp"
#include "savekit/video.hpp"

namespace savekit {

struct SamplerConfig {
    std::int64_t ddim_steps = 50;
    double guidance_scale = 7.5;
    double eta = 0.0;
    std::uint64_t seed = 0;
    bool invert_source = true;
    // Post-hoc latent blend with the inverted source outside the motion masks.
    bool mask_blend = false;

    void validate(std::int64_t total_steps) const;
    nlohmann::json to_json() const;
    static SamplerConfig from_json(const nlohmann::json& j);
};

/// Strictly decreasing timesteps T - floor(k T / steps), k = 0..steps-1.
std::vector<std::int64_t> ddim_timesteps(std::int64_t steps, std::int64_t total_steps);

struct DdimStep {
    torch::Tensor sample;     // z at t_prev
    torch::Tensor pred_x0;
};

/// One DDIM update from t to t_prev (t_prev == 0 lands on the clean sample).
/// `noise` is only read when eta > 0.
DdimStep ddim_step(const torch::Tensor& z_t, const torch::Tensor& noise_pred, std::int64_t t, std::int64_t t_prev,
                   const DiffusionSchedule& schedule, double eta = 0.0, const torch::Tensor& noise = {});

/// uncond + scale * (cond - uncond). Scales 0 and 1 evaluate only the
/// unconditional or conditional branch.
torch::Tensor guided_noise(Denoiser& backbone, const torch::Tensor& z_t, std::int64_t t, const torch::Tensor& cond,
                           const torch::Tensor& uncond, double scale);

struct Inversion {
    torch::Tensor latent;                  // estimate of z_T at the first sampling timestep
    std::vector<torch::Tensor> trajectory; // z at 0, then each timestep in increasing order
};

/// Deterministic reverse DDIM recursion from a clean latent, conditioned on `cond`.
Inversion ddim_invert(Denoiser& backbone, const torch::Tensor& z0, const torch::Tensor& cond, std::int64_t steps,
                      const DiffusionSchedule& schedule);

struct SampleOptions {
    // Optional blend: masks [N, h, w] in latent grid; outside them the latent
    // follows `source_trajectory` (from ddim_invert).
    torch::Tensor blend_masks;
    const std::vector<torch::Tensor>* source_trajectory = nullptr;
};

/// DDIM sampling from z_T with classifier-free guidance.
torch::Tensor ddim_sample(Denoiser& backbone, const torch::Tensor& z_T, const torch::Tensor& cond,
                          const torch::Tensor& uncond, const SamplerConfig& config, const DiffusionSchedule& schedule,
                          const SampleOptions& options = {});

struct StageCheckpoint;

/// Edits a source video with a stage-2 checkpoint: the start latent is the
/// DDIM inversion of the source under the training conditionings (or seeded
/// noise), then the edit prompt's conditionings drive guided sampling.
/// The edit prompt must carry <mot>; frames come back in [0, 1].
VideoFrames edit_video(const VideoFrames& source, const StageCheckpoint& checkpoint, const std::string& edit_prompt,
                       const SamplerConfig& config);

/// Seeded standard-normal start latent of the given shape.
torch::Tensor seeded_noise(const std::vector<std::int64_t>& shape, std::uint64_t seed);

}  // namespace savekit
