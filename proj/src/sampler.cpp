#include "savekit/sampler.hpp"

#include <cmath>

#include "savekit/errors.hpp"
#include "savekit/trainer.hpp"

namespace savekit {

void SamplerConfig::validate(std::int64_t total_steps) const {
    std::vector<std::string> problems;
    if (ddim_steps < 1 || ddim_steps > total_steps)
        problems.push_back("ddim_steps must lie in [1, " + std::to_string(total_steps) + "]");
    if (!(guidance_scale >= 0.0)) problems.push_back("guidance_scale must be nonnegative");
    if (!(eta >= 0.0 && eta <= 1.0)) problems.push_back("eta must lie in [0, 1]");
    if (!problems.empty()) {
        std::string msg = "invalid sampler config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

nlohmann::json SamplerConfig::to_json() const {
    return {{"ddim_steps", ddim_steps}, {"guidance_scale", guidance_scale}, {"eta", eta},
            {"seed", seed},             {"invert_source", invert_source},   {"mask_blend", mask_blend}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
    SamplerConfig c;
    c.ddim_steps = j.value("ddim_steps", c.ddim_steps);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.eta = j.value("eta", c.eta);
    c.seed = j.value("seed", c.seed);
    c.invert_source = j.value("invert_source", c.invert_source);
    c.mask_blend = j.value("mask_blend", c.mask_blend);
    return c;
}

std::vector<std::int64_t> ddim_timesteps(std::int64_t steps, std::int64_t total_steps) {
    if (steps < 1 || steps > total_steps)
        throw ConfigError("ddim steps must lie in [1, " + std::to_string(total_steps) + "]");
    std::vector<std::int64_t> ts;
    for (std::int64_t k = 0; k < steps; ++k) ts.push_back(total_steps - (k * total_steps) / steps);
    return ts;
}

DdimStep ddim_step(const torch::Tensor& z_t, const torch::Tensor& noise_pred, std::int64_t t, std::int64_t t_prev,
                   const DiffusionSchedule& schedule, double eta, const torch::Tensor& noise) {
    if (!(t > t_prev && t_prev >= 0))
        throw ContractError("ddim_step requires t > t_prev >= 0 (got t=" + std::to_string(t) +
                            ", t_prev=" + std::to_string(t_prev) + ")");
    schedule.check_timestep(t);
    const double ab_t = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    auto pred_x0 = (z_t - std::sqrt(1.0 - ab_t) * noise_pred) / std::sqrt(ab_t);
    const double sigma =
        eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    auto sample = std::sqrt(ab_prev) * pred_x0 + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * noise_pred;
    if (sigma > 0.0) {
        if (!noise.defined()) throw ContractError("ddim_step with eta > 0 needs a noise tensor");
        sample = sample + sigma * noise;
    }
    return {sample, pred_x0};
}

torch::Tensor guided_noise(Denoiser& backbone, const torch::Tensor& z_t, std::int64_t t, const torch::Tensor& cond,
                           const torch::Tensor& uncond, double scale) {
    if (!(scale >= 0.0)) throw ConfigError("guidance scale must be nonnegative");
    if (scale == 1.0) return backbone.denoise(z_t, t, cond).noise_pred;
    auto u = backbone.denoise(z_t, t, uncond).noise_pred;
    if (scale == 0.0) return u;
    auto c = backbone.denoise(z_t, t, cond).noise_pred;
    return u + scale * (c - u);
}

Inversion ddim_invert(Denoiser& backbone, const torch::Tensor& z0, const torch::Tensor& cond, std::int64_t steps,
                      const DiffusionSchedule& schedule) {
    torch::NoGradGuard no_grad;
    auto ts = ddim_timesteps(steps, schedule.steps());
    Inversion out;
    auto z = z0.to(torch::kFloat64);
    out.trajectory.push_back(z);
    std::int64_t prev = 0;
    for (auto it = ts.rbegin(); it != ts.rend(); ++it) {
        const auto t = *it;
        auto eps = backbone.denoise(z, t, cond).noise_pred;
        const double ab_prev = schedule.alpha_bar(prev), ab_t = schedule.alpha_bar(t);
        auto x0 = (z - std::sqrt(1.0 - ab_prev) * eps) / std::sqrt(ab_prev);
        z = std::sqrt(ab_t) * x0 + std::sqrt(1.0 - ab_t) * eps;
        out.trajectory.push_back(z);
        prev = t;
    }
    out.latent = z;
    return out;
}

torch::Tensor ddim_sample(Denoiser& backbone, const torch::Tensor& z_T, const torch::Tensor& cond,
                          const torch::Tensor& uncond, const SamplerConfig& config, const DiffusionSchedule& schedule,
                          const SampleOptions& options) {
    torch::NoGradGuard no_grad;
    config.validate(schedule.steps());
    auto ts = ddim_timesteps(config.ddim_steps, schedule.steps());
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config.seed ^ 0x5eed5eedULL);
    const bool blend = options.blend_masks.defined() && options.source_trajectory != nullptr;
    if (blend && options.source_trajectory->size() != ts.size() + 1)
        throw ContractError("blend trajectory must come from an inversion with the same step count");
    torch::Tensor blend_weights;
    if (blend) blend_weights = options.blend_masks.to(torch::kFloat64).unsqueeze(1);

    auto z = z_T.to(torch::kFloat64);
    for (std::size_t k = 0; k < ts.size(); ++k) {
        const auto t = ts[k];
        const auto t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
        auto eps = guided_noise(backbone, z, t, cond, uncond, config.guidance_scale);
        torch::Tensor noise;
        if (config.eta > 0.0) noise = torch::randn(z.sizes(), gen, z.options());
        z = ddim_step(z, eps, t, t_prev, schedule, config.eta, noise).sample;
        if (blend) {
            // trajectory[m] holds the inverted latent at the m-th smallest timestep (0 = clean).
            const auto& source = (*options.source_trajectory)[ts.size() - 1 - k];
            z = blend_weights * z + (1.0 - blend_weights) * source;
        }
    }
    return z;
}

VideoFrames edit_video(const VideoFrames& source, const StageCheckpoint& checkpoint, const std::string& edit_prompt,
                       const SamplerConfig& config) {
    if (checkpoint.stage != "stage2" || !checkpoint.motion)
        throw DependencyError("editing needs a stage-2 checkpoint with a motion word");
    torch::NoGradGuard no_grad;
    const auto& kit = checkpoint.kit;
    auto& backbone = *const_cast<VideoUNet&>(kit.backbone);
    auto& encoder = const_cast<ToyTextEncoder&>(kit.encoder);
    const auto& bc = backbone.config();
    config.validate(kit.schedule.steps());

    auto z0 = frames_to_latent(source, bc.height, bc.width);
    const auto n = z0.size(0);
    auto edit = build_edit_conditionings(kit.tokenize(edit_prompt), *checkpoint.motion, encoder, n).embeddings;
    auto uncond = unconditional_conditionings(kit.vocab, encoder, n).embeddings;

    SampleOptions options;
    std::optional<Inversion> inverted;
    torch::Tensor start;
    if (config.invert_source) {
        inverted = ddim_invert(backbone, z0, training_conditionings(checkpoint, n), config.ddim_steps, kit.schedule);
        start = inverted->latent;
    } else {
        start = seeded_noise(z0.sizes().vec(), config.seed);
    }
    if (config.mask_blend) {
        if (!checkpoint.masks) throw DependencyError("mask blend needs motion masks in the checkpoint");
        if (!inverted)
            inverted = ddim_invert(backbone, z0, training_conditionings(checkpoint, n), config.ddim_steps,
                                   kit.schedule);
        auto masks = checkpoint.masks->masks.to(torch::kFloat64);
        if (masks.size(0) + 1 != n) throw ContractError("mask count does not match the source length");
        // Frame 1 has no mask of its own; it borrows frame 2's.
        masks = torch::cat({masks.narrow(0, 0, 1), masks}, 0);
        if (masks.size(1) != bc.height || masks.size(2) != bc.width)
            masks = torch::nn::functional::interpolate(
                        masks.unsqueeze(1),
                        torch::nn::functional::InterpolateFuncOptions()
                            .size(std::vector<std::int64_t>{bc.height, bc.width})
                            .mode(torch::kNearest))
                        .squeeze(1);
        options.blend_masks = masks;
        options.source_trajectory = &inverted->trajectory;
    }
    auto z = ddim_sample(backbone, start, edit, uncond, config, kit.schedule, options);
    return latent_to_frames(z, source.frames.size(2), source.frames.size(3));
}

torch::Tensor seeded_noise(const std::vector<std::int64_t>& shape, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::randn(shape, gen, torch::TensorOptions().dtype(torch::kFloat64));
}

}  // namespace savekit
