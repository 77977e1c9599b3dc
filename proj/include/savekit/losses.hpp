#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/backbone.hpp"
#include "savekit/pseudo_flow.hpp"

namespace savekit {

/// Mean squared error over all elements.
torch::Tensor ldm_loss(const torch::Tensor& noise_pred, const torch::Tensor& noise_true);

inline constexpr double kAttentionNormEpsilon = 1e-8;

/// Per-frame motion-slot attention CA^i: head- and layer-mean of the slot
/// column, reshaped to the mask grid (nearest upsampling from the coarsest
/// listed layer), divided by its per-frame max + epsilon. [N, h, w].
torch::Tensor motion_slot_attention(const AttentionRecord& record, std::int64_t motion_slot,
                                    const std::vector<std::string>& layers, std::int64_t mask_height,
                                    std::int64_t mask_width, bool normalize = true);

/// (1/(N-1)) sum_{i>=2} mean_pixels (CA^i - M^i)^2. `masks` must cover
/// frames 2..N exactly (N-1 entries).
torch::Tensor cross_attention_loss(const AttentionRecord& record, std::int64_t motion_slot,
                                   const MotionMasks& masks, const std::vector<std::string>& layers);

/// The same reduction on precomputed per-frame maps [N, h, w] (frame 1 ignored).
torch::Tensor cross_attention_loss_from_maps(const torch::Tensor& slot_maps, const torch::Tensor& masks);

struct LossReport {
    double ldm = 0.0;
    double attn = 0.0;
    double total = 0.0;
    double lambda_attn = 0.0;

    nlohmann::json to_json() const;
    static LossReport from_json(const nlohmann::json& j);
};

/// total = ldm + lambda * attn on scalars; negative lambda raises ConfigError.
LossReport total_loss(double ldm, double attn, double lambda_attn);
/// Differentiable form of the same combination.
torch::Tensor total_loss(const torch::Tensor& ldm, const torch::Tensor& attn, double lambda_attn);

}  // namespace savekit
