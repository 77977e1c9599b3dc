#include "savekit/losses.hpp"

#include <algorithm>

#include "savekit/errors.hpp"

namespace savekit {

torch::Tensor ldm_loss(const torch::Tensor& noise_pred, const torch::Tensor& noise_true) {
    if (noise_pred.sizes() != noise_true.sizes())
        throw ContractError("ldm_loss: shape " + c10::str(noise_pred.sizes()) + " vs " +
                            c10::str(noise_true.sizes()));
    return (noise_pred - noise_true).pow(2).mean();
}

torch::Tensor motion_slot_attention(const AttentionRecord& record, std::int64_t motion_slot,
                                    const std::vector<std::string>& layers, std::int64_t mask_height,
                                    std::int64_t mask_width, bool normalize) {
    if (layers.empty()) throw ContractError("cross-attention loss needs at least one layer");
    // Only the coarsest listed resolution contributes.
    std::int64_t coarsest = -1;
    for (const auto& layer : layers) {
        auto it = record.grids.find(layer);
        if (it == record.grids.end() || !record.cross_attn.count(layer))
            throw AggregationError("record has no cross-attention for layer '" + layer + "'");
        const auto cells = it->second.first * it->second.second;
        coarsest = coarsest < 0 ? cells : std::min(coarsest, cells);
    }
    torch::Tensor sum;
    std::int64_t count = 0, grid_h = 0, grid_w = 0;
    for (const auto& layer : layers) {
        const auto [h, w] = record.grids.at(layer);
        if (h * w != coarsest) continue;
        const auto& probs = record.cross_attn.at(layer);  // [N, heads, hw, L]
        if (motion_slot < 0 || motion_slot >= probs.size(3))
            throw ContractError("motion slot " + std::to_string(motion_slot) + " outside [0, " +
                                std::to_string(probs.size(3)) + ")");
        auto column = probs.select(3, motion_slot).mean(1);  // [N, hw]
        sum = sum.defined() ? sum + column : column;
        ++count;
        grid_h = h;
        grid_w = w;
    }
    auto maps = (sum / static_cast<double>(count)).view({-1, grid_h, grid_w});
    if (grid_h != mask_height || grid_w != mask_width) {
        if (mask_height % grid_h != 0 || mask_width % grid_w != 0)
            throw ContractError("cross-attention grid does not divide the mask grid");
        maps = maps.repeat_interleave(mask_height / grid_h, 1).repeat_interleave(mask_width / grid_w, 2);
    }
    if (normalize) {
        auto peak = std::get<0>(maps.flatten(1).max(1)).view({-1, 1, 1});
        maps = maps / (peak + kAttentionNormEpsilon);
    }
    return maps;
}

torch::Tensor cross_attention_loss_from_maps(const torch::Tensor& slot_maps, const torch::Tensor& masks) {
    const auto frames = slot_maps.size(0);
    if (masks.size(0) != frames - 1)
        throw ContractError("motion masks must cover frames 2..N: expected " + std::to_string(frames - 1) +
                            " masks, got " + std::to_string(masks.size(0)));
    if (slot_maps.size(1) != masks.size(1) || slot_maps.size(2) != masks.size(2))
        throw ContractError("cross-attention map and mask grids differ");
    auto diff = slot_maps.narrow(0, 1, frames - 1) - masks.to(slot_maps.scalar_type());
    return diff.pow(2).mean({1, 2}).sum() / static_cast<double>(frames - 1);
}

torch::Tensor cross_attention_loss(const AttentionRecord& record, std::int64_t motion_slot,
                                   const MotionMasks& masks, const std::vector<std::string>& layers) {
    auto maps = motion_slot_attention(record, motion_slot, layers, masks.masks.size(1), masks.masks.size(2));
    return cross_attention_loss_from_maps(maps, masks.masks);
}

nlohmann::json LossReport::to_json() const {
    return {{"ldm", ldm}, {"attn", attn}, {"total", total}, {"lambda_attn", lambda_attn}};
}

LossReport LossReport::from_json(const nlohmann::json& j) {
    return {j.at("ldm"), j.at("attn"), j.at("total"), j.at("lambda_attn")};
}

LossReport total_loss(double ldm, double attn, double lambda_attn) {
    if (!(lambda_attn >= 0.0)) throw ConfigError("lambda_attn must be nonnegative");
    return {ldm, attn, ldm + lambda_attn * attn, lambda_attn};
}

torch::Tensor total_loss(const torch::Tensor& ldm, const torch::Tensor& attn, double lambda_attn) {
    if (!(lambda_attn >= 0.0)) throw ConfigError("lambda_attn must be nonnegative");
    return ldm + lambda_attn * attn;
}

}  // namespace savekit
