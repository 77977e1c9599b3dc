#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/backbone.hpp"
#include "savekit/pseudo_flow.hpp"
#include "savekit/text.hpp"
#include "savekit/video.hpp"

namespace savekit {

struct StageCheckpoint;

inline constexpr double kFlowNormEpsilon = 1e-12;
/// Noise level (fraction of T) at which evaluation probes flows of clean videos.
inline constexpr double kFlowProbeFraction = 0.1;

/// Mean over frames of the cosine between flattened flow fields
/// [F, h, w, 2]. A frame where either field is (near) zero scores 0.
double flow_similarity(const torch::Tensor& flow_a, const torch::Tensor& flow_b);
double flow_similarity(const DisplacementField& a, const DisplacementField& b);

/// Maps a frame [3, H, W] to a unit-norm vector.
class FrameEmbedder {
public:
    virtual ~FrameEmbedder() = default;
    virtual torch::Tensor embed(const torch::Tensor& frame) = 0;
};

/// Area-downsampled pixels, flattened and normalized.
class PixelEmbedder : public FrameEmbedder {
public:
    explicit PixelEmbedder(std::int64_t size = 8) : size_(size) {}
    torch::Tensor embed(const torch::Tensor& frame) override;

private:
    std::int64_t size_;
};

/// Mean cosine over consecutive frame pairs. N < 2 raises ContractError.
double frame_consistency(const VideoFrames& video, FrameEmbedder& embedder);

struct TokenShare {
    std::int64_t position = 0;
    std::string token;
    double share = 0.0;
};

/// Cross-attention mass per non-padding prompt position (including <bos> and
/// <eos>), summed over layers, frames, heads and pixels, normalized to 1.
std::vector<TokenShare> token_attention_share(const AttentionRecord& record, const TokenizedPrompt& prompt,
                                              const Vocabulary& vocab);

struct MetricReport {
    double flow_similarity = 0.0;
    double frame_consistency = 0.0;
    std::vector<TokenShare> token_shares;

    /// Shares summed per distinct token.
    std::map<std::string, double> shares_by_token() const;
    nlohmann::json to_json() const;
};

/// Pseudo flow of a clean latent video as seen by `backbone`.
DisplacementField video_flow(Denoiser& backbone, const BackboneConfig& backbone_config,
                             const DiffusionSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& cond,
                             const MaskConfig& config);

/// Flow similarity (source vs edit, both probed under the empty prompt at
/// `flow_probe_fraction` of T), frame consistency of the edit, and token
/// shares of the training prompt on the source.
MetricReport evaluate_pair(const StageCheckpoint& checkpoint, const VideoFrames& source, const VideoFrames& edited,
                           FrameEmbedder& embedder, double flow_probe_fraction = kFlowProbeFraction);

}  // namespace savekit
