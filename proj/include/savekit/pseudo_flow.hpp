#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/backbone.hpp"
#include "savekit/schedule.hpp"

namespace savekit {

enum class KeyFramePolicy { FirstOnly, FirstAndPreceding };
enum class DistanceCombiner { Max, Mean };

std::string to_string(KeyFramePolicy policy);
KeyFramePolicy key_frame_policy_from_string(const std::string& text);

/// Aggregated spatio-temporal maps for frames 2..N (zero-based 1..N-1).
///
/// maps[i-1][j] is [(h*w) x (h*w)]: the head- and block-mean attention of
/// frame i over key frame j, rows renormalized. With FirstOnly there is one
/// entry per frame (j = 0); with FirstAndPreceding frames i >= 2 also carry
/// j = i-1.
struct AggregatedAttention {
    std::int64_t height = 0, width = 0;
    std::vector<std::vector<std::pair<std::int64_t, torch::Tensor>>> maps;

    std::int64_t frames() const { return static_cast<std::int64_t>(maps.size()) + 1; }
};

AggregatedAttention aggregate_attention(const AttentionRecord& record, const std::vector<std::string>& blocks,
                                        std::int64_t frames, KeyFramePolicy policy = KeyFramePolicy::FirstOnly);

/// Per-pixel argmax correspondence into the key frame and its displacement.
///   argmax_locs: int64 [(N-1), h, w, 2] as (row, col)
///   distances:   f64   [(N-1), h, w]
struct DisplacementField {
    torch::Tensor argmax_locs;
    torch::Tensor distances;
    bool normalized = true;

    std::int64_t frames() const { return distances.size(0) + 1; }
    /// Flow vectors (argmax - query) as f64 [(N-1), h, w, 2].
    torch::Tensor vectors() const;
};

/// Argmax ties go to the lowest flattened key index. With several key frames
/// per query frame, distances combine by `combiner` and argmax_locs refer to
/// the first-frame correspondence.
DisplacementField compute_pseudo_flow(const AggregatedAttention& attention, bool normalize = true,
                                      DistanceCombiner combiner = DistanceCombiner::Max);

struct MaskConfig {
    double quantile = 0.75;
    double floor = 0.05;  // in the units of the displacement field
    std::int64_t smooth_radius = 0;
    KeyFramePolicy key_frame_policy = KeyFramePolicy::FirstOnly;
    DistanceCombiner combiner = DistanceCombiner::Max;
    bool normalize = true;
    std::vector<double> t_probe_fractions{0.5};
    std::uint64_t noise_seed = 1234;

    void validate() const;
    nlohmann::json to_json() const;
    static MaskConfig from_json(const nlohmann::json& j);
};

/// Motion masks M^2..M^N: [(N-1), h, w] in [0, 1].
struct MotionMasks {
    torch::Tensor masks;
    double quantile = 0.75;
    double floor = 0.05;
    std::int64_t smooth_radius = 0;

    std::int64_t frames() const { return masks.size(0) + 1; }
    nlohmann::json metadata() const;
};

/// A pixel is moving iff its distance >= max(per-frame quantile, floor).
/// A frame whose distances are all equal yields an empty mask.
MotionMasks extract_motion_masks(const DisplacementField& field, double quantile, double floor,
                                 std::int64_t smooth_radius = 0);

/// Timesteps used to probe attention, from fractions of T (rounded, clamped to [1, T]).
std::vector<std::int64_t> probe_timesteps(const std::vector<double>& fractions, std::int64_t total_steps);

/// Attention of the whole pipeline on a clean latent video: noise to each probe
/// timestep with shared seeded noise, record, and average aggregated maps.
AggregatedAttention probe_attention(Denoiser& backbone, const BackboneConfig& backbone_config,
                                    const DiffusionSchedule& schedule, const torch::Tensor& z0,
                                    const torch::Tensor& cond, const MaskConfig& config);

/// On-disk cache for masks, keyed by a caller-supplied key string.
class MaskCache {
public:
    explicit MaskCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::optional<MotionMasks> lookup(const std::string& key) const;
    void store(const std::string& key, const MotionMasks& masks);
    std::filesystem::path path_for(const std::string& key) const;
    std::int64_t writes() const { return writes_; }

private:
    std::filesystem::path dir_;
    std::int64_t writes_ = 0;
};

/// Full mask pipeline with caching. `cache` may be null.
MotionMasks masks_from_video(Denoiser& backbone, const BackboneConfig& backbone_config,
                             const DiffusionSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& cond,
                             const MaskConfig& config, MaskCache* cache, std::uint64_t model_hash = 0);

/// Cache key covering the video bytes, the mask config and the model state.
std::string mask_cache_key(const torch::Tensor& z0, const MaskConfig& config, std::uint64_t model_hash);

/// mask_%04d.png (frames 2..N, 0 static / 255 moving) plus masks.json.
void export_masks(const MotionMasks& masks, const std::filesystem::path& dir);

void save_masks(const MotionMasks& masks, const std::filesystem::path& path);
MotionMasks load_masks(const std::filesystem::path& path);

}  // namespace savekit
