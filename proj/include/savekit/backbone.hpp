#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/schedule.hpp"

namespace savekit {

/// How the leading axis of a latent is interpreted.
///   Video: frames of one clip; spatio-temporal and temporal attention are live.
///   Image: independent images; spatio-temporal attention degenerates to
///          per-image self-attention and temporal attention is skipped.
enum class FrameMode { Video, Image };

struct BackboneConfig {
    std::int64_t channels = 3;
    std::int64_t height = 8;
    std::int64_t width = 8;
    std::vector<std::int64_t> level_widths{32, 64};
    std::int64_t heads = 4;
    std::int64_t text_dim = 64;
    std::int64_t time_dim = 128;
    std::int64_t norm_groups = 8;
    std::int64_t ff_mult = 2;
    std::int64_t num_timesteps = 1000;
    bool temporal = true;
    // Decoder-side transformer blocks whose spatio-temporal maps feed the motion masks.
    std::vector<std::string> mask_blocks{"up1"};
    // Spatio-temporal attention logits: "cosine" (shared query/key projection,
    // unit-norm heads, learned per-head temperature) or "dot" (scaled dot product).
    std::string st_similarity = "cosine";
    std::uint64_t seed = 0;

    void validate() const;
    std::vector<std::string> layer_ids() const;
    std::vector<std::string> decoder_layer_ids() const;
    /// Latent grid (h, w) seen by the transformer block `layer_id`.
    std::pair<std::int64_t, std::int64_t> grid_of(const std::string& layer_id) const;

    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
};

/// Attention maps captured during one denoise call. Frame indices are zero-based.
///
/// st_attn[(layer, i, j)] is [heads, h*w, h*w]: the attention of frame i's
/// pixels over key frame j, renormalized within that key frame so every row
/// is a distribution. cross_attn[layer] is [N, heads, h*w, L] and stays on
/// the autograd graph so losses can differentiate through it.
struct AttentionRecord {
    std::map<std::tuple<std::string, std::int64_t, std::int64_t>, torch::Tensor> st_attn;
    std::map<std::string, torch::Tensor> cross_attn;
    std::map<std::string, std::pair<std::int64_t, std::int64_t>> grids;

    bool has_st(const std::string& layer, std::int64_t i, std::int64_t j) const;
    const torch::Tensor& st(const std::string& layer, std::int64_t i, std::int64_t j) const;
    /// [heads, h*w, L] for one frame.
    torch::Tensor cross(const std::string& layer, std::int64_t frame) const;
};

struct DenoiseOptions {
    DenoiseOptions(bool record = false, FrameMode frame_mode = FrameMode::Video)
        : record_attention(record), mode(frame_mode) {}

    bool record_attention = false;
    FrameMode mode = FrameMode::Video;
    // With record_attention, also keep the spatio-temporal maps of these blocks
    // (default: the configured mask blocks).
    bool record_spatio_temporal = true;
    std::optional<std::vector<std::string>> st_layers;
};

struct DenoiseResult {
    torch::Tensor noise_pred;
    std::optional<AttentionRecord> record;
};

/// Anything that predicts noise for a latent video. The toy UNet below is the
/// shipped implementation; adapters to larger pretrained models plug in here.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    /// z_t: [N, c, h, w]; cond: [N, L, d]; one timestep per frame.
    virtual DenoiseResult denoise(const torch::Tensor& z_t, const std::vector<std::int64_t>& timesteps,
                                  const torch::Tensor& cond, const DenoiseOptions& options) = 0;

    DenoiseResult denoise(const torch::Tensor& z_t, std::int64_t t, const torch::Tensor& cond,
                          const DenoiseOptions& options = {}) {
        return denoise(z_t, std::vector<std::int64_t>(static_cast<std::size_t>(z_t.size(0)), t), cond, options);
    }
};

// Records attention into a per-call AttentionRecord; never shared between calls.
struct AttentionRecorder {
    AttentionRecord* record = nullptr;
    const std::vector<std::string>* st_layers = nullptr;

    bool wants_st(const std::string& layer) const;
};

inline constexpr double kInitialTemperature = 8.0;

/// Multi-head attention with separate query and context widths.
///
/// In cosine mode keys reuse the query projection (no to_k), both are unit
/// normalized per head, and logits are exp(log_temperature[h]) * cos.
class AttentionImpl : public torch::nn::Module {
public:
    AttentionImpl(std::int64_t query_dim, std::int64_t context_dim, std::int64_t heads, bool cosine = false);

    /// q_in: [B, Tq, Cq]; context: [B, Tk, Ck]. Returns output [B, Tq, Cq] and
    /// the probabilities [B, heads, Tq, Tk].
    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& q_in, const torch::Tensor& context);

    /// Per-head queries (already carrying the logit scale) and keys, so that
    /// logits = q k^T. Shapes [B, heads, T, C/heads].
    std::pair<torch::Tensor, torch::Tensor> queries_keys(const torch::Tensor& q_in, const torch::Tensor& context);
    bool cosine() const { return cosine_; }

    /// Project keys/values once and reuse for several query groups.
    torch::Tensor split_heads(const torch::Tensor& x) const;
    torch::Tensor merge_heads(const torch::Tensor& x) const;

    std::int64_t heads() const { return heads_; }

    torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
    torch::Tensor log_temperature;  // cosine mode only, [heads]

private:
    std::int64_t heads_;
    double scale_;
    bool cosine_;
};
TORCH_MODULE(Attention);

/// Per-pixel self-attention along the frame axis. Pixels never exchange
/// information with other pixels.
class TemporalAttentionImpl : public torch::nn::Module {
public:
    TemporalAttentionImpl(std::int64_t dim, std::int64_t heads);

    /// x: [N, C, H, W] -> [N, C, H, W] (attention output only, no residual).
    torch::Tensor forward(const torch::Tensor& x);

    Attention attn{nullptr};
};
TORCH_MODULE(TemporalAttention);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
    torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Spatio-temporal attention, cross attention, feed-forward and (when
/// inflated) temporal attention, each with a pre-norm residual.
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(std::string layer_id, std::int64_t dim, std::int64_t text_dim, std::int64_t heads,
                         std::int64_t ff_mult, bool temporal, bool cosine_st = false);

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond, FrameMode mode,
                          const AttentionRecorder& recorder);

    const std::string& layer_id() const { return layer_id_; }

    torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr}, norm_t{nullptr};
    Attention st_attn{nullptr}, cross_attn{nullptr};
    torch::nn::Linear ff_in{nullptr}, ff_out{nullptr};
    TemporalAttention t_attn{nullptr};

private:
    torch::Tensor spatio_temporal(const torch::Tensor& tokens, FrameMode mode, const AttentionRecorder& recorder,
                                  std::int64_t grid_h, std::int64_t grid_w);

    std::string layer_id_;
    bool temporal_;
};
TORCH_MODULE(TransformerBlock);

/// Sinusoidal timestep features [cos | sin], one row per timestep.
torch::Tensor timestep_features(const std::vector<std::int64_t>& timesteps, std::int64_t dim, torch::Dtype dtype);

/// Two-level (configurable) inflated UNet denoiser in pixel space.
class VideoUNetImpl : public torch::nn::Module, public Denoiser {
public:
    explicit VideoUNetImpl(BackboneConfig config);

    using Denoiser::denoise;
    DenoiseResult denoise(const torch::Tensor& z_t, const std::vector<std::int64_t>& timesteps,
                          const torch::Tensor& cond, const DenoiseOptions& options) override;

    const BackboneConfig& config() const { return config_; }

    /// Deterministic re-initialization from `seed`. Temporal output projections
    /// start at zero so an inflated model reproduces its image model.
    void reset_parameters(std::uint64_t seed);

    std::vector<TransformerBlock> transformer_blocks() const;
    TransformerBlock block(const std::string& layer_id) const;

private:
    BackboneConfig config_;
    torch::nn::Linear time_in{nullptr}, time_out{nullptr};
    torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
    torch::nn::GroupNorm norm_out{nullptr};
    torch::nn::ModuleList down_res, down_tf, downsamplers, up_res, up_tf, upsamplers;
    ResBlock mid{nullptr};
};
TORCH_MODULE(VideoUNet);

/// Ordered (name, tensor) view of a module's parameters.
std::vector<std::pair<std::string, torch::Tensor>> named_parameter_list(const torch::nn::Module& module);

/// Copies the spatial parameters of an image model into a freshly built video
/// model with temporal layers added at identity (zero output projection).
VideoUNet inflate_from_image_model(const VideoUNet& image_model);
VideoUNet inflate_from_image_model(const BackboneConfig& image_config,
                                   const std::vector<std::pair<std::string, torch::Tensor>>& image_params);

/// True for parameters that belong to temporal layers added by inflation.
bool is_temporal_parameter(const std::string& name);

/// Save / load a backbone (config in metadata, parameters as entries).
void save_backbone(const VideoUNet& model, const std::string& path, const nlohmann::json& extra = {});
VideoUNet load_backbone(const std::string& path);
std::uint64_t hash_parameters(const torch::nn::Module& module);

}  // namespace savekit
