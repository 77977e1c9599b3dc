#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/text.hpp"

namespace savekit {

/// Interleaved [sin, cos] features of a frame index:
///   out[2m] = sin(i / base^(2m/dim)), out[2m+1] = cos(i / base^(2m/dim)).
/// `dim` must be even (ConfigError otherwise).
torch::Tensor positional_encode(std::int64_t index, std::int64_t dim, double base = 10000.0);

struct MotionWordConfig {
    std::int64_t gamma_dim = 64;
    double gamma_base = 10000.0;
    bool two_layer = false;     // Linear -> GELU -> Linear instead of one affine map
    double init_noise = 1e-4;   // std of the perturbation around identity on the v_b block
    std::uint64_t seed = 11;

    nlohmann::json to_json() const;
    static MotionWordConfig from_json(const nlohmann::json& j);
};

/// The temporally expanded motion word: per frame i,
///   v_mot(i) = W_mot (v_b ++ gamma(i))
/// with i the zero-based frame index. The parameter count does not depend on
/// the number of frames.
class MotionWordImpl : public torch::nn::Module {
public:
    /// v_b is initialized from `base_embedding`; W_mot starts at [I + noise | 0].
    MotionWordImpl(const torch::Tensor& base_embedding, MotionWordConfig config = {});

    torch::Tensor expand(std::int64_t frame) const;
    /// [frames, d], row i == expand(i).
    torch::Tensor expand_all(std::int64_t frames) const;

    std::int64_t dim() const { return v_b.size(0); }
    std::int64_t parameter_count() const;
    const MotionWordConfig& config() const { return config_; }

    /// Zeroes every weight column that reads the positional block, making
    /// the embedding frame-independent. Only valid for the single-layer map.
    void zero_gamma_block();

    torch::Tensor v_b;
    torch::nn::Linear w_mot{nullptr};
    torch::nn::Linear w_mot_out{nullptr};  // second layer of the two-layer variant

private:
    MotionWordConfig config_;
};
TORCH_MODULE(MotionWord);

class ProtagonistEmbeddingImpl : public torch::nn::Module {
public:
    explicit ProtagonistEmbeddingImpl(const torch::Tensor& init);
    torch::Tensor v_pro;
};
TORCH_MODULE(ProtagonistEmbedding);

/// Per-frame text conditionings [N, L, d].
struct FrameConditionings {
    torch::Tensor embeddings;

    std::int64_t frames() const { return embeddings.size(0); }
};

/// For every frame, swaps the slot inputs (motion slot -> v_mot(i), protagonist
/// slot -> v_pro) into the prompt's token embeddings and encodes. Supplying a
/// pseudo-word whose slot is absent raises PromptError.
FrameConditionings build_frame_conditionings(const TokenizedPrompt& prompt, const MotionWord* motion,
                                             const ProtagonistEmbedding* protagonist, ToyTextEncoder& encoder,
                                             std::int64_t frames);

/// Per-frame encoder inputs (before encoding) used by build_frame_conditionings.
torch::Tensor frame_token_inputs(const TokenizedPrompt& prompt, const MotionWord* motion,
                                 const ProtagonistEmbedding* protagonist, const ToyTextEncoder& encoder,
                                 std::int64_t frames);

/// Conditionings for an edit prompt: the learned motion word, new protagonist
/// in plain text. The prompt must carry a motion slot.
FrameConditionings build_edit_conditionings(const TokenizedPrompt& edit_prompt, const MotionWord& motion,
                                            ToyTextEncoder& encoder, std::int64_t frames);

/// Unconditional (empty-prompt) conditionings. Frame-constant by default;
/// with `motion` given, the empty prompt carries a lone motion slot and so
/// varies per frame.
FrameConditionings unconditional_conditionings(const Vocabulary& vocab, ToyTextEncoder& encoder,
                                               std::int64_t frames, const MotionWord* motion = nullptr);

/// Pseudo-word bundle ("savekit-words-v1"): v_b, W_mot, v_pro, gamma config
/// and prompt templates.
struct WordBundle {
    std::optional<MotionWord> motion;
    std::optional<ProtagonistEmbedding> protagonist;
    nlohmann::json prompts = nlohmann::json::object();
};
void save_words(const WordBundle& bundle, const std::string& path);
WordBundle load_words(const std::string& path);

}  // namespace savekit
