#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "savekit/backbone.hpp"

namespace savekit {

inline constexpr const char* kMotionMarker = "<mot>";
inline constexpr const char* kProtagonistMarker = "<pro>";

/// Closed word list of the toy text encoder. Slot markers are ordinary tokens
/// whose input embedding is replaced before encoding.
class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> words);
    static Vocabulary toy();

    std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
    std::int64_t id(const std::string& word) const;
    bool contains(const std::string& word) const;
    const std::string& word(std::int64_t id) const { return words_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& words() const { return words_; }

    std::int64_t pad() const { return id("<pad>"); }
    std::int64_t bos() const { return id("<bos>"); }
    std::int64_t eos() const { return id("<eos>"); }

private:
    std::vector<std::string> words_;
};

struct TokenizedPrompt {
    std::string text;
    std::vector<std::int64_t> ids;  // <bos> words <eos> <pad>...
    std::optional<std::int64_t> motion_slot;
    std::optional<std::int64_t> protagonist_slot;

    std::int64_t length() const { return static_cast<std::int64_t>(ids.size()); }
};

/// Lower-cases, splits on whitespace, and maps "⟨mot⟩"/"<mot>" and
/// "⟨pro⟩"/"<pro>" to slot markers. Unknown words and over-long prompts raise
/// PromptError.
TokenizedPrompt tokenize(const std::string& text, const Vocabulary& vocab, std::int64_t max_len);

struct TextEncoderConfig {
    std::int64_t dim = 64;
    std::int64_t max_len = 12;
    std::int64_t layers = 2;
    std::int64_t heads = 4;
    std::uint64_t seed = 7;
};

/// Frozen, seeded, randomly initialized bidirectional self-attention encoder.
class ToyTextEncoderImpl : public torch::nn::Module {
public:
    ToyTextEncoderImpl(TextEncoderConfig config, std::int64_t vocab_size);

    /// Input token embeddings [L, d] for a prompt (before any slot replacement).
    torch::Tensor embed_tokens(const TokenizedPrompt& prompt) const;
    /// Row of the embedding table for one token id.
    torch::Tensor token_embedding(std::int64_t id) const;
    /// inputs: [B, L, d] token embeddings -> contextual embeddings [B, L, d].
    torch::Tensor encode(const torch::Tensor& inputs);

    const TextEncoderConfig& config() const { return config_; }

private:
    TextEncoderConfig config_;
    torch::Tensor token_table_, positions_;
    std::vector<torch::nn::LayerNorm> norms1_, norms2_;
    std::vector<Attention> attns_;
    std::vector<torch::nn::Linear> ff_in_, ff_out_;
    torch::nn::LayerNorm final_norm_{nullptr};
};
TORCH_MODULE(ToyTextEncoder);

}  // namespace savekit
