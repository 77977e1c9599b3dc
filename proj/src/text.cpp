#include "savekit/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>

#include "savekit/errors.hpp"

namespace savekit {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (const char* required : {"<pad>", "<bos>", "<eos>", kMotionMarker, kProtagonistMarker})
        if (std::find(words_.begin(), words_.end(), required) == words_.end())
            throw ConfigError(std::string("vocabulary lacks required token ") + required);
}

Vocabulary Vocabulary::toy() {
    return Vocabulary({"<pad>", "<bos>", "<eos>", "<pro>", "<mot>", "a", "photo", "of", "on", "the",
                       "red", "green", "blue", "yellow", "white", "gray", "black", "square", "circle",
                       "triangle", "object", "moving", "sliding", "jumping", "left", "right", "up", "down",
                       "in", "garden"});
}

bool Vocabulary::contains(const std::string& word) const {
    return std::find(words_.begin(), words_.end(), word) != words_.end();
}

std::int64_t Vocabulary::id(const std::string& word) const {
    auto it = std::find(words_.begin(), words_.end(), word);
    if (it == words_.end()) throw PromptError("word '" + word + "' is not in the vocabulary");
    return static_cast<std::int64_t>(it - words_.begin());
}

TokenizedPrompt tokenize(const std::string& text, const Vocabulary& vocab, std::int64_t max_len) {
    TokenizedPrompt prompt;
    prompt.text = text;
    prompt.ids.push_back(vocab.bos());
    std::istringstream in(text);
    std::string raw;
    while (in >> raw) {
        std::string word;
        if (raw == "\xE2\x9F\xA8mot\xE2\x9F\xA9" || raw == kMotionMarker) {
            word = kMotionMarker;
        } else if (raw == "\xE2\x9F\xA8pro\xE2\x9F\xA9" || raw == kProtagonistMarker) {
            word = kProtagonistMarker;
        } else {
            for (char c : raw) word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
        const auto index = static_cast<std::int64_t>(prompt.ids.size());
        if (word == kMotionMarker) {
            if (prompt.motion_slot) throw PromptError("prompt has more than one motion slot: '" + text + "'");
            prompt.motion_slot = index;
        } else if (word == kProtagonistMarker) {
            if (prompt.protagonist_slot) throw PromptError("prompt has more than one protagonist slot: '" + text + "'");
            prompt.protagonist_slot = index;
        }
        prompt.ids.push_back(vocab.id(word));
    }
    prompt.ids.push_back(vocab.eos());
    if (static_cast<std::int64_t>(prompt.ids.size()) > max_len)
        throw PromptError("prompt '" + text + "' exceeds " + std::to_string(max_len) + " tokens");
    prompt.ids.resize(static_cast<std::size_t>(max_len), vocab.pad());
    return prompt;
}

ToyTextEncoderImpl::ToyTextEncoderImpl(TextEncoderConfig config, std::int64_t vocab_size) : config_(config) {
    const auto d = config_.dim;
    token_table_ = register_parameter("token_table", torch::zeros({vocab_size, d}, torch::kFloat64), false);
    positions_ = register_parameter("positions", torch::zeros({config_.max_len, d}, torch::kFloat64), false);
    for (std::int64_t l = 0; l < config_.layers; ++l) {
        const auto s = std::to_string(l);
        norms1_.push_back(register_module("norm1_" + s, torch::nn::LayerNorm(torch::nn::LayerNormOptions({d}))));
        attns_.push_back(register_module("attn_" + s, Attention(d, d, config_.heads)));
        norms2_.push_back(register_module("norm2_" + s, torch::nn::LayerNorm(torch::nn::LayerNormOptions({d}))));
        ff_in_.push_back(register_module("ff_in_" + s, torch::nn::Linear(d, 2 * d)));
        ff_out_.push_back(register_module("ff_out_" + s, torch::nn::Linear(2 * d, d)));
    }
    final_norm_ = register_module("final_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    to(torch::kFloat64);

    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.seed);
    token_table_.normal_(0.0, 1.0, gen);
    positions_.normal_(0.0, 0.1, gen);
    for (auto& item : named_modules("", /*include_self=*/false)) {
        if (auto linear = std::dynamic_pointer_cast<torch::nn::LinearImpl>(item.value())) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(linear->weight.size(1)));
            linear->weight.uniform_(-bound, bound, gen);
            if (linear->bias.defined()) linear->bias.uniform_(-bound, bound, gen);
        }
    }
    for (auto& p : parameters()) p.set_requires_grad(false);
}

torch::Tensor ToyTextEncoderImpl::embed_tokens(const TokenizedPrompt& prompt) const {
    if (prompt.length() != config_.max_len)
        throw ContractError("text encoder expects prompts padded to " + std::to_string(config_.max_len));
    return token_table_.index_select(0, torch::tensor(prompt.ids, torch::kInt64));
}

torch::Tensor ToyTextEncoderImpl::token_embedding(std::int64_t id) const { return token_table_[id]; }

torch::Tensor ToyTextEncoderImpl::encode(const torch::Tensor& inputs) {
    if (inputs.dim() != 3 || inputs.size(1) != config_.max_len || inputs.size(2) != config_.dim)
        throw ContractError("text encoder input must be [B, " + std::to_string(config_.max_len) + ", " +
                            std::to_string(config_.dim) + "]");
    auto x = inputs + positions_.unsqueeze(0);
    for (std::size_t l = 0; l < attns_.size(); ++l) {
        auto h = norms1_[l](x);
        x = x + attns_[l]->forward(h, h).first;
        x = x + ff_out_[l](torch::gelu(ff_in_[l](norms2_[l](x))));
    }
    return final_norm_(x);
}

}  // namespace savekit
