#include "savekit/motion_embedding.hpp"

#include <cmath>

#include "savekit/archive.hpp"
#include "savekit/errors.hpp"

namespace savekit {

torch::Tensor positional_encode(std::int64_t index, std::int64_t dim, double base) {
    if (dim <= 0 || dim % 2 != 0) throw ConfigError("positional encoding dimension must be even and positive");
    if (index < 0) throw ContractError("positional encoding index must be nonnegative");
    auto out = torch::empty({dim}, torch::kFloat64);
    auto acc = out.accessor<double, 1>();
    for (std::int64_t m = 0; m < dim / 2; ++m) {
        const double angle = static_cast<double>(index) / std::pow(base, 2.0 * static_cast<double>(m) / dim);
        acc[2 * m] = std::sin(angle);
        acc[2 * m + 1] = std::cos(angle);
    }
    return out;
}

nlohmann::json MotionWordConfig::to_json() const {
    return {{"gamma_dim", gamma_dim}, {"gamma_base", gamma_base}, {"two_layer", two_layer},
            {"init_noise", init_noise}, {"seed", seed}};
}

MotionWordConfig MotionWordConfig::from_json(const nlohmann::json& j) {
    MotionWordConfig c;
    c.gamma_dim = j.value("gamma_dim", c.gamma_dim);
    c.gamma_base = j.value("gamma_base", c.gamma_base);
    c.two_layer = j.value("two_layer", c.two_layer);
    c.init_noise = j.value("init_noise", c.init_noise);
    c.seed = j.value("seed", c.seed);
    return c;
}

MotionWordImpl::MotionWordImpl(const torch::Tensor& base_embedding, MotionWordConfig config) : config_(config) {
    if (config_.gamma_dim % 2 != 0 || config_.gamma_dim <= 0)
        throw ConfigError("motion word gamma_dim must be even and positive");
    if (base_embedding.dim() != 1) throw ContractError("motion word base embedding must be a vector");
    const auto d = base_embedding.size(0);
    v_b = register_parameter("v_b", base_embedding.detach().to(torch::kFloat64).clone());
    w_mot = register_module("w_mot", torch::nn::Linear(d + config_.gamma_dim, d));
    if (config_.two_layer) w_mot_out = register_module("w_mot_out", torch::nn::Linear(d, d));
    to(torch::kFloat64);

    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.seed);
    auto weight = torch::zeros({d, d + config_.gamma_dim}, torch::kFloat64);
    weight.narrow(1, 0, d).copy_(torch::eye(d, torch::kFloat64));
    weight.narrow(1, 0, d).add_(torch::empty({d, d}, torch::kFloat64).normal_(0.0, config_.init_noise, gen));
    w_mot->weight.copy_(weight);
    w_mot->bias.zero_();
    if (w_mot_out) {
        w_mot_out->weight.copy_(torch::eye(d, torch::kFloat64));
        w_mot_out->bias.zero_();
    }
}

torch::Tensor MotionWordImpl::expand(std::int64_t frame) const {
    auto gamma = positional_encode(frame, config_.gamma_dim, config_.gamma_base);
    auto x = torch::cat({v_b, gamma});
    auto out = torch::nn::functional::linear(x, w_mot->weight, w_mot->bias);
    if (w_mot_out) out = torch::nn::functional::linear(torch::gelu(out), w_mot_out->weight, w_mot_out->bias);
    return out;
}

torch::Tensor MotionWordImpl::expand_all(std::int64_t frames) const {
    std::vector<torch::Tensor> gammas;
    for (std::int64_t i = 0; i < frames; ++i) gammas.push_back(positional_encode(i, config_.gamma_dim, config_.gamma_base));
    auto x = torch::cat({v_b.unsqueeze(0).expand({frames, -1}), torch::stack(gammas)}, 1);
    auto out = torch::nn::functional::linear(x, w_mot->weight, w_mot->bias);
    if (w_mot_out) out = torch::nn::functional::linear(torch::gelu(out), w_mot_out->weight, w_mot_out->bias);
    return out;
}

std::int64_t MotionWordImpl::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
}

void MotionWordImpl::zero_gamma_block() {
    if (w_mot_out) throw ConfigError("zero_gamma_block applies to the single-layer motion map only");
    torch::NoGradGuard no_grad;
    w_mot->weight.narrow(1, dim(), config_.gamma_dim).zero_();
}

ProtagonistEmbeddingImpl::ProtagonistEmbeddingImpl(const torch::Tensor& init) {
    if (init.dim() != 1) throw ContractError("protagonist embedding must be a vector");
    v_pro = register_parameter("v_pro", init.detach().to(torch::kFloat64).clone());
}

torch::Tensor frame_token_inputs(const TokenizedPrompt& prompt, const MotionWord* motion,
                                 const ProtagonistEmbedding* protagonist, const ToyTextEncoder& encoder,
                                 std::int64_t frames) {
    if (motion != nullptr && !prompt.motion_slot)
        throw PromptError("motion word supplied but prompt '" + prompt.text + "' has no motion slot");
    if (protagonist != nullptr && !prompt.protagonist_slot)
        throw PromptError("protagonist word supplied but prompt '" + prompt.text + "' has no protagonist slot");
    if (frames < 1) throw ContractError("conditionings need at least one frame");
    auto base = encoder->embed_tokens(prompt);  // [L, d]
    const auto length = base.size(0);
    auto inputs = base.unsqueeze(0).expand({frames, -1, -1});
    if (motion == nullptr && protagonist == nullptr) return inputs;

    // Rebuild the sequence from slices so the graph reaches v_mot and v_pro.
    std::vector<torch::Tensor> columns;
    for (std::int64_t pos = 0; pos < length; ++pos) {
        if (motion != nullptr && pos == *prompt.motion_slot) {
            columns.push_back((*motion)->expand_all(frames).unsqueeze(1));
        } else if (protagonist != nullptr && pos == *prompt.protagonist_slot) {
            columns.push_back((*protagonist)->v_pro.view({1, 1, -1}).expand({frames, 1, -1}));
        } else {
            columns.push_back(inputs.narrow(1, pos, 1));
        }
    }
    return torch::cat(columns, 1);
}

FrameConditionings build_frame_conditionings(const TokenizedPrompt& prompt, const MotionWord* motion,
                                             const ProtagonistEmbedding* protagonist, ToyTextEncoder& encoder,
                                             std::int64_t frames) {
    return {encoder->encode(frame_token_inputs(prompt, motion, protagonist, encoder, frames))};
}

FrameConditionings build_edit_conditionings(const TokenizedPrompt& edit_prompt, const MotionWord& motion,
                                            ToyTextEncoder& encoder, std::int64_t frames) {
    if (!edit_prompt.motion_slot) throw PromptError("edit prompt '" + edit_prompt.text + "' has no motion slot");
    if (edit_prompt.protagonist_slot)
        throw PromptError("edit prompt names its protagonist in plain text; drop the protagonist slot");
    return build_frame_conditionings(edit_prompt, &motion, nullptr, encoder, frames);
}

FrameConditionings unconditional_conditionings(const Vocabulary& vocab, ToyTextEncoder& encoder,
                                               std::int64_t frames, const MotionWord* motion) {
    const auto len = encoder->config().max_len;
    if (motion != nullptr) return build_frame_conditionings(tokenize(kMotionMarker, vocab, len), motion, nullptr, encoder, frames);
    auto single = encoder->encode(encoder->embed_tokens(tokenize("", vocab, len)).unsqueeze(0));
    return {single.expand({frames, -1, -1}).contiguous()};
}

void save_words(const WordBundle& bundle, const std::string& path) {
    TensorArchive archive{std::string(kWordsVersion)};
    archive.metadata()["prompts"] = bundle.prompts;
    if (bundle.motion) {
        const auto& m = *bundle.motion;
        archive.metadata()["motion"] = m->config().to_json();
        archive.add("v_b", m->v_b);
        archive.add("w_mot.weight", m->w_mot->weight);
        archive.add("w_mot.bias", m->w_mot->bias);
        if (m->w_mot_out) {
            archive.add("w_mot_out.weight", m->w_mot_out->weight);
            archive.add("w_mot_out.bias", m->w_mot_out->bias);
        }
    }
    if (bundle.protagonist) archive.add("v_pro", (*bundle.protagonist)->v_pro);
    archive.save(path);
}

WordBundle load_words(const std::string& path) {
    auto archive = TensorArchive::load(path, kWordsVersion);
    WordBundle bundle;
    bundle.prompts = archive.metadata().value("prompts", nlohmann::json::object());
    if (archive.contains("v_b")) {
        MotionWord motion(archive.at("v_b"), MotionWordConfig::from_json(archive.metadata().at("motion")));
        torch::NoGradGuard no_grad;
        motion->w_mot->weight.copy_(archive.at("w_mot.weight"));
        motion->w_mot->bias.copy_(archive.at("w_mot.bias"));
        if (motion->w_mot_out) {
            motion->w_mot_out->weight.copy_(archive.at("w_mot_out.weight"));
            motion->w_mot_out->bias.copy_(archive.at("w_mot_out.bias"));
        }
        bundle.motion = motion;
    }
    if (archive.contains("v_pro")) bundle.protagonist = ProtagonistEmbedding(archive.at("v_pro"));
    return bundle;
}

}  // namespace savekit
