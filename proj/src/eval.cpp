#include "savekit/eval.hpp"

#include <cmath>

#include "savekit/errors.hpp"
#include "savekit/trainer.hpp"

namespace savekit {

double flow_similarity(const torch::Tensor& flow_a, const torch::Tensor& flow_b) {
    if (flow_a.dim() != 4 || flow_a.size(3) != 2 || flow_a.sizes() != flow_b.sizes())
        throw ContractError("flow fields must share shape [F, h, w, 2] (got " + c10::str(flow_a.sizes()) + " and " +
                            c10::str(flow_b.sizes()) + ")");
    const auto frames = flow_a.size(0);
    if (frames == 0) throw ContractError("flow fields hold no frames");
    auto a = flow_a.to(torch::kFloat64).reshape({frames, -1});
    auto b = flow_b.to(torch::kFloat64).reshape({frames, -1});
    double sum = 0.0;
    for (std::int64_t f = 0; f < frames; ++f) {
        const double na = a[f].norm().item<double>(), nb = b[f].norm().item<double>();
        if (na < kFlowNormEpsilon || nb < kFlowNormEpsilon) continue;
        sum += (a[f] * b[f]).sum().item<double>() / (na * nb);
    }
    return sum / static_cast<double>(frames);
}

double flow_similarity(const DisplacementField& a, const DisplacementField& b) {
    return flow_similarity(a.vectors(), b.vectors());
}

torch::Tensor PixelEmbedder::embed(const torch::Tensor& frame) {
    auto small = resize_frames(frame.to(torch::kFloat64).unsqueeze(0), size_, size_).flatten();
    return small / small.norm().clamp_min(kFlowNormEpsilon);
}

double frame_consistency(const VideoFrames& video, FrameEmbedder& embedder) {
    const auto n = video.frames.size(0);
    if (n < 2) throw ContractError("frame consistency needs at least two frames");
    double sum = 0.0;
    auto prev = embedder.embed(video.frames[0]);
    for (std::int64_t i = 1; i < n; ++i) {
        auto cur = embedder.embed(video.frames[i]);
        sum += (prev * cur).sum().item<double>();
        prev = cur;
    }
    return sum / static_cast<double>(n - 1);
}

std::vector<TokenShare> token_attention_share(const AttentionRecord& record, const TokenizedPrompt& prompt,
                                              const Vocabulary& vocab) {
    if (record.cross_attn.empty()) throw ContractError("no cross-attention was recorded");
    torch::Tensor mass;
    for (const auto& [layer, probs] : record.cross_attn) {
        if (probs.size(-1) != prompt.length())
            throw ContractError("record width " + std::to_string(probs.size(-1)) + " differs from the prompt length");
        auto m = probs.detach().to(torch::kFloat64).sum({0, 1, 2});
        mass = mass.defined() ? mass + m : m;
    }
    std::vector<TokenShare> shares;
    double total = 0.0;
    for (std::int64_t pos = 0; pos < prompt.length(); ++pos) {
        const auto id = prompt.ids[static_cast<std::size_t>(pos)];
        if (id == vocab.pad()) continue;
        const double m = mass[pos].item<double>();
        shares.push_back({pos, vocab.word(id), m});
        total += m;
    }
    if (!(total > 0.0)) throw ContractError("prompt tokens received no attention mass");
    for (auto& s : shares) s.share /= total;
    return shares;
}

std::map<std::string, double> MetricReport::shares_by_token() const {
    std::map<std::string, double> out;
    for (const auto& s : token_shares) out[s.token] += s.share;
    return out;
}

nlohmann::json MetricReport::to_json() const {
    auto shares = nlohmann::json::array();
    for (const auto& s : token_shares) shares.push_back({{"position", s.position}, {"token", s.token}, {"share", s.share}});
    return {{"flow_similarity", flow_similarity},
            {"frame_consistency", frame_consistency},
            {"token_shares", shares},
            {"shares_by_token", shares_by_token()}};
}

DisplacementField video_flow(Denoiser& backbone, const BackboneConfig& backbone_config,
                             const DiffusionSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& cond,
                             const MaskConfig& config) {
    auto attention = probe_attention(backbone, backbone_config, schedule, z0, cond, config);
    return compute_pseudo_flow(attention, config.normalize, config.combiner);
}

MetricReport evaluate_pair(const StageCheckpoint& checkpoint, const VideoFrames& source, const VideoFrames& edited,
                           FrameEmbedder& embedder, double flow_probe_fraction) {
    torch::NoGradGuard no_grad;
    const auto& kit = checkpoint.kit;
    auto& backbone = *const_cast<VideoUNet&>(kit.backbone);
    auto& encoder = const_cast<ToyTextEncoder&>(kit.encoder);
    const auto& bc = backbone.config();
    const auto& mask_config = checkpoint.config.mask;

    auto z_source = frames_to_latent(source, bc.height, bc.width);
    auto z_edit = frames_to_latent(edited, bc.height, bc.width);
    if (z_source.size(0) != z_edit.size(0)) throw ContractError("source and edit differ in frame count");
    auto uncond = unconditional_conditionings(kit.vocab, encoder, z_source.size(0)).embeddings;

    auto flow_config = mask_config;
    flow_config.t_probe_fractions = {flow_probe_fraction};
    flow_config.validate();

    MetricReport report;
    report.flow_similarity = flow_similarity(video_flow(backbone, bc, kit.schedule, z_source, uncond, flow_config),
                                             video_flow(backbone, bc, kit.schedule, z_edit, uncond, flow_config));
    report.frame_consistency = frame_consistency(edited, embedder);

    const auto t = probe_timesteps(mask_config.t_probe_fractions, kit.schedule.steps()).front();
    auto noise = seeded_noise({1, z_source.size(1), z_source.size(2), z_source.size(3)}, mask_config.noise_seed)
                     .expand_as(z_source);
    auto z_t = kit.schedule.add_noise(z_source, noise, t);
    auto cond = training_conditionings(checkpoint, z_source.size(0));
    DenoiseOptions options{true, FrameMode::Video};
    options.record_spatio_temporal = false;
    auto result = backbone.denoise(z_t, t, cond, options);
    report.token_shares = token_attention_share(*result.record, kit.tokenize(checkpoint.prompt), kit.vocab);
    return report;
}

}  // namespace savekit
