#include "savekit/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "savekit/archive.hpp"
#include "savekit/errors.hpp"

namespace savekit {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------- config

void BackboneConfig::validate() const {
    std::vector<std::string> problems;
    if (channels < 1) problems.push_back("channels must be positive");
    if (level_widths.empty()) problems.push_back("at least one resolution level required");
    if (heads < 1) problems.push_back("heads must be positive");
    if (st_similarity != "cosine" && st_similarity != "dot")
        problems.push_back("st_similarity must be 'cosine' or 'dot'");
    for (auto w : level_widths) {
        if (w % heads != 0) problems.push_back("level width " + std::to_string(w) + " not divisible by heads");
        if (norm_groups < 1 || w % norm_groups != 0)
            problems.push_back("level width " + std::to_string(w) + " not divisible by norm groups");
    }
    if (text_dim < 1 || time_dim < 1) problems.push_back("text_dim and time_dim must be positive");
    if (!level_widths.empty() && level_widths.front() % 2 != 0)
        problems.push_back("first level width must be even (timestep features)");
    const std::int64_t factor = std::int64_t{1} << (level_widths.empty() ? 0 : level_widths.size() - 1);
    if (height < 1 || width < 1 || height % factor != 0 || width % factor != 0)
        problems.push_back("latent grid must be divisible by 2^(levels-1)");
    if (num_timesteps < 1) problems.push_back("num_timesteps must be positive");
    if (mask_blocks.empty()) problems.push_back("mask_blocks must be nonempty");
    const auto decoder = decoder_layer_ids();
    for (const auto& b : mask_blocks)
        if (std::find(decoder.begin(), decoder.end(), b) == decoder.end())
            problems.push_back("mask block '" + b + "' is not a decoder-side attention layer");
    if (!problems.empty()) {
        std::ostringstream msg;
        msg << "invalid backbone config:";
        for (const auto& p : problems) msg << "\n  - " << p;
        throw ConfigError(msg.str());
    }
}

std::vector<std::string> BackboneConfig::layer_ids() const {
    std::vector<std::string> ids;
    for (std::size_t l = 0; l < level_widths.size(); ++l) ids.push_back("down" + std::to_string(l + 1));
    for (std::size_t l = level_widths.size(); l-- > 0;) ids.push_back("up" + std::to_string(l + 1));
    return ids;
}

std::vector<std::string> BackboneConfig::decoder_layer_ids() const {
    std::vector<std::string> ids;
    for (std::size_t l = level_widths.size(); l-- > 0;) ids.push_back("up" + std::to_string(l + 1));
    return ids;
}

std::pair<std::int64_t, std::int64_t> BackboneConfig::grid_of(const std::string& layer_id) const {
    std::size_t digits = layer_id.find_first_of("0123456789");
    if (digits == std::string::npos) throw ContractError("unknown layer '" + layer_id + "'");
    const auto level = std::stoll(layer_id.substr(digits)) - 1;
    if (level < 0 || level >= static_cast<std::int64_t>(level_widths.size()))
        throw ContractError("unknown layer '" + layer_id + "'");
    return {height >> level, width >> level};
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"channels", channels},   {"height", height},         {"width", width},
            {"level_widths", level_widths}, {"heads", heads},     {"text_dim", text_dim},
            {"time_dim", time_dim},   {"norm_groups", norm_groups}, {"ff_mult", ff_mult},
            {"num_timesteps", num_timesteps}, {"temporal", temporal}, {"mask_blocks", mask_blocks},
            {"st_similarity", st_similarity}, {"seed", seed}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.channels = j.at("channels");
    c.height = j.at("height");
    c.width = j.at("width");
    c.level_widths = j.at("level_widths").get<std::vector<std::int64_t>>();
    c.heads = j.at("heads");
    c.text_dim = j.at("text_dim");
    c.time_dim = j.at("time_dim");
    c.norm_groups = j.at("norm_groups");
    c.ff_mult = j.at("ff_mult");
    c.num_timesteps = j.at("num_timesteps");
    c.temporal = j.at("temporal");
    c.mask_blocks = j.at("mask_blocks").get<std::vector<std::string>>();
    c.st_similarity = j.value("st_similarity", c.st_similarity);
    c.seed = j.at("seed");
    return c;
}

// ---------------------------------------------------------------- record

bool AttentionRecorder::wants_st(const std::string& layer) const {
    if (record == nullptr || st_layers == nullptr) return false;
    return std::find(st_layers->begin(), st_layers->end(), layer) != st_layers->end();
}

bool AttentionRecord::has_st(const std::string& layer, std::int64_t i, std::int64_t j) const {
    return st_attn.count({layer, i, j}) != 0;
}

const torch::Tensor& AttentionRecord::st(const std::string& layer, std::int64_t i, std::int64_t j) const {
    auto it = st_attn.find({layer, i, j});
    if (it == st_attn.end())
        throw AggregationError("no spatio-temporal map for layer '" + layer + "', frame " + std::to_string(i) +
                               ", key frame " + std::to_string(j));
    return it->second;
}

torch::Tensor AttentionRecord::cross(const std::string& layer, std::int64_t frame) const {
    auto it = cross_attn.find(layer);
    if (it == cross_attn.end()) throw AggregationError("no cross-attention map for layer '" + layer + "'");
    return it->second[frame];
}

// ---------------------------------------------------------------- attention

AttentionImpl::AttentionImpl(std::int64_t query_dim, std::int64_t context_dim, std::int64_t heads, bool cosine)
    : heads_(heads), scale_(1.0 / std::sqrt(static_cast<double>(query_dim / heads))), cosine_(cosine) {
    if (cosine_ && query_dim != context_dim) throw ConfigError("cosine attention needs equal query and context widths");
    to_q = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(query_dim, query_dim).bias(false)));
    if (cosine_)
        log_temperature = register_parameter(
            "log_temperature", torch::full({heads}, std::log(kInitialTemperature), torch::kFloat64));
    else
        to_k = register_module("to_k",
                               torch::nn::Linear(torch::nn::LinearOptions(context_dim, query_dim).bias(false)));
    to_v = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(context_dim, query_dim).bias(false)));
    to_out = register_module("to_out", torch::nn::Linear(query_dim, query_dim));
}

torch::Tensor AttentionImpl::split_heads(const torch::Tensor& x) const {
    const auto b = x.size(0), t = x.size(1), c = x.size(2);
    return x.view({b, t, heads_, c / heads_}).transpose(1, 2);
}

torch::Tensor AttentionImpl::merge_heads(const torch::Tensor& x) const {
    const auto b = x.size(0), t = x.size(2);
    return x.transpose(1, 2).reshape({b, t, -1});
}

std::pair<torch::Tensor, torch::Tensor> AttentionImpl::queries_keys(const torch::Tensor& q_in,
                                                                    const torch::Tensor& context) {
    if (!cosine_) return {split_heads(to_q(q_in)) * scale_, split_heads(to_k(context))};
    namespace F = torch::nn::functional;
    const auto unit = F::NormalizeFuncOptions().dim(-1).eps(1e-12);
    auto q = F::normalize(split_heads(to_q(q_in)), unit);
    auto k = q_in.is_same(context) ? q : F::normalize(split_heads(to_q(context)), unit);
    return {q * log_temperature.exp().view({1, heads_, 1, 1}), k};
}

std::pair<torch::Tensor, torch::Tensor> AttentionImpl::forward(const torch::Tensor& q_in, const torch::Tensor& context) {
    auto [q, k] = queries_keys(q_in, context);
    auto v = split_heads(to_v(context));
    auto probs = torch::softmax(torch::matmul(q, k.transpose(-1, -2)), -1);
    auto out = to_out(merge_heads(torch::matmul(probs, v)));
    return {out, probs};
}

TemporalAttentionImpl::TemporalAttentionImpl(std::int64_t dim, std::int64_t heads) {
    attn = register_module("attn", Attention(dim, dim, heads));
}

torch::Tensor TemporalAttentionImpl::forward(const torch::Tensor& x) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    // [N, C, H, W] -> [H*W, N, C]: each pixel is its own sequence over frames.
    auto seq = x.flatten(2).permute({2, 0, 1});
    auto out = attn->forward(seq, seq).first;
    return out.permute({1, 2, 0}).reshape({n, c, h, w});
}

// ---------------------------------------------------------------- resblock

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups) {
    norm1 = register_module("norm1", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, in)));
    conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out));
    norm2 = register_module("norm2", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, out)));
    conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
    if (in != out) skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1(F::silu(norm1(x)));
    h = h + time_proj(F::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(F::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
}

// ---------------------------------------------------------------- transformer

TransformerBlockImpl::TransformerBlockImpl(std::string layer_id, std::int64_t dim, std::int64_t text_dim,
                                           std::int64_t heads, std::int64_t ff_mult, bool temporal, bool cosine_st)
    : layer_id_(std::move(layer_id)), temporal_(temporal) {
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    st_attn = register_module("st_attn", Attention(dim, dim, heads, cosine_st));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_attn = register_module("cross_attn", Attention(dim, text_dim, heads));
    norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    ff_in = register_module("ff_in", torch::nn::Linear(dim, dim * ff_mult));
    ff_out = register_module("ff_out", torch::nn::Linear(dim * ff_mult, dim));
    if (temporal_) {
        norm_t = register_module("norm_t", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
        t_attn = register_module("t_attn", TemporalAttention(dim, heads));
    }
}

torch::Tensor TransformerBlockImpl::spatio_temporal(const torch::Tensor& tokens, FrameMode mode,
                                                    const AttentionRecorder& recorder, std::int64_t grid_h,
                                                    std::int64_t grid_w) {
    auto& attn = *st_attn;
    const auto n = tokens.size(0), hw = tokens.size(1);
    auto [q, k] = attn.queries_keys(tokens, tokens);
    auto v = attn.split_heads(attn.to_v(tokens));
    const bool record = recorder.wants_st(layer_id_);
    if (record) recorder.record->grids[layer_id_] = {grid_h, grid_w};

    auto attend = [&](const torch::Tensor& qq, const torch::Tensor& kk, const torch::Tensor& vv) {
        auto probs = torch::softmax(torch::matmul(qq, kk.transpose(-1, -2)), -1);
        return std::make_pair(torch::matmul(probs, vv), probs);
    };

    if (mode == FrameMode::Image) {
        auto [out, probs] = attend(q, k, v);
        if (record) {
            auto detached = probs.detach();
            for (std::int64_t i = 0; i < n; ++i) recorder.record->st_attn[{layer_id_, i, i}] = detached[i];
        }
        return attn.to_out(attn.merge_heads(out));
    }

    // Frames 0 and 1 see a single key frame (the first; for frame 1 the first
    // and preceding frames coincide and are deduplicated). Frames i >= 2 see
    // the first frame and frame i-1, concatenated along the key axis.
    const auto n_single = std::min<std::int64_t>(n, 2);
    auto k0 = k.narrow(0, 0, 1), v0 = v.narrow(0, 0, 1);
    auto [out_single, probs_single] =
        attend(q.narrow(0, 0, n_single), k0.expand({n_single, -1, -1, -1}), v0.expand({n_single, -1, -1, -1}));
    std::vector<torch::Tensor> outs{out_single};
    if (record) {
        auto detached = probs_single.detach();
        for (std::int64_t i = 0; i < n_single; ++i) recorder.record->st_attn[{layer_id_, i, 0}] = detached[i];
    }
    if (n > 2) {
        const auto m = n - 2;
        auto keys = torch::cat({k0.expand({m, -1, -1, -1}), k.narrow(0, 1, m)}, 2);
        auto values = torch::cat({v0.expand({m, -1, -1, -1}), v.narrow(0, 1, m)}, 2);
        auto [out_pair, probs_pair] = attend(q.narrow(0, 2, m), keys, values);
        outs.push_back(out_pair);
        if (record) {
            auto detached = probs_pair.detach();
            auto first = detached.narrow(-1, 0, hw);
            auto prev = detached.narrow(-1, hw, hw);
            first = first / first.sum(-1, true);
            prev = prev / prev.sum(-1, true);
            for (std::int64_t b = 0; b < m; ++b) {
                recorder.record->st_attn[{layer_id_, b + 2, 0}] = first[b];
                recorder.record->st_attn[{layer_id_, b + 2, b + 1}] = prev[b];
            }
        }
    }
    return attn.to_out(attn.merge_heads(torch::cat(outs, 0)));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& cond, FrameMode mode,
                                            const AttentionRecorder& recorder) {
    const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = x.flatten(2).transpose(1, 2);  // [N, HW, C]
    tokens = tokens + spatio_temporal(norm1(tokens), mode, recorder, h, w);
    auto [cross_out, cross_probs] = cross_attn(norm2(tokens), cond);
    if (recorder.record != nullptr) {
        recorder.record->cross_attn[layer_id_] = cross_probs;
        recorder.record->grids[layer_id_] = {h, w};
    }
    tokens = tokens + cross_out;
    tokens = tokens + ff_out(F::gelu(ff_in(norm3(tokens))));
    auto out = tokens.transpose(1, 2).reshape({n, c, h, w});
    if (temporal_ && mode == FrameMode::Video) out = out + t_attn(norm_t(tokens).transpose(1, 2).reshape({n, c, h, w}));
    return out;
}

// ---------------------------------------------------------------- unet

torch::Tensor timestep_features(const std::vector<std::int64_t>& timesteps, std::int64_t dim, torch::Dtype dtype) {
    const auto half = dim / 2;
    auto t = torch::tensor(std::vector<double>(timesteps.begin(), timesteps.end()), torch::kFloat64).unsqueeze(1);
    auto k = torch::arange(half, torch::kFloat64).unsqueeze(0);
    auto args = t * torch::exp(-std::log(10000.0) * k / static_cast<double>(half));
    return torch::cat({torch::cos(args), torch::sin(args)}, 1).to(dtype);
}

VideoUNetImpl::VideoUNetImpl(BackboneConfig config) : config_(std::move(config)) {
    config_.validate();
    const auto& widths = config_.level_widths;
    const auto levels = static_cast<std::int64_t>(widths.size());
    const auto g = config_.norm_groups;
    const bool cosine_st = config_.st_similarity == "cosine";
    time_in = register_module("time_in", torch::nn::Linear(widths[0], config_.time_dim));
    time_out = register_module("time_out", torch::nn::Linear(config_.time_dim, config_.time_dim));
    conv_in = register_module(
        "conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(config_.channels, widths[0], 3).padding(1)));
    for (std::int64_t l = 0; l < levels; ++l) {
        const auto in = l == 0 ? widths[0] : widths[l - 1];
        down_res->push_back(ResBlock(in, widths[l], config_.time_dim, g));
        down_tf->push_back(TransformerBlock("down" + std::to_string(l + 1), widths[l], config_.text_dim,
                                            config_.heads, config_.ff_mult, config_.temporal, cosine_st));
        if (l + 1 < levels)
            downsamplers->push_back(
                torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[l], widths[l], 3).stride(2).padding(1)));
    }
    mid = ResBlock(widths.back(), widths.back(), config_.time_dim, g);
    for (std::int64_t l = 0; l < levels; ++l) {
        up_res->push_back(ResBlock(2 * widths[l], widths[l], config_.time_dim, g));
        up_tf->push_back(TransformerBlock("up" + std::to_string(l + 1), widths[l], config_.text_dim, config_.heads,
                                          config_.ff_mult, config_.temporal, cosine_st));
        if (l > 0)
            upsamplers->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[l], widths[l - 1], 3).padding(1)));
    }
    register_module("down_res", down_res);
    register_module("down_tf", down_tf);
    register_module("downsamplers", downsamplers);
    register_module("mid", mid);
    register_module("up_res", up_res);
    register_module("up_tf", up_tf);
    register_module("upsamplers", upsamplers);
    norm_out = register_module("norm_out", torch::nn::GroupNorm(torch::nn::GroupNormOptions(g, widths[0])));
    conv_out = register_module(
        "conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(widths[0], config_.channels, 3).padding(1)));
    to(torch::kFloat64);
    reset_parameters(config_.seed);
}

void VideoUNetImpl::reset_parameters(std::uint64_t seed) {
    torch::NoGradGuard no_grad;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (const auto& item : named_modules("", /*include_self=*/false)) {
        const auto& module = item.value();
        if (auto linear = std::dynamic_pointer_cast<torch::nn::LinearImpl>(module)) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(linear->weight.size(1)));
            linear->weight.uniform_(-bound, bound, gen);
            if (linear->bias.defined()) linear->bias.uniform_(-bound, bound, gen);
        } else if (auto conv = std::dynamic_pointer_cast<torch::nn::Conv2dImpl>(module)) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(conv->weight[0].numel()));
            conv->weight.uniform_(-bound, bound, gen);
            if (conv->bias.defined()) conv->bias.uniform_(-bound, bound, gen);
        } else if (auto gn = std::dynamic_pointer_cast<torch::nn::GroupNormImpl>(module)) {
            gn->weight.fill_(1.0);
            gn->bias.zero_();
        } else if (auto ln = std::dynamic_pointer_cast<torch::nn::LayerNormImpl>(module)) {
            ln->weight.fill_(1.0);
            ln->bias.zero_();
        }
    }
    for (auto& block : transformer_blocks()) {
        if (block->st_attn->cosine()) block->st_attn->log_temperature.fill_(std::log(kInitialTemperature));
        if (block->t_attn) {
            block->t_attn->attn->to_out->weight.zero_();
            block->t_attn->attn->to_out->bias.zero_();
        }
    }
}

std::vector<TransformerBlock> VideoUNetImpl::transformer_blocks() const {
    std::vector<TransformerBlock> blocks;
    for (const auto& m : *down_tf) blocks.emplace_back(std::dynamic_pointer_cast<TransformerBlockImpl>(m));
    for (std::size_t l = up_tf->size(); l-- > 0;)
        blocks.emplace_back(std::dynamic_pointer_cast<TransformerBlockImpl>((*up_tf)[l]));
    return blocks;
}

TransformerBlock VideoUNetImpl::block(const std::string& layer_id) const {
    for (auto& b : transformer_blocks())
        if (b->layer_id() == layer_id) return b;
    throw ContractError("no transformer block '" + layer_id + "'");
}

DenoiseResult VideoUNetImpl::denoise(const torch::Tensor& z_t, const std::vector<std::int64_t>& timesteps,
                                     const torch::Tensor& cond, const DenoiseOptions& options) {
    if (z_t.dim() != 4 || z_t.size(1) != config_.channels || z_t.size(2) != config_.height ||
        z_t.size(3) != config_.width)
        throw ContractError("denoise: latent shape " + c10::str(z_t.sizes()) + " does not match backbone [N, " +
                            std::to_string(config_.channels) + ", " + std::to_string(config_.height) + ", " +
                            std::to_string(config_.width) + "]");
    const auto n = z_t.size(0);
    if (cond.dim() != 3 || cond.size(0) != n || cond.size(2) != config_.text_dim)
        throw ContractError("denoise: conditioning shape " + c10::str(cond.sizes()) + " needs [" +
                            std::to_string(n) + ", L, " + std::to_string(config_.text_dim) + "]");
    if (static_cast<std::int64_t>(timesteps.size()) != n)
        throw ContractError("denoise: one timestep per frame required");
    for (auto t : timesteps)
        if (t < 1 || t > config_.num_timesteps)
            throw DomainError("denoise: timestep " + std::to_string(t) + " outside [1, " +
                              std::to_string(config_.num_timesteps) + "]");

    DenoiseResult result;
    AttentionRecorder recorder;
    if (options.record_attention) {
        result.record.emplace();
        recorder.record = &*result.record;
        if (options.record_spatio_temporal)
            recorder.st_layers = options.st_layers ? &*options.st_layers : &config_.mask_blocks;
    }

    const auto dtype = conv_in->weight.scalar_type();
    auto x = z_t.to(dtype);
    auto c = cond.to(dtype);
    auto temb = time_out(F::silu(time_in(timestep_features(timesteps, config_.level_widths[0], dtype))));

    const auto levels = down_res->size();
    auto h = conv_in(x);
    std::vector<torch::Tensor> skips;
    for (std::size_t l = 0; l < levels; ++l) {
        h = (*down_res)[l]->as<ResBlockImpl>()->forward(h, temb);
        h = (*down_tf)[l]->as<TransformerBlockImpl>()->forward(h, c, options.mode, recorder);
        skips.push_back(h);
        if (l + 1 < levels) h = (*downsamplers)[l]->as<torch::nn::Conv2dImpl>()->forward(h);
    }
    h = mid(h, temb);
    for (std::size_t l = levels; l-- > 0;) {
        h = (*up_res)[l]->as<ResBlockImpl>()->forward(torch::cat({h, skips[l]}, 1), temb);
        h = (*up_tf)[l]->as<TransformerBlockImpl>()->forward(h, c, options.mode, recorder);
        if (l > 0) {
            h = F::interpolate(h, F::InterpolateFuncOptions()
                                      .scale_factor(std::vector<double>{2.0, 2.0})
                                      .mode(torch::kNearest));
            h = (*upsamplers)[l - 1]->as<torch::nn::Conv2dImpl>()->forward(h);
        }
    }
    result.noise_pred = conv_out(F::silu(norm_out(h)));
    return result;
}

// ---------------------------------------------------------------- inflation / io

std::vector<std::pair<std::string, torch::Tensor>> named_parameter_list(const torch::nn::Module& module) {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    for (const auto& item : module.named_parameters()) out.emplace_back(item.key(), item.value());
    return out;
}

bool is_temporal_parameter(const std::string& name) {
    return name.find(".t_attn.") != std::string::npos || name.find(".norm_t.") != std::string::npos;
}

VideoUNet inflate_from_image_model(const BackboneConfig& image_config,
                                   const std::vector<std::pair<std::string, torch::Tensor>>& image_params) {
    BackboneConfig video_config = image_config;
    video_config.temporal = true;
    VideoUNet video(video_config);
    std::map<std::string, torch::Tensor> source(image_params.begin(), image_params.end());
    std::vector<std::string> problems;
    torch::NoGradGuard no_grad;
    std::size_t used = 0;
    for (auto& [name, param] : named_parameter_list(*video)) {
        if (is_temporal_parameter(name)) continue;
        auto it = source.find(name);
        if (it == source.end()) {
            problems.push_back(name + ": missing from image model");
            continue;
        }
        ++used;
        if (it->second.sizes() != param.sizes()) {
            problems.push_back(name + ": shape " + c10::str(it->second.sizes()) + " vs " + c10::str(param.sizes()));
            continue;
        }
        param.copy_(it->second);
    }
    for (const auto& [name, _] : source)
        if (is_temporal_parameter(name)) ++used;
    if (used != source.size()) problems.push_back("image model has parameters with no spatial counterpart");
    if (!problems.empty()) {
        std::ostringstream msg;
        msg << "inflation failed:";
        for (const auto& p : problems) msg << "\n  - " << p;
        throw InflationError(msg.str());
    }
    return video;
}

VideoUNet inflate_from_image_model(const VideoUNet& image_model) {
    std::vector<std::pair<std::string, torch::Tensor>> spatial;
    for (auto& [name, p] : named_parameter_list(*image_model))
        if (!is_temporal_parameter(name)) spatial.emplace_back(name, p);
    return inflate_from_image_model(image_model->config(), spatial);
}

void save_backbone(const VideoUNet& model, const std::string& path, const nlohmann::json& extra) {
    TensorArchive archive;
    archive.metadata()["kind"] = "backbone";
    archive.metadata()["config"] = model->config().to_json();
    if (!extra.is_null()) archive.metadata()["extra"] = extra;
    for (auto& [name, p] : named_parameter_list(*model)) archive.add(name, p);
    archive.save(path);
}

VideoUNet load_backbone(const std::string& path) {
    auto archive = TensorArchive::load(path, kCheckpointVersion);
    if (archive.metadata().value("kind", "") != "backbone")
        throw FormatError("'" + path + "' is not a backbone checkpoint");
    VideoUNet model(BackboneConfig::from_json(archive.metadata().at("config")));
    torch::NoGradGuard no_grad;
    for (auto& [name, p] : named_parameter_list(*model)) {
        const auto& stored = archive.at(name);
        if (stored.sizes() != p.sizes()) throw FormatError("checkpoint shape mismatch for '" + name + "'");
        p.copy_(stored);
    }
    return model;
}

std::uint64_t hash_parameters(const torch::nn::Module& module) {
    std::uint64_t h = fnv1a("params");
    for (const auto& item : module.named_parameters()) {
        h = fnv1a(item.key(), h);
        h = hash_tensor(item.value(), h);
    }
    return h;
}

}  // namespace savekit
