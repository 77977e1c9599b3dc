#include "savekit/pseudo_flow.hpp"

#include <algorithm>
#include <cmath>

#include "savekit/archive.hpp"
#include "savekit/errors.hpp"
#include "savekit/video.hpp"

namespace savekit {

std::string to_string(KeyFramePolicy policy) {
    return policy == KeyFramePolicy::FirstOnly ? "first_only" : "first_and_preceding";
}

KeyFramePolicy key_frame_policy_from_string(const std::string& text) {
    if (text == "first_only") return KeyFramePolicy::FirstOnly;
    if (text == "first_and_preceding") return KeyFramePolicy::FirstAndPreceding;
    throw ConfigError("unknown key_frame_policy '" + text + "' (first_only | first_and_preceding)");
}

AggregatedAttention aggregate_attention(const AttentionRecord& record, const std::vector<std::string>& blocks,
                                        std::int64_t frames, KeyFramePolicy policy) {
    if (blocks.empty()) throw AggregationError("no blocks to aggregate");
    if (frames < 2) throw AggregationError("aggregation needs at least two frames");
    AggregatedAttention out;
    for (const auto& block : blocks) {
        auto it = record.grids.find(block);
        if (it == record.grids.end()) throw AggregationError("record has no maps for block '" + block + "'");
        if (out.height == 0) {
            out.height = it->second.first;
            out.width = it->second.second;
        } else if (it->second != std::make_pair(out.height, out.width)) {
            throw AggregationError("block '" + block + "' has a different grid from the other listed blocks");
        }
    }
    for (std::int64_t i = 1; i < frames; ++i) {
        std::vector<std::int64_t> keys{0};
        if (policy == KeyFramePolicy::FirstAndPreceding && i - 1 != 0) keys.push_back(i - 1);
        std::vector<std::pair<std::int64_t, torch::Tensor>> per_key;
        for (auto j : keys) {
            torch::Tensor sum;
            for (const auto& block : blocks) {
                auto head_mean = record.st(block, i, j).mean(0);
                sum = sum.defined() ? sum + head_mean : head_mean;
            }
            auto mean = sum / static_cast<double>(blocks.size());
            per_key.emplace_back(j, mean / mean.sum(-1, true));
        }
        out.maps.push_back(std::move(per_key));
    }
    return out;
}

torch::Tensor DisplacementField::vectors() const {
    const auto frames = argmax_locs.size(0), h = argmax_locs.size(1), w = argmax_locs.size(2);
    auto rows = torch::arange(h, torch::kInt64).view({1, h, 1}).expand({frames, h, w});
    auto cols = torch::arange(w, torch::kInt64).view({1, 1, w}).expand({frames, h, w});
    auto query = torch::stack({rows, cols}, -1);
    return (argmax_locs - query).to(torch::kFloat64);
}

DisplacementField compute_pseudo_flow(const AggregatedAttention& attention, bool normalize,
                                      DistanceCombiner combiner) {
    const auto h = attention.height, w = attention.width, hw = h * w;
    const auto frames = static_cast<std::int64_t>(attention.maps.size());
    DisplacementField field;
    field.normalized = normalize;
    field.argmax_locs = torch::zeros({frames, h, w, 2}, torch::kInt64);
    field.distances = torch::zeros({frames, h, w}, torch::kFloat64);
    auto locs = field.argmax_locs.accessor<std::int64_t, 4>();
    auto dist = field.distances.accessor<double, 3>();
    const double scale = normalize ? std::sqrt(static_cast<double>(h * h + w * w)) : 1.0;

    for (std::int64_t f = 0; f < frames; ++f) {
        const auto& per_key = attention.maps[static_cast<std::size_t>(f)];
        for (std::size_t key = 0; key < per_key.size(); ++key) {
            auto map = per_key[key].second.to(torch::kFloat64).contiguous();
            if (map.size(0) != hw || map.size(1) != hw) throw ContractError("pseudo flow: map does not match grid");
            auto a = map.accessor<double, 2>();
            for (std::int64_t q = 0; q < hw; ++q) {
                std::int64_t best = 0;
                double best_value = a[q][0];
                for (std::int64_t k = 1; k < hw; ++k) {
                    if (a[q][k] > best_value) {  // strict: lowest index wins ties
                        best_value = a[q][k];
                        best = k;
                    }
                }
                const auto qr = q / w, qc = q % w, kr = best / w, kc = best % w;
                const double d = std::sqrt(static_cast<double>((qr - kr) * (qr - kr) + (qc - kc) * (qc - kc))) / scale;
                if (key == 0) {
                    locs[f][qr][qc][0] = kr;
                    locs[f][qr][qc][1] = kc;
                    dist[f][qr][qc] = d;
                } else if (combiner == DistanceCombiner::Max) {
                    dist[f][qr][qc] = std::max(dist[f][qr][qc], d);
                } else {
                    dist[f][qr][qc] += d;
                }
            }
        }
        if (combiner == DistanceCombiner::Mean && per_key.size() > 1)
            field.distances[f] /= static_cast<double>(per_key.size());
    }
    return field;
}

nlohmann::json MaskConfig::to_json() const {
    return {{"quantile", quantile},
            {"floor", floor},
            {"smooth_radius", smooth_radius},
            {"key_frame_policy", to_string(key_frame_policy)},
            {"combiner", combiner == DistanceCombiner::Max ? "max" : "mean"},
            {"normalize", normalize},
            {"t_probe_fractions", t_probe_fractions},
            {"noise_seed", noise_seed}};
}

MaskConfig MaskConfig::from_json(const nlohmann::json& j) {
    MaskConfig c;
    c.quantile = j.value("quantile", c.quantile);
    c.floor = j.value("floor", c.floor);
    c.smooth_radius = j.value("smooth_radius", c.smooth_radius);
    c.key_frame_policy = key_frame_policy_from_string(j.value("key_frame_policy", to_string(c.key_frame_policy)));
    const std::string combiner = j.value("combiner", std::string("max"));
    if (combiner != "max" && combiner != "mean") throw ConfigError("unknown distance combiner '" + combiner + "'");
    c.combiner = combiner == "max" ? DistanceCombiner::Max : DistanceCombiner::Mean;
    c.normalize = j.value("normalize", c.normalize);
    c.t_probe_fractions = j.value("t_probe_fractions", c.t_probe_fractions);
    c.noise_seed = j.value("noise_seed", c.noise_seed);
    return c;
}

void MaskConfig::validate() const {
    std::vector<std::string> problems;
    if (!(quantile > 0.0 && quantile < 1.0)) problems.push_back("mask quantile must lie in (0, 1)");
    if (!(floor >= 0.0)) problems.push_back("mask floor must be nonnegative");
    if (smooth_radius < 0) problems.push_back("mask smooth radius must be nonnegative");
    if (t_probe_fractions.empty()) problems.push_back("at least one probe timestep fraction required");
    for (double f : t_probe_fractions)
        if (!(f > 0.0 && f <= 1.0)) problems.push_back("probe fractions must lie in (0, 1]");
    if (!problems.empty()) {
        std::string msg = "invalid mask config:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw ConfigError(msg);
    }
}

nlohmann::json MotionMasks::metadata() const {
    return {{"quantile", quantile}, {"floor", floor}, {"smooth_radius", smooth_radius},
            {"frames", frames()},   {"height", masks.size(1)}, {"width", masks.size(2)}};
}

namespace {

// Linear-interpolated quantile of a sorted vector (numpy's default rule).
double sorted_quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return frac == 0.0 ? sorted[lo] : sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

}  // namespace

MotionMasks extract_motion_masks(const DisplacementField& field, double quantile, double floor,
                                 std::int64_t smooth_radius) {
    if (!(quantile > 0.0 && quantile < 1.0)) throw ConfigError("mask quantile must lie in (0, 1)");
    if (smooth_radius < 0) throw ConfigError("smooth radius must be nonnegative");
    const auto frames = field.distances.size(0), h = field.distances.size(1), w = field.distances.size(2);
    MotionMasks out;
    out.quantile = quantile;
    out.floor = floor;
    out.smooth_radius = smooth_radius;
    out.masks = torch::zeros({frames, h, w}, torch::kFloat64);
    auto dist = field.distances.to(torch::kFloat64).contiguous();
    for (std::int64_t f = 0; f < frames; ++f) {
        auto flat = dist[f].flatten();
        std::vector<double> values(flat.data_ptr<double>(), flat.data_ptr<double>() + flat.numel());
        auto sorted = values;
        std::sort(sorted.begin(), sorted.end());
        if (sorted.front() == sorted.back()) continue;  // nothing stands out
        const double threshold = std::max(sorted_quantile(sorted, quantile), floor);
        auto mask = out.masks[f].flatten();
        auto m = mask.accessor<double, 1>();
        for (std::size_t k = 0; k < values.size(); ++k) m[static_cast<std::int64_t>(k)] = values[k] >= threshold ? 1.0 : 0.0;
        out.masks[f].copy_(mask.view({h, w}));
    }
    if (smooth_radius > 0) {
        namespace F = torch::nn::functional;
        const auto k = 2 * smooth_radius + 1;
        out.masks = F::avg_pool2d(out.masks.unsqueeze(1), F::AvgPool2dFuncOptions(k)
                                                               .stride(1)
                                                               .padding(smooth_radius)
                                                               .count_include_pad(false))
                        .squeeze(1)
                        .clamp(0.0, 1.0);
    }
    return out;
}

std::vector<std::int64_t> probe_timesteps(const std::vector<double>& fractions, std::int64_t total_steps) {
    if (fractions.empty()) throw ConfigError("t_probe must be nonempty");
    std::vector<std::int64_t> out;
    for (double f : fractions) {
        const auto t = static_cast<std::int64_t>(std::llround(f * static_cast<double>(total_steps)));
        out.push_back(std::clamp<std::int64_t>(t, 1, total_steps));
    }
    return out;
}

AggregatedAttention probe_attention(Denoiser& backbone, const BackboneConfig& backbone_config,
                                    const DiffusionSchedule& schedule, const torch::Tensor& z0,
                                    const torch::Tensor& cond, const MaskConfig& config) {
    torch::NoGradGuard no_grad;
    const auto frames = z0.size(0);
    // One noise image shared by every frame and every probe timestep: static
    // pixels then look identical across frames.
    auto gen = at::make_generator<at::CPUGeneratorImpl>(config.noise_seed);
    auto noise = torch::randn({1, z0.size(1), z0.size(2), z0.size(3)}, gen, torch::TensorOptions().dtype(torch::kFloat64))
                     .expand_as(z0)
                     .contiguous();
    AggregatedAttention total;
    const auto ts = probe_timesteps(config.t_probe_fractions, schedule.steps());
    for (auto t : ts) {
        auto zt = schedule.add_noise(z0.to(torch::kFloat64), noise, t);
        DenoiseOptions options{true, FrameMode::Video};
        options.st_layers = backbone_config.mask_blocks;
        auto result = backbone.denoise(zt, t, cond, options);
        auto agg = aggregate_attention(*result.record, backbone_config.mask_blocks, frames, config.key_frame_policy);
        if (total.maps.empty()) {
            total = std::move(agg);
        } else {
            for (std::size_t f = 0; f < total.maps.size(); ++f)
                for (std::size_t k = 0; k < total.maps[f].size(); ++k)
                    total.maps[f][k].second = total.maps[f][k].second + agg.maps[f][k].second;
        }
    }
    for (auto& per_key : total.maps)
        for (auto& [_, map] : per_key) map = map / map.sum(-1, true);
    return total;
}

std::string mask_cache_key(const torch::Tensor& z0, const MaskConfig& config, std::uint64_t model_hash) {
    auto h = savekit::hash_tensor(z0);
    h = fnv1a(config.to_json().dump(), h);
    h = fnv1a(hex64(model_hash), h);
    return hex64(h);
}

std::filesystem::path MaskCache::path_for(const std::string& key) const { return dir_ / ("masks_" + key + ".bin"); }

std::optional<MotionMasks> MaskCache::lookup(const std::string& key) const {
    const auto path = path_for(key);
    if (!std::filesystem::exists(path)) return std::nullopt;
    return load_masks(path);
}

void MaskCache::store(const std::string& key, const MotionMasks& masks) {
    save_masks(masks, path_for(key));
    ++writes_;
}

MotionMasks masks_from_video(Denoiser& backbone, const BackboneConfig& backbone_config,
                             const DiffusionSchedule& schedule, const torch::Tensor& z0, const torch::Tensor& cond,
                             const MaskConfig& config, MaskCache* cache, std::uint64_t model_hash) {
    std::string key;
    if (cache != nullptr) {
        key = mask_cache_key(z0, config, model_hash);
        if (auto hit = cache->lookup(key)) return *hit;
    }
    auto attention = probe_attention(backbone, backbone_config, schedule, z0, cond, config);
    auto field = compute_pseudo_flow(attention, config.normalize, config.combiner);
    auto masks = extract_motion_masks(field, config.quantile, config.floor, config.smooth_radius);
    if (cache != nullptr) cache->store(key, masks);
    return masks;
}

void save_masks(const MotionMasks& masks, const std::filesystem::path& path) {
    TensorArchive archive;
    archive.metadata() = masks.metadata();
    archive.metadata()["kind"] = "motion_masks";
    archive.add("masks", masks.masks);
    archive.save(path);
}

MotionMasks load_masks(const std::filesystem::path& path) {
    auto archive = TensorArchive::load(path, kCheckpointVersion);
    if (archive.metadata().value("kind", "") != "motion_masks")
        throw FormatError("'" + path.string() + "' does not hold motion masks");
    MotionMasks masks;
    masks.masks = archive.at("masks");
    masks.quantile = archive.metadata().at("quantile");
    masks.floor = archive.metadata().at("floor");
    masks.smooth_radius = archive.metadata().at("smooth_radius");
    return masks;
}

void export_masks(const MotionMasks& masks, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::int64_t f = 0; f < masks.masks.size(0); ++f) {
        char name[32];
        // Masks exist for frames 2..N.
        std::snprintf(name, sizeof name, "mask_%04lld.png", static_cast<long long>(f + 2));
        write_png(dir / name, masks.masks[f].unsqueeze(0));
    }
    write_file_atomic(dir / "masks.json", masks.metadata().dump(2) + "\n");
}

}  // namespace savekit
