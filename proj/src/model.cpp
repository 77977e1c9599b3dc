#include "savekit/model.hpp"

#include "savekit/errors.hpp"

namespace savekit {

namespace {

nlohmann::json text_config_json(const TextEncoderConfig& c) {
    return {{"dim", c.dim}, {"max_len", c.max_len}, {"layers", c.layers}, {"heads", c.heads}, {"seed", c.seed}};
}

TextEncoderConfig text_config_from_json(const nlohmann::json& j) {
    TextEncoderConfig c;
    c.dim = j.at("dim");
    c.max_len = j.at("max_len");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.seed = j.at("seed");
    return c;
}

}  // namespace

ModelKit ModelKit::create(const BackboneConfig& backbone_config, const TextEncoderConfig& text_config,
                          DiffusionSchedule schedule, Vocabulary vocab) {
    if (text_config.dim != backbone_config.text_dim)
        throw ConfigError("text encoder width " + std::to_string(text_config.dim) + " differs from backbone text_dim " +
                          std::to_string(backbone_config.text_dim));
    if (schedule.steps() != backbone_config.num_timesteps)
        throw ConfigError("schedule length differs from backbone num_timesteps");
    ToyTextEncoder encoder(text_config, vocab.size());
    return ModelKit{std::move(vocab), encoder, VideoUNet(backbone_config), std::move(schedule)};
}

TokenizedPrompt ModelKit::tokenize(const std::string& text) const {
    return savekit::tokenize(text, vocab, encoder->config().max_len);
}

ModelKit ModelKit::clone() const {
    TensorArchive archive;
    add_kit(archive, *this);
    return read_kit(archive);
}

void add_kit(TensorArchive& archive, const ModelKit& kit) {
    auto& meta = archive.metadata();
    meta["backbone"] = kit.backbone->config().to_json();
    meta["text_encoder"] = text_config_json(kit.encoder->config());
    meta["vocab"] = kit.vocab.words();
    for (auto& [name, p] : named_parameter_list(*kit.backbone)) archive.add("backbone." + name, p);
    for (auto& [name, p] : named_parameter_list(*kit.encoder)) archive.add("text_encoder." + name, p);
    archive.add("schedule.betas", torch::tensor(kit.schedule.betas(), torch::kFloat64));
}

void load_parameters(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    for (auto& [name, p] : named_parameter_list(module)) {
        const auto key = prefix + name;
        if (!archive.contains(key)) throw FormatError("checkpoint lacks '" + key + "'");
        const auto& stored = archive.at(key);
        if (stored.sizes() != p.sizes()) throw FormatError("checkpoint shape mismatch for '" + key + "'");
        p.copy_(stored);
    }
}

ModelKit read_kit(const TensorArchive& archive) {
    const auto& meta = archive.metadata();
    if (!meta.contains("backbone") || !meta.contains("text_encoder") || !meta.contains("vocab"))
        throw FormatError("archive does not hold a model kit");
    const auto& betas_tensor = archive.at("schedule.betas");
    std::vector<double> betas(betas_tensor.data_ptr<double>(), betas_tensor.data_ptr<double>() + betas_tensor.numel());
    auto kit = ModelKit::create(BackboneConfig::from_json(meta.at("backbone")),
                                text_config_from_json(meta.at("text_encoder")), DiffusionSchedule(std::move(betas)),
                                Vocabulary(meta.at("vocab").get<std::vector<std::string>>()));
    load_parameters(*kit.backbone, archive, "backbone.");
    load_parameters(*kit.encoder, archive, "text_encoder.");
    return kit;
}

void save_kit(const ModelKit& kit, const std::filesystem::path& path, const nlohmann::json& extra) {
    TensorArchive archive;
    archive.metadata()["kind"] = "model_kit";
    if (!extra.is_null()) archive.metadata()["extra"] = extra;
    add_kit(archive, kit);
    archive.save(path);
}

ModelKit load_kit(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DependencyError("model checkpoint '" + path.string() + "' not found");
    auto archive = TensorArchive::load(path, kCheckpointVersion);
    return read_kit(archive);
}

}  // namespace savekit
