#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "savekit/archive.hpp"
#include "savekit/backbone.hpp"
#include "savekit/schedule.hpp"
#include "savekit/text.hpp"

namespace savekit {

/// Everything a pipeline run needs besides the learned words: vocabulary,
/// frozen text encoder, denoiser and noise schedule.
struct ModelKit {
    Vocabulary vocab;
    ToyTextEncoder encoder;
    VideoUNet backbone;
    DiffusionSchedule schedule;

    static ModelKit create(const BackboneConfig& backbone_config, const TextEncoderConfig& text_config = {},
                           DiffusionSchedule schedule = DiffusionSchedule::scaled_linear(),
                           Vocabulary vocab = Vocabulary::toy());

    TokenizedPrompt tokenize(const std::string& text) const;
    /// Deep copy (parameters cloned).
    ModelKit clone() const;
};

/// Kit entries live under "backbone.", "text_encoder." and "schedule.betas".
void add_kit(TensorArchive& archive, const ModelKit& kit);
ModelKit read_kit(const TensorArchive& archive);

void save_kit(const ModelKit& kit, const std::filesystem::path& path, const nlohmann::json& extra = {});
ModelKit load_kit(const std::filesystem::path& path);

/// Copies stored tensors into a module's parameters by name (FormatError on mismatch).
void load_parameters(torch::nn::Module& module, const TensorArchive& archive, const std::string& prefix);

}  // namespace savekit
