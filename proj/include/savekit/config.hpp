#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "savekit/sampler.hpp"
#include "savekit/trainer.hpp"

namespace savekit {

inline constexpr const char* kRunDirEnv = "SAVEKIT_RUN_DIR";
inline constexpr const char* kFixtureSource = "fixture:moving_square";

/// Flat key-value text: one `key = value` per line, `#` comments, dotted keys.
/// Values are JSON scalars or arrays (strings quoted). Dotted keys nest.
nlohmann::json parse_flat_config(const std::string& text);
/// Inverse of parse_flat_config; keys sorted, one line per leaf.
std::string dump_flat_config(const nlohmann::json& tree);

/// Everything one run directory needs.
struct RunConfig {
    std::filesystem::path run_dir = "run";
    // Directory of frame_%04d.png, or kFixtureSource for the built-in
    // 8-frame moving square.
    std::string source = kFixtureSource;
    std::string base_model;  // empty: <run_dir>/base.ckpt
    std::int64_t frame_height = 32;
    std::int64_t frame_width = 32;
    std::string stage1_prompt = "a photo of <pro>";
    std::string source_prompt = "a red <pro> <mot> on gray";
    std::vector<std::string> edit_prompts{"a red circle <mot> on gray"};
    TrainConfig train;
    SamplerConfig sampler;
    PretrainConfig pretrain;

    std::filesystem::path base_model_path() const;
    std::filesystem::path stage1_path() const { return run_dir / "stage1.ckpt"; }
    std::filesystem::path stage2_path() const { return run_dir / "stage2.ckpt"; }
    std::filesystem::path words_path() const { return run_dir / "words.bin"; }
    std::filesystem::path masks_dir() const { return run_dir / "masks"; }
    std::filesystem::path log_path() const { return run_dir / "log.jsonl"; }
    std::filesystem::path config_path() const { return run_dir / "config.toml"; }

    /// Value and slot checks, plus existence of the given input paths.
    /// Raises ConfigError listing every violation.
    void validate(const std::vector<std::filesystem::path>& required_paths = {}) const;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);

    std::string dump() const { return dump_flat_config(to_json()); }
    static RunConfig parse(const std::string& text) { return from_json(parse_flat_config(text)); }
    /// Reads a config file; SAVEKIT_RUN_DIR (if set) overrides run_dir.
    static RunConfig load(const std::filesystem::path& path);
};

bool operator==(const RunConfig& a, const RunConfig& b);

/// Source frames named by the config.
VideoFrames load_source(const RunConfig& config);

}  // namespace savekit
