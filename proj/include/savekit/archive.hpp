#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace savekit {

inline constexpr std::string_view kCheckpointVersion = "savekit-ckpt-v1";
inline constexpr std::string_view kWordsVersion = "savekit-words-v1";

/// Named tensors plus free-form JSON metadata, serialized as
///
///   <version>\n | u64 LE manifest size | manifest JSON | raw LE tensor data
///
/// The manifest lists name, dtype, shape, byte offset and byte length of every
/// tensor in insertion order. Supported dtypes: f64, f32, i64, u8.
class TensorArchive {
public:
    explicit TensorArchive(std::string version = std::string(kCheckpointVersion));

    const std::string& version() const { return version_; }
    nlohmann::json& metadata() { return metadata_; }
    const nlohmann::json& metadata() const { return metadata_; }

    void add(std::string name, const torch::Tensor& tensor);
    bool contains(std::string_view name) const;
    const torch::Tensor& at(std::string_view name) const;
    const std::vector<std::pair<std::string, torch::Tensor>>& entries() const { return entries_; }

    std::string encode() const;
    static TensorArchive decode(std::string_view bytes, std::string_view expected_version);

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path, std::string_view expected_version);

private:
    std::string version_;
    nlohmann::json metadata_ = nlohmann::json::object();
    std::vector<std::pair<std::string, torch::Tensor>> entries_;
};

// Writes via a sibling temp file and rename so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a; stable across platforms and runs.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_tensor(const torch::Tensor& tensor, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace savekit
