#include "savekit/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "savekit/errors.hpp"

namespace savekit {
namespace {

static_assert(std::endian::native == std::endian::little, "archive format assumes a little-endian host");

std::string dtype_tag(torch::ScalarType type) {
    switch (type) {
        case torch::kFloat64: return "f64";
        case torch::kFloat32: return "f32";
        case torch::kInt64: return "i64";
        case torch::kUInt8: return "u8";
        default: throw FormatError("archive: unsupported dtype " + std::string(c10::toString(type)));
    }
}

torch::ScalarType dtype_from_tag(const std::string& tag) {
    if (tag == "f64") return torch::kFloat64;
    if (tag == "f32") return torch::kFloat32;
    if (tag == "i64") return torch::kInt64;
    if (tag == "u8") return torch::kUInt8;
    throw FormatError("archive: unknown dtype tag '" + tag + "'");
}

}  // namespace

TensorArchive::TensorArchive(std::string version) : version_(std::move(version)) {}

void TensorArchive::add(std::string name, const torch::Tensor& tensor) {
    if (contains(name)) throw FormatError("archive: duplicate entry '" + name + "'");
    dtype_tag(tensor.scalar_type());
    entries_.emplace_back(std::move(name), tensor.detach().cpu().contiguous().clone());
}

bool TensorArchive::contains(std::string_view name) const {
    for (const auto& [key, _] : entries_)
        if (key == name) return true;
    return false;
}

const torch::Tensor& TensorArchive::at(std::string_view name) const {
    for (const auto& [key, value] : entries_)
        if (key == name) return value;
    throw FormatError("archive: missing entry '" + std::string(name) + "'");
}

std::string TensorArchive::encode() const {
    nlohmann::json manifest;
    manifest["metadata"] = metadata_;
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, tensor] : entries_) {
        const auto nbytes = static_cast<std::uint64_t>(tensor.numel() * tensor.element_size());
        manifest["tensors"].push_back({{"name", name},
                                       {"dtype", dtype_tag(tensor.scalar_type())},
                                       {"shape", tensor.sizes().vec()},
                                       {"offset", offset},
                                       {"nbytes", nbytes}});
        offset += nbytes;
    }
    const std::string manifest_text = manifest.dump();
    const std::uint64_t manifest_size = manifest_text.size();

    std::string out;
    out.reserve(version_.size() + 1 + 8 + manifest_text.size() + offset);
    out += version_;
    out += '\n';
    char size_bytes[8];
    std::memcpy(size_bytes, &manifest_size, 8);
    out.append(size_bytes, 8);
    out += manifest_text;
    for (const auto& [_, tensor] : entries_) {
        out.append(static_cast<const char*>(tensor.data_ptr()),
                   static_cast<std::size_t>(tensor.numel() * tensor.element_size()));
    }
    return out;
}

TensorArchive TensorArchive::decode(std::string_view bytes, std::string_view expected_version) {
    const auto newline = bytes.find('\n');
    if (newline == std::string_view::npos) throw FormatError("archive: missing version line");
    const std::string version(bytes.substr(0, newline));
    if (version != expected_version)
        throw FormatError("archive: expected version '" + std::string(expected_version) + "', found '" + version + "'");
    std::size_t pos = newline + 1;
    if (bytes.size() < pos + 8) throw FormatError("archive: truncated manifest size");
    std::uint64_t manifest_size = 0;
    std::memcpy(&manifest_size, bytes.data() + pos, 8);
    pos += 8;
    if (bytes.size() < pos + manifest_size) throw FormatError("archive: truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(pos, manifest_size));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("archive: bad manifest: ") + e.what());
    }
    pos += manifest_size;
    const std::string_view data = bytes.substr(pos);

    TensorArchive archive(version);
    archive.metadata_ = manifest.value("metadata", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto offset = entry.at("offset").get<std::uint64_t>();
        const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
        if (offset + nbytes > data.size())
            throw FormatError("archive: entry '" + entry.at("name").get<std::string>() + "' overruns data");
        const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_tag(entry.at("dtype"))));
        if (static_cast<std::uint64_t>(tensor.numel() * tensor.element_size()) != nbytes)
            throw FormatError("archive: size mismatch for '" + entry.at("name").get<std::string>() + "'");
        std::memcpy(tensor.data_ptr(), data.data() + offset, nbytes);
        archive.entries_.emplace_back(entry.at("name").get<std::string>(), std::move(tensor));
    }
    return archive;
}

void TensorArchive::save(const std::filesystem::path& path) const { write_file_atomic(path, encode()); }

TensorArchive TensorArchive::load(const std::filesystem::path& path, std::string_view expected_version) {
    return decode(read_file(path), expected_version);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t hash_tensor(const torch::Tensor& tensor, std::uint64_t seed) {
    auto t = tensor.detach().cpu().contiguous();
    std::string header = std::string(c10::toString(t.scalar_type()));
    for (auto s : t.sizes()) header += ":" + std::to_string(s);
    auto h = fnv1a(header, seed);
    return fnv1a(std::string_view(static_cast<const char*>(t.data_ptr()),
                                  static_cast<std::size_t>(t.numel() * t.element_size())),
                 h);
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace savekit
