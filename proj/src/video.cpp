#include "savekit/video.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <regex>

#include "savekit/archive.hpp"
#include "savekit/errors.hpp"

namespace savekit {

namespace F = torch::nn::functional;

torch::Tensor read_png(const std::filesystem::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IngestionError("cannot read '" + path.string() + "': " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IngestionError("cannot decode '" + path.string() + "': " + image.message);
    }
    const auto h = static_cast<std::int64_t>(image.height), w = static_cast<std::int64_t>(image.width);
    auto hwc = torch::from_blob(buffer.data(), {h, w, 3}, torch::kUInt8).clone();
    return hwc.permute({2, 0, 1}).to(torch::kFloat64).div(255.0).contiguous();
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
    if (image.dim() != 3 || (image.size(0) != 1 && image.size(0) != 3))
        throw ContractError("write_png expects [1|3, H, W]");
    const auto c = image.size(0), h = image.size(1), w = image.size(2);
    auto bytes = image.detach().to(torch::kFloat64).clamp(0.0, 1.0).mul(255.0).round().to(torch::kUInt8)
                     .permute({1, 2, 0}).contiguous();
    png_image out{};
    out.version = PNG_IMAGE_VERSION;
    out.width = static_cast<png_uint_32>(w);
    out.height = static_cast<png_uint_32>(h);
    out.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&out, nullptr, &size, 0, bytes.data_ptr(), 0, nullptr))
        throw FormatError("png sizing failed for '" + path.string() + "'");
    std::string buffer(size, '\0');
    if (!png_image_write_to_memory(&out, buffer.data(), &size, 0, bytes.data_ptr(), 0, nullptr))
        throw FormatError(std::string("png encoding failed: ") + out.message);
    buffer.resize(size);
    write_file_atomic(path, buffer);
}

torch::Tensor resize_frames(const torch::Tensor& frames, std::int64_t height, std::int64_t width) {
    if (frames.size(2) == height && frames.size(3) == width) return frames;
    if (frames.size(2) >= height && frames.size(3) >= width)
        return F::adaptive_avg_pool2d(frames, F::AdaptiveAvgPool2dFuncOptions({height, width}));
    return F::interpolate(frames, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{height, width})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
}

VideoFrames ingest(const std::filesystem::path& dir, std::int64_t height, std::int64_t width) {
    if (!std::filesystem::is_directory(dir)) throw IngestionError("'" + dir.string() + "' is not a directory");
    static const std::regex pattern(R"(frame_(\d{4})\.png)");
    std::map<int, std::filesystem::path> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        std::smatch m;
        const auto name = entry.path().filename().string();
        if (std::regex_match(name, m, pattern)) found[std::stoi(m[1].str())] = entry.path();
    }
    if (found.empty()) throw IngestionError("no frame_%04d.png files in '" + dir.string() + "'");
    const int last = found.rbegin()->first;
    for (int i = 1; i <= last; ++i) {
        if (!found.count(i)) {
            char name[32];
            std::snprintf(name, sizeof name, "frame_%04d.png", i);
            throw IngestionError(std::string("missing frame ") + name + " in '" + dir.string() + "'");
        }
    }
    if (found.begin()->first != 1) throw IngestionError("frame numbering must start at 0001");
    std::vector<torch::Tensor> frames;
    for (const auto& [index, path] : found) {
        auto img = read_png(path);
        if (!frames.empty() && img.sizes() != frames.front().sizes())
            throw IngestionError("frame " + path.filename().string() + " has size " + c10::str(img.sizes()) +
                                 ", expected " + c10::str(frames.front().sizes()));
        frames.push_back(img);
    }
    return {resize_frames(torch::stack(frames), height, width)};
}

void write_video(const std::filesystem::path& dir, const VideoFrames& video, const nlohmann::json& meta) {
    std::filesystem::create_directories(dir);
    for (std::int64_t i = 0; i < video.count(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04lld.png", static_cast<long long>(i + 1));
        write_png(dir / name, video.frames[i]);
    }
    write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

torch::Tensor frames_to_latent(const VideoFrames& video, std::int64_t height, std::int64_t width) {
    return resize_frames(video.frames.to(torch::kFloat64), height, width) * 2.0 - 1.0;
}

VideoFrames latent_to_frames(const torch::Tensor& latent, std::int64_t height, std::int64_t width) {
    auto x = ((latent.detach().to(torch::kFloat64) + 1.0) / 2.0).clamp(0.0, 1.0);
    return {resize_frames(x, height, width).clamp(0.0, 1.0)};
}

double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak) {
    if (a.sizes() != b.sizes()) throw ContractError("psnr: shape mismatch");
    const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

std::string to_string(Shape shape) {
    switch (shape) {
        case Shape::Square: return "square";
        case Shape::Circle: return "circle";
        case Shape::Triangle: return "triangle";
    }
    return "square";
}

const std::vector<std::string>& palette_names() {
    static const std::vector<std::string> names{"red", "green", "blue", "yellow", "white", "gray", "black"};
    return names;
}

std::array<double, 3> palette_color(const std::string& name) {
    static const std::map<std::string, std::array<double, 3>> colors{
        {"red", {0.9, 0.1, 0.1}},      {"green", {0.1, 0.8, 0.2}}, {"blue", {0.15, 0.25, 0.9}},
        {"yellow", {0.95, 0.9, 0.1}},  {"white", {0.95, 0.95, 0.95}}, {"gray", {0.5, 0.5, 0.5}},
        {"black", {0.05, 0.05, 0.05}}};
    auto it = colors.find(name);
    if (it == colors.end()) throw ContractError("unknown color '" + name + "'");
    return it->second;
}

torch::Tensor render_shape(const ShapeSpec& spec, std::int64_t height, std::int64_t width) {
    const auto fg = palette_color(spec.color);
    const auto bg = palette_color(spec.background);
    auto img = torch::empty({3, height, width}, torch::kFloat64);
    auto acc = img.accessor<double, 3>();
    const double s = spec.size;
    for (std::int64_t r = 0; r < height; ++r) {
        for (std::int64_t c = 0; c < width; ++c) {
            // Pixel centres, relative to the shape's bounding box.
            const double y = static_cast<double>(r) + 0.5 - spec.row;
            const double x = static_cast<double>(c) + 0.5 - spec.col;
            bool inside = false;
            switch (spec.shape) {
                case Shape::Square: inside = x >= 0 && x < s && y >= 0 && y < s; break;
                case Shape::Circle: {
                    const double dx = x - s / 2, dy = y - s / 2;
                    inside = dx * dx + dy * dy <= s * s / 4;
                    break;
                }
                case Shape::Triangle:
                    // Apex at top centre, base along the bottom edge.
                    inside = y >= 0 && y < s && std::abs(x - s / 2) <= y / 2;
                    break;
            }
            for (int ch = 0; ch < 3; ++ch) acc[ch][r][c] = inside ? fg[ch] : bg[ch];
        }
    }
    return img;
}

MovingSquare moving_square_video(std::int64_t frames, std::int64_t size, double square, double step,
                                 const std::string& color, const std::string& background) {
    MovingSquare out;
    std::vector<torch::Tensor> images;
    const double travel = step * static_cast<double>(frames - 1);
    const double start_col = std::max(0.0, (static_cast<double>(size) - square - travel) / 2.0);
    const double row = (static_cast<double>(size) - square) / 2.0;
    for (std::int64_t i = 0; i < frames; ++i) {
        ShapeSpec spec{Shape::Square, color, background, row, start_col + step * static_cast<double>(i), square};
        out.placements.push_back(spec);
        images.push_back(render_shape(spec, size, size));
    }
    out.video.frames = torch::stack(images);
    return out;
}

}  // namespace savekit
