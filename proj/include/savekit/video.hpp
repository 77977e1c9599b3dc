#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace savekit {

/// RGB frames in [0, 1], f64 [N, 3, H, W].
struct VideoFrames {
    torch::Tensor frames;

    std::int64_t count() const { return frames.size(0); }
    std::int64_t height() const { return frames.size(2); }
    std::int64_t width() const { return frames.size(3); }
};

/// [C, H, W] in [0, 1] (C = 1 or 3) <-> 8-bit PNG.
torch::Tensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const torch::Tensor& image);

/// Loads frame_0001.png ... from `dir` and resizes to (height, width).
/// Gaps in numbering and mixed frame sizes raise IngestionError.
VideoFrames ingest(const std::filesystem::path& dir, std::int64_t height, std::int64_t width);

/// Writes frame_%04d.png for every frame plus meta.json.
void write_video(const std::filesystem::path& dir, const VideoFrames& video, const nlohmann::json& meta);

/// Area-resize to the latent grid and map [0,1] -> [-1,1].
torch::Tensor frames_to_latent(const VideoFrames& video, std::int64_t height, std::int64_t width);
/// Inverse map, clamped to [0,1], bilinear-resized to (height, width).
VideoFrames latent_to_frames(const torch::Tensor& latent, std::int64_t height, std::int64_t width);

torch::Tensor resize_frames(const torch::Tensor& frames, std::int64_t height, std::int64_t width);

double psnr(const torch::Tensor& a, const torch::Tensor& b, double peak = 1.0);

// ------------------------------------------------------------ synthetic scenes

enum class Shape { Square, Circle, Triangle };

std::string to_string(Shape shape);
const std::vector<std::string>& palette_names();
std::array<double, 3> palette_color(const std::string& name);

struct ShapeSpec {
    Shape shape = Shape::Square;
    std::string color = "red";
    std::string background = "gray";
    double row = 0.0, col = 0.0;  // top-left corner in pixels
    double size = 12.0;
};

/// Renders one shape on a flat background, [3, H, W].
torch::Tensor render_shape(const ShapeSpec& spec, std::int64_t height, std::int64_t width);

struct MovingSquare {
    VideoFrames video;
    std::vector<ShapeSpec> placements;  // one per frame
};

/// Square translating horizontally by `step` pixels per frame.
MovingSquare moving_square_video(std::int64_t frames = 8, std::int64_t size = 32, double square = 12.0,
                                 double step = 2.0, const std::string& color = "red",
                                 const std::string& background = "gray");

}  // namespace savekit
