#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dynaclr/types.hpp"

namespace dynaclr::image {

/// 8-bit image, 1 (gray) or 3 (RGB) channels, row-major interleaved.
struct Image {
    int width = 0, height = 0, channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int w, int h, int c, std::uint8_t fill = 0)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels; }
};

using Rgb = std::array<std::uint8_t, 3>;

std::vector<std::uint8_t> encode_png(const Image& img);
void write_png(const std::filesystem::path& path, const Image& img);

enum class View { center_slice, max_proj };
View view_from_string(const std::string& s);

/// One channel reduced to a plane: the central z slice or the max over z.
std::vector<float> plane(const Volume& v, int channel, View view);

/// Gray rendering with values mapped linearly from [lo, hi] to [0, 255].
Image gray(const std::vector<float>& plane, int width, int height, double lo, double hi);
/// Gray rendering stretched between the plane's 1st and 99th percentiles.
Image gray_auto(const std::vector<float>& plane, int width, int height);
/// Blue-white-red rendering symmetric around zero with the given bound.
Image diverging(const std::vector<float>& plane, int width, int height, double bound);

/// Nearest-neighbour upscaling by an integer factor.
Image upscale(const Image& img, int factor);
/// Horizontal concatenation with a white gutter; gray inputs become RGB.
Image hstack(const std::vector<Image>& parts, int gap = 4);
Image vstack(const std::vector<Image>& parts, int gap = 4);

/// Minimal raster canvas for diagnostic plots.
class Canvas {
public:
    Canvas(int width, int height, Rgb background = {255, 255, 255});

    void pixel(int x, int y, Rgb c);
    void line(double x0, double y0, double x1, double y1, Rgb c);
    void dot(double x, double y, int radius, Rgb c);
    void rect(int x0, int y0, int x1, int y1, Rgb c);
    const Image& image() const noexcept { return img_; }

private:
    Image img_;
};

struct Series {
    std::vector<double> x, y;
    Rgb color{0, 0, 0};
    /// Optional symmetric error band.
    std::vector<double> band;
};

/// Line plot with a plain frame; data ranges are fitted automatically.
Image line_plot(const std::vector<Series>& series, int width = 480, int height = 320);
/// Scatter plot with per-point colors.
Image scatter_plot(const std::vector<double>& x, const std::vector<double>& y, const std::vector<Rgb>& colors,
                   int width = 480, int height = 480);

/// Fixed qualitative palette.
Rgb palette(std::size_t i);
/// Continuous map from [0, 1] (dark blue to yellow).
Rgb ramp(double v);

}  // namespace dynaclr::image
