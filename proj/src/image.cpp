#include "dynaclr/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <png.h>

#include "dynaclr/errors.hpp"
#include "dynaclr/patch_pipeline.hpp"

namespace dynaclr::image {

std::vector<std::uint8_t> encode_png(const Image& img) {
    if (img.width < 1 || img.height < 1 || (img.channels != 1 && img.channels != 3))
        throw ConfigError("cannot encode an empty or unsupported image");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw Error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("png_create_info_struct failed");
    }
    std::vector<std::uint8_t> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("PNG encoding failed");
    }
    png_set_write_fn(
        png, &out,
        [](png_structp p, png_bytep data, png_size_t len) {
            auto* buf = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(p));
            buf->insert(buf->end(), data, data + len);
        },
        nullptr);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    const auto bytes = encode_png(img);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

View view_from_string(const std::string& s) {
    if (s == "center_slice") return View::center_slice;
    if (s == "max_proj") return View::max_proj;
    throw ConfigError("view must be center_slice or max_proj (got '" + s + "')");
}

std::vector<float> plane(const Volume& v, int channel, View view) {
    const auto& s = v.shape;
    if (channel < 0 || channel >= s.c) throw RangeError("channel index out of range");
    std::vector<float> out(static_cast<std::size_t>(s.y) * s.x);
    if (view == View::center_slice) {
        const int z = s.z / 2;
        for (int y = 0; y < s.y; ++y)
            for (int x = 0; x < s.x; ++x) out[static_cast<std::size_t>(y) * s.x + x] = v.at(channel, z, y, x);
    } else {
        std::fill(out.begin(), out.end(), -std::numeric_limits<float>::infinity());
        for (int z = 0; z < s.z; ++z)
            for (int y = 0; y < s.y; ++y)
                for (int x = 0; x < s.x; ++x) {
                    float& o = out[static_cast<std::size_t>(y) * s.x + x];
                    o = std::max(o, v.at(channel, z, y, x));
                }
    }
    return out;
}

Image gray(const std::vector<float>& p, int width, int height, double lo, double hi) {
    Image img(width, height, 1);
    const double span = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double v = std::clamp((p[i] - lo) / span, 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

Image gray_auto(const std::vector<float>& p, int width, int height) {
    return gray(p, width, height, patch::percentile(p, 1.0), patch::percentile(p, 99.0));
}

Image diverging(const std::vector<float>& p, int width, int height, double bound) {
    Image img(width, height, 3);
    const double b = bound > 0 ? bound : 1.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double v = std::clamp(p[i] / b, -1.0, 1.0);
        const auto fade = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - std::abs(v))));
        std::uint8_t* px = img.pixels.data() + 3 * i;
        if (v >= 0) {
            px[0] = 255;
            px[1] = fade;
            px[2] = fade;
        } else {
            px[0] = fade;
            px[1] = fade;
            px[2] = 255;
        }
    }
    return img;
}

Image upscale(const Image& img, int factor) {
    if (factor < 1) throw ConfigError("upscale factor must be >= 1");
    Image out(img.width * factor, img.height * factor, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            const std::uint8_t* src =
                img.pixels.data() + (static_cast<std::size_t>(y / factor) * img.width + x / factor) * img.channels;
            std::copy(src, src + img.channels, out.at(x, y));
        }
    return out;
}

namespace {

Image to_rgb(const Image& img) {
    if (img.channels == 3) return img;
    Image out(img.width, img.height, 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        out.pixels[3 * i] = out.pixels[3 * i + 1] = out.pixels[3 * i + 2] = img.pixels[i];
    return out;
}

}  // namespace

Image hstack(const std::vector<Image>& parts, int gap) {
    if (parts.empty()) throw ConfigError("nothing to stack");
    int w = 0, h = 0;
    for (const auto& p : parts) {
        w += p.width;
        h = std::max(h, p.height);
    }
    w += gap * static_cast<int>(parts.size() - 1);
    Image out(w, h, 3, 255);
    int x0 = 0;
    for (const auto& part : parts) {
        const auto rgb = to_rgb(part);
        for (int y = 0; y < rgb.height; ++y)
            std::copy_n(rgb.pixels.data() + static_cast<std::size_t>(y) * rgb.width * 3, rgb.width * 3, out.at(x0, y));
        x0 += part.width + gap;
    }
    return out;
}

Image vstack(const std::vector<Image>& parts, int gap) {
    if (parts.empty()) throw ConfigError("nothing to stack");
    int w = 0, h = 0;
    for (const auto& p : parts) {
        h += p.height;
        w = std::max(w, p.width);
    }
    h += gap * static_cast<int>(parts.size() - 1);
    Image out(w, h, 3, 255);
    int y0 = 0;
    for (const auto& part : parts) {
        const auto rgb = to_rgb(part);
        for (int y = 0; y < rgb.height; ++y)
            std::copy_n(rgb.pixels.data() + static_cast<std::size_t>(y) * rgb.width * 3, rgb.width * 3, out.at(0, y0 + y));
        y0 += part.height + gap;
    }
    return out;
}

Canvas::Canvas(int width, int height, Rgb bg) : img_(width, height, 3) {
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) std::copy(bg.begin(), bg.end(), img_.at(x, y));
}

void Canvas::pixel(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    std::copy(c.begin(), c.end(), img_.at(x, y));
}

void Canvas::line(double x0, double y0, double x1, double y1, Rgb c) {
    const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
    for (int i = 0; i <= n; ++i) {
        const double t = static_cast<double>(i) / n;
        pixel(static_cast<int>(std::lround(x0 + t * (x1 - x0))), static_cast<int>(std::lround(y0 + t * (y1 - y0))), c);
    }
}

void Canvas::dot(double x, double y, int r, Rgb c) {
    const int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
            if (dx * dx + dy * dy <= r * r) pixel(cx + dx, cy + dy, c);
}

void Canvas::rect(int x0, int y0, int x1, int y1, Rgb c) {
    line(x0, y0, x1, y0, c);
    line(x1, y0, x1, y1, c);
    line(x1, y1, x0, y1, c);
    line(x0, y1, x0, y0, c);
}

namespace {

struct Frame {
    double xmin, xmax, ymin, ymax;
    int left = 36, right = 12, top = 12, bottom = 28, width, height;

    Frame(double x0, double x1, double y0, double y1, int w, int h)
        : xmin(x0), xmax(x1), ymin(y0), ymax(y1), width(w), height(h) {}

    double px(double x) const { return left + (x - xmin) / (xmax - xmin) * (width - left - right); }
    double py(double y) const { return height - bottom - (y - ymin) / (ymax - ymin) * (height - top - bottom); }
};

void fit_range(double& lo, double& hi) {
    if (!(lo < hi)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
}

void draw_frame(Canvas& c, const Frame& f) {
    const Rgb axis{90, 90, 90};
    c.rect(f.left, f.top, f.width - f.right, f.height - f.bottom, axis);
    for (int i = 0; i <= 4; ++i) {
        const double xt = f.left + i * (f.width - f.left - f.right) / 4.0;
        const double yt = f.top + i * (f.height - f.top - f.bottom) / 4.0;
        c.line(xt, f.height - f.bottom, xt, f.height - f.bottom + 4, axis);
        c.line(f.left - 4, yt, f.left, yt, axis);
    }
}

}  // namespace

Image line_plot(const std::vector<Series>& series, int width, int height) {
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double b = i < s.band.size() ? s.band[i] : 0.0;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i] - b);
            ymax = std::max(ymax, s.y[i] + b);
        }
    if (!std::isfinite(xmin)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    fit_range(xmin, xmax);
    fit_range(ymin, ymax);
    const Frame f(xmin, xmax, ymin, ymax, width, height);
    Canvas c(width, height);
    for (const auto& s : series) {
        const Rgb light{static_cast<std::uint8_t>(s.color[0] / 3 + 170), static_cast<std::uint8_t>(s.color[1] / 3 + 170),
                        static_cast<std::uint8_t>(s.color[2] / 3 + 170)};
        for (std::size_t i = 0; i < s.x.size() && i < s.band.size(); ++i)
            c.line(f.px(s.x[i]), f.py(s.y[i] - s.band[i]), f.px(s.x[i]), f.py(s.y[i] + s.band[i]), light);
    }
    draw_frame(c, f);
    for (const auto& s : series) {
        for (std::size_t i = 1; i < s.x.size(); ++i) c.line(f.px(s.x[i - 1]), f.py(s.y[i - 1]), f.px(s.x[i]), f.py(s.y[i]), s.color);
        for (std::size_t i = 0; i < s.x.size(); ++i) c.dot(f.px(s.x[i]), f.py(s.y[i]), 2, s.color);
    }
    return c.image();
}

Image scatter_plot(const std::vector<double>& x, const std::vector<double>& y, const std::vector<Rgb>& colors, int width,
                   int height) {
    if (x.size() != y.size() || x.size() != colors.size()) throw ConfigError("scatter inputs are not aligned");
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!x.empty()) {
        xmin = *std::min_element(x.begin(), x.end());
        xmax = *std::max_element(x.begin(), x.end());
        ymin = *std::min_element(y.begin(), y.end());
        ymax = *std::max_element(y.begin(), y.end());
    }
    fit_range(xmin, xmax);
    fit_range(ymin, ymax);
    const Frame f(xmin, xmax, ymin, ymax, width, height);
    Canvas c(width, height);
    draw_frame(c, f);
    for (std::size_t i = 0; i < x.size(); ++i) c.dot(f.px(x[i]), f.py(y[i]), 1, colors[i]);
    return c.image();
}

Rgb palette(std::size_t i) {
    static const Rgb colors[] = {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14},
                                 {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
    return colors[i % (sizeof colors / sizeof colors[0])];
}

Rgb ramp(double v) {
    v = std::clamp(v, 0.0, 1.0);
    // Piecewise-linear approximation of a perceptual blue-green-yellow map.
    static const double stops[][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
    const double s = v * 4.0;
    const int i = std::min(3, static_cast<int>(s));
    const double t = s - i;
    Rgb c;
    for (int k = 0; k < 3; ++k) c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] * (1 - t) + stops[i + 1][k] * t));
    return c;
}

}  // namespace dynaclr::image
