#include "support.hpp"

#include <png.h>
#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace dynaclr::testing {

TempDir::TempDir(const std::string& prefix) {
    std::random_device rd;
    for (int attempt = 0; attempt < 100; ++attempt) {
        auto candidate = fs::temp_directory_path() / (prefix + "_" + std::to_string(rd()));
        if (fs::create_directory(candidate)) {
            path_ = candidate;
            return;
        }
    }
    throw std::runtime_error("cannot create a temporary directory");
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

synth::SynthConfig small_config(int cells, int timepoints) {
    synth::SynthConfig c;
    c.fovs_per_condition = 1;
    c.cells_per_fov = cells;
    c.n_timepoints = timepoints;
    c.volume_shape = {2, 5, 128, 128};
    c.onset["moi5"].midpoint_frames = timepoints / 2.0;
    c.onset["moi5"].scale_frames = 0.8;
    c.seed = 7;
    return c;
}

const fs::path& shared_small_dataset() {
    static TempDir dir("dynaclr_small");
    static const fs::path root = [] {
        const auto p = dir.path() / "ds";
        synth::generate_dataset(small_config(), p);
        return p;
    }();
    return root;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'')
            out += "'\\''";
        else
            out += c;
    }
    return out + "'";
}

ToolResult run_tool(const std::vector<std::string>& args) {
    std::string cmd = shell_quote(DYNACLR_TOOL_PATH);
    for (const auto& a : args) cmd += " " + shell_quote(a);
    cmd += " 2>&1";
    ToolResult r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

image::Image decode_png(const std::string& bytes, bool rgb) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
        throw std::runtime_error(std::string("png decode: ") + img.message);
    img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    image::Image out(static_cast<int>(img.width), static_cast<int>(img.height), rgb ? 3 : 1);
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr))
        throw std::runtime_error(std::string("png decode: ") + img.message);
    return out;
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace dynaclr::testing
