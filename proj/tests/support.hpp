#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dynaclr/dataset_store.hpp"
#include "dynaclr/image.hpp"
#include "dynaclr/synthlapse.hpp"

namespace dynaclr::testing {

/// Fresh directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& prefix = "dynaclr");
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Small synthetic config: one FOV per condition, 128 x 128 frames.
synth::SynthConfig small_config(int cells = 12, int timepoints = 6);

/// A small dataset generated once per test process.
const std::filesystem::path& shared_small_dataset();

struct ToolResult {
    int exit_code = -1;
    std::string output;
};

/// Runs the built `dynaclr` executable with the given arguments (stdout and stderr captured).
ToolResult run_tool(const std::vector<std::string>& args);

std::string shell_quote(const std::string& s);

/// Decodes PNG bytes to 8-bit gray or RGB; throws std::runtime_error on bad input.
image::Image decode_png(const std::string& bytes, bool rgb);

std::string read_file(const std::filesystem::path& path);

}  // namespace dynaclr::testing
