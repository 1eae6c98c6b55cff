#pragma once

#include <string>
#include <vector>

namespace dynaclr::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_validation = 1;
inline constexpr int exit_runtime = 2;

/// Runs one `dynaclr` invocation; args exclude the program name.
int run(const std::vector<std::string>& args);

int main(int argc, char** argv);

}  // namespace dynaclr::cli
