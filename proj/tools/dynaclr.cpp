#include "dynaclr/cli.hpp"

int main(int argc, char** argv) { return dynaclr::cli::main(argc, argv); }
