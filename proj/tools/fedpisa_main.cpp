// SPDX-License-Identifier: Apache-2.0
#include "fedpisa/cli.hpp"

int main(int argc, char** argv) { return fedpisa::cli::cli_main(argc, argv); }
