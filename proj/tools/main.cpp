// SPDX-License-Identifier: Apache-2.0
#include "bspde/cli.hpp"

int main(int argc, char** argv) { return bspde::cli::main_entry(argc, argv); }
