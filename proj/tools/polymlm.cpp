// SPDX-License-Identifier: Apache-2.0
#include "polymlm/cli.hpp"

int main(int argc, char** argv) { return polymlm::cli::run(argc, argv); }
