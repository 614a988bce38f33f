// SPDX-License-Identifier: Apache-2.0
#include "wz/cli.hpp"

int main(int argc, char** argv) { return wz::cli::run(argc, argv); }
