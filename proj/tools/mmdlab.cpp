// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "mmdlab/cli.hpp"

int main(int argc, char** argv) {
  return mmdlab::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
