// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

int main(int argc, char** argv) { return acm::cli::run(argc, argv); }
