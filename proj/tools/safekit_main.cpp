// Copyright (c) 2026 The safekit authors
// SPDX-License-Identifier: Apache-2.0

#include "safekit/cli.hpp"

int main(int argc, char** argv) { return safekit::run_cli(argc, argv); }
