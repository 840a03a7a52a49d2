#pragma once

#include <string>
#include <vector>

#include "icr/network.hpp"

namespace icr {

// Command-line entry point: train, eval, audit, gen-synth, bench-routing.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace icr
